"""Decoder-only transformer forecaster with a Gaussian next-step head.

Each context value is embedded by a learned affine map (scalar -> d_model)
plus a learned absolute positional embedding. ``n_layers`` post-norm blocks
(causal multi-head attention -> add & norm -> GELU feed-forward -> add & norm)
follow, and the last position is read out through a two-output head giving
``(mean, log_std)`` of the next value.

Parameters live as plain float64 arrays in ``Forecaster.params``; every
forward pass wraps them in fresh :class:`~tslora.numerics.Node` leaves, so a
caller decides per call which of them receive gradients.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Protocol

import numpy as np

from . import numerics as nx
from .container import read_container, write_container
from .errors import ConfigError, ContractError, FormatError, InjectionError
from .numerics import Node

LOG_STD_MIN = math.log(1e-6)
LOG_STD_MAX = math.log(1e3)
INIT_STD = 0.02
ATTN_TARGETS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    context_length: int = 72
    horizon: int = 36

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "context_length", "horizon"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}", flag=name)
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}", flag="n_heads"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in canonical (checkpoint) order."""
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (d, 1),
        "embed.bias": (d,),
        "pos.weight": (config.context_length, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}"
        for t in ATTN_TARGETS:
            shapes[f"{p}.attn.{t}"] = (d, d)
        shapes[f"{p}.ln1.gamma"] = (d,)
        shapes[f"{p}.ln1.beta"] = (d,)
        shapes[f"{p}.ff.w1"] = (f, d)
        shapes[f"{p}.ff.b1"] = (f,)
        shapes[f"{p}.ff.w2"] = (d, f)
        shapes[f"{p}.ff.b2"] = (d,)
        shapes[f"{p}.ln2.gamma"] = (d,)
        shapes[f"{p}.ln2.beta"] = (d,)
    shapes["head.weight"] = (2, d)
    shapes["head.bias"] = (2,)
    return shapes


def closed_form_param_count(config: ModelConfig) -> int:
    d, f, L, C = config.d_model, config.d_ff, config.n_layers, config.context_length
    per_layer = 4 * d * d + 2 * (2 * d) + (f * d + f) + (d * f + d)
    return 2 * d + C * d + L * per_layer + (2 * d + 2)


@dataclass
class StepDistribution:
    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


class AttentionWeights(NamedTuple):
    q: Node
    k: Node
    v: Node
    o: Node


class Projector(Protocol):
    """Anything that can stand in for ``x @ W.T`` (a bound LoRA adapter)."""

    def project(self, x: Node, weight: Node) -> Node: ...


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """``x @ weight.T (+ bias)`` with ``weight`` stored as (out, in)."""
    y = nx.matmul(x, nx.swap_last(weight))
    return y if bias is None else nx.add(y, bias)


def _project(x: Node, weight: Node, adapter: Projector | None) -> Node:
    if adapter is None:
        return linear(x, weight)
    return adapter.project(x, weight)


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask, True where key position > query position."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def attention_forward(
    H: Node,
    weights: AttentionWeights,
    n_heads: int,
    adapters: Mapping[str, Projector] | None = None,
    causal: bool = True,
    last_only: bool = False,
) -> Node:
    """Multi-head scaled dot-product self-attention.

    ``H`` is ``(..., n, d_model)``. ``adapters`` maps a target letter
    (``"q"``, ``"k"``, ``"v"``, ``"o"``) to a projector replacing ``x @ W.T``.
    With ``last_only`` only the final query position is computed, which is
    all the forecasting head needs from the top layer.
    """
    adapters = adapters or {}
    for t in adapters:
        if t not in ATTN_TARGETS:
            raise InjectionError(f"unknown attention target {t!r}")
    *batch, n, d = H.shape
    if d % n_heads:
        raise ConfigError(f"width {d} not divisible by {n_heads} heads", flag="n_heads")
    dh = d // n_heads

    def split_heads(x: Node, length: int) -> Node:
        x = nx.reshape(x, (*batch, length, n_heads, dh))
        nb = len(batch)
        axes = (*range(nb), nb + 1, nb, nb + 2)
        return nx.transpose(x, axes)

    q_in = nx.getitem(H, (..., slice(n - 1, n), slice(None))) if last_only else H
    nq = q_in.shape[-2]
    Q = split_heads(_project(q_in, weights.q, adapters.get("q")), nq)
    K = split_heads(_project(H, weights.k, adapters.get("k")), n)
    V = split_heads(_project(H, weights.v, adapters.get("v")), n)

    scores = nx.matmul(nx.scale(Q, 1.0 / math.sqrt(dh)), nx.swap_last(K))
    mask = causal_mask(n)[n - nq:] if causal else None
    P = nx.softmax_rows(scores, mask)
    ctx = nx.matmul(P, V)  # (..., heads, nq, dh)
    nb = len(batch)
    ctx = nx.transpose(ctx, (*range(nb), nb + 1, nb, nb + 2))
    ctx = nx.reshape(ctx, (*batch, nq, d))
    return _project(ctx, weights.o, adapters.get("o"))


def predict_step(
    config: ModelConfig,
    p: Mapping[str, Node],
    contexts: np.ndarray,
    adapters: Mapping[str, Projector] | None = None,
) -> tuple[Node, Node]:
    """Graph for one forecasting step over a batch of contexts.

    ``contexts`` is ``(B, n)`` with ``1 <= n <= context_length``. ``adapters``
    is keyed by full parameter name (``"layers.0.attn.q"``). Returns
    ``(mean, log_std)`` nodes of shape ``(B, 1)``; ``log_std`` is already
    clamped to the allowed std range.
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.ndim != 2 or contexts.shape[1] == 0:
        raise ContractError(f"contexts must be (batch, n>=1), got shape {contexts.shape}")
    n = contexts.shape[1]
    if n > config.context_length:
        raise ContractError(f"context length {n} exceeds the model's {config.context_length}")
    adapters = adapters or {}

    x = linear(nx.constant(contexts[:, :, None]), p["embed.weight"], p["embed.bias"])
    x = nx.add(x, nx.getitem(p["pos.weight"], slice(0, n)))
    for i in range(config.n_layers):
        pre = f"layers.{i}"
        last = i == config.n_layers - 1
        weights = AttentionWeights(*(p[f"{pre}.attn.{t}"] for t in ATTN_TARGETS))
        layer_adapters = {t: adapters[f"{pre}.attn.{t}"] for t in ATTN_TARGETS
                          if f"{pre}.attn.{t}" in adapters}
        a = attention_forward(x, weights, config.n_heads, layer_adapters, last_only=last)
        if last:
            x = nx.getitem(x, (..., slice(n - 1, n), slice(None)))
        x = nx.layer_norm(nx.add(x, a), p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
        hidden = nx.gelu(linear(x, p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"]))
        x = nx.layer_norm(
            nx.add(x, linear(hidden, p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"])),
            p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"],
        )
    out = linear(nx.getitem(x, (slice(None), -1, slice(None))), p["head.weight"], p["head.bias"])
    mean = nx.getitem(out, (slice(None), slice(0, 1)))
    log_std = nx.clip(nx.getitem(out, (slice(None), slice(1, 2))), LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


@dataclass
class Forecaster:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.params) != list(expected):
            missing = set(expected) ^ set(self.params)
            if missing:
                raise FormatError(f"parameter names do not match config: {sorted(missing)}")
            self.params = {k: self.params[k] for k in expected}
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise FormatError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    def num_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def leaves(self, trainable: bool = False) -> dict[str, Node]:
        return {k: Node(v, requires_grad=trainable) for k, v in self.params.items()}

    def trainable_params(self) -> dict[str, np.ndarray]:
        return self.params

    def step(self, leaves: Mapping[str, Node], contexts: np.ndarray) -> tuple[Node, Node]:
        return predict_step(self.config, leaves, contexts)

    def copy(self) -> "Forecaster":
        return Forecaster(self.config, {k: v.copy() for k, v in self.params.items()})


def build_model(config: ModelConfig, seed: int) -> Forecaster:
    """Fresh forecaster: N(0, 0.02^2) weights, layer-norm gamma=1 / beta=0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith(".beta"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
    return Forecaster(config, params)


def forward_dist(model, context) -> StepDistribution:
    """Next-step distribution for a single context (``Forecaster`` or ``AdaptedModel``)."""
    context = np.asarray(context, dtype=np.float64).reshape(-1)
    if context.size == 0:
        raise ContractError("context must contain at least one value")
    mean, log_std = model.step(model.leaves(False), context[None, :])
    return StepDistribution(mean.value.reshape(1).copy(), log_std.value.reshape(1).copy())


def rollout(model, contexts: np.ndarray, h: int, rng: np.random.Generator) -> np.ndarray:
    """Autoregressive sampling for a batch of contexts -> ``(B, h)`` paths."""
    if h <= 0:
        raise ContractError(f"horizon must be positive, got {h}")
    C = model.config.context_length
    window = np.array(contexts, dtype=np.float64)[:, -C:]
    leaves = model.leaves(False)
    out = np.empty((window.shape[0], h))
    for t in range(h):
        mean, log_std = model.step(leaves, window)
        mu = mean.value[:, 0]
        sigma = np.exp(log_std.value[:, 0])
        draw = mu + sigma * rng.standard_normal(mu.shape[0])
        out[:, t] = draw
        window = np.concatenate([window, draw[:, None]], axis=1)[:, -C:]
    return out


def sample_forecast(model, context, h: int, n_samples: int, seed: int) -> np.ndarray:
    """``n_samples`` sampled forecast paths of length ``h`` for one context."""
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    if h <= 0:
        raise ContractError(f"horizon must be positive, got {h}")
    context = np.asarray(context, dtype=np.float64).reshape(1, -1)
    if context.shape[1] == 0:
        raise ContractError("context must contain at least one value")
    return rollout(model, np.repeat(context, n_samples, axis=0), h, np.random.default_rng(seed))


# ------------------------------------------------------------ checkpoints


def save_checkpoint(model: Forecaster, path) -> None:
    write_container(path, "model", {"config": asdict(model.config)}, model.params)


def load_checkpoint(path) -> Forecaster:
    kind, meta, arrays = read_container(path)
    if kind != "model":
        raise FormatError(f"{path}: expected a model checkpoint, found {kind!r}")
    return Forecaster(ModelConfig(**meta["config"]), arrays)
