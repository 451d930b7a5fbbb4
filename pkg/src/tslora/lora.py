"""Low-rank adapters on the attention projections of a frozen forecaster.

An adapter on a base matrix ``W`` (d x k) holds ``B`` (d x r) and ``A``
(r x k). The adapted projection uses the effective weight
``W + (alpha / r) * B @ A`` but is evaluated as two parallel paths, so the
dense update is never formed during training and ``W`` itself is never
written to. :func:`merge_adapter` is the explicit export step that does form
it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import numerics as nx
from .container import read_container, write_container
from .errors import ConfigError, FormatError, InjectionError, RankError
from .model import ATTN_TARGETS, Forecaster, ModelConfig, predict_step
from .numerics import Node

log = logging.getLogger(__name__)

DEFAULT_RANK = 2
DEFAULT_ALPHA = 16.0
A_INIT_STD = 0.02


@dataclass
class LoraAdapter:
    A: np.ndarray  # (r, k)
    B: np.ndarray  # (d, r)
    alpha: float
    target: str

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise InjectionError(
                f"{self.target}: A {self.A.shape} and B {self.B.shape} do not share a rank"
            )
        if self.rank < 1:
            raise RankError(f"{self.target}: rank must be >= 1", flag="rank")
        if not self.alpha > 0:
            raise ConfigError(f"{self.target}: alpha must be positive, got {self.alpha}", flag="alpha")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        """Shape (d, k) of the matrix this adapter fits."""
        return self.B.shape[0], self.A.shape[1]

    def num_params(self) -> int:
        return self.A.size + self.B.size

    def check_base(self, W_shape: tuple[int, ...]) -> None:
        if tuple(W_shape) != self.shape:
            raise InjectionError(
                f"{self.target}: adapter fits {self.shape}, base matrix is {tuple(W_shape)}"
            )


def adapter_forward(x, W, adapter_or_A, B=None, scale: float | None = None) -> Node:
    """``x @ W'.T`` with ``W' = W + scale * B @ A``, via the parallel low-rank path.

    Either pass a :class:`LoraAdapter` (treated as constants) or explicit
    ``A``/``B`` nodes plus ``scale``. Only nodes that require gradients get
    them; in training that is ``A`` and ``B``, never ``W``.
    """
    if isinstance(adapter_or_A, LoraAdapter):
        adapter = adapter_or_A
        A, B, scale = nx.as_node(adapter.A), nx.as_node(adapter.B), adapter.scale
    else:
        A, B = nx.as_node(adapter_or_A), nx.as_node(B)
    x, W = nx.as_node(x), nx.as_node(W)
    d, k = W.shape
    if A.shape[-1] != k or B.shape[0] != d or A.shape[0] != B.shape[-1]:
        raise InjectionError(
            f"adapter A {A.shape} / B {B.shape} incompatible with base matrix {W.shape}"
        )
    if x.shape[-1] != k:
        raise InjectionError(f"input width {x.shape[-1]} does not match base matrix {W.shape}")
    base = nx.matmul(x, nx.swap_last(W))
    low = nx.matmul(nx.matmul(x, nx.swap_last(A)), nx.swap_last(B))
    return nx.add(base, nx.scale(low, scale))


def merge_adapter(W: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Dense ``W + (alpha / r) * B @ A``; ``W`` is left untouched."""
    W = np.asarray(W, dtype=np.float64)
    adapter.check_base(W.shape)
    return W + adapter.scale * (adapter.B @ adapter.A)


class _BoundAdapter:
    """Adapter whose ``A``/``B`` are graph nodes for the current forward pass."""

    __slots__ = ("A", "B", "scale")

    def __init__(self, A: Node, B: Node, scale: float):
        self.A, self.B, self.scale = A, B, scale

    def project(self, x: Node, weight: Node) -> Node:
        return adapter_forward(x, weight, self.A, self.B, self.scale)


class AdaptedModel:
    """A frozen base forecaster plus a set of LoRA adapters keyed by target name.

    The base is shared, never copied: several adapted models may sit on the
    same :class:`Forecaster`. Only the adapter matrices are trainable.
    """

    def __init__(self, base: Forecaster, adapters: Mapping[str, LoraAdapter]):
        if not adapters:
            raise ConfigError("an adapted model needs at least one adapter", flag="targets")
        for name, ad in adapters.items():
            if name not in base.params:
                raise InjectionError(f"adapter target {name!r} is not a base parameter")
            if not name.split(".")[-1] in ATTN_TARGETS or ".attn." not in name:
                raise InjectionError(f"adapter target {name!r} is not an attention matrix")
            ad.check_base(base.params[name].shape)
        self.base = base
        self.adapters = dict(adapters)

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def leaves(self, trainable: bool = False) -> dict[str, Node]:
        out = self.base.leaves(trainable=False)
        for name, ad in self.adapters.items():
            out[f"{name}.lora_A"] = Node(ad.A, requires_grad=trainable)
            out[f"{name}.lora_B"] = Node(ad.B, requires_grad=trainable)
        return out

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, ad in self.adapters.items():
            out[f"{name}.lora_A"] = ad.A
            out[f"{name}.lora_B"] = ad.B
        return out

    def step(self, leaves: Mapping[str, Node], contexts: np.ndarray) -> tuple[Node, Node]:
        bound = {
            name: _BoundAdapter(leaves[f"{name}.lora_A"], leaves[f"{name}.lora_B"], ad.scale)
            for name, ad in self.adapters.items()
        }
        return predict_step(self.config, leaves, contexts, bound)

    def num_params(self) -> int:
        """Total parameters: frozen base plus adapters."""
        return self.base.num_params() + sum(ad.num_params() for ad in self.adapters.values())

    def merged(self) -> Forecaster:
        params = {k: v.copy() for k, v in self.base.params.items()}
        for name, ad in self.adapters.items():
            params[name] = merge_adapter(self.base.params[name], ad)
        return Forecaster(self.config, params)

    def copy(self) -> "AdaptedModel":
        return AdaptedModel(self.base, {
            k: LoraAdapter(ad.A.copy(), ad.B.copy(), ad.alpha, ad.target)
            for k, ad in self.adapters.items()
        })


def _parse_targets(targets: Iterable[str] | str) -> tuple[str, ...]:
    if isinstance(targets, str):
        targets = [t for t in targets.replace(",", "") if t.strip()]
    targets = tuple(dict.fromkeys(t.strip().lower() for t in targets))
    if not targets:
        raise ConfigError("LoRA targets must be a non-empty subset of {q,k,v,o}", flag="targets")
    bad = [t for t in targets if t not in ATTN_TARGETS]
    if bad:
        raise ConfigError(f"unknown LoRA targets {bad}; choose from q,k,v,o", flag="targets")
    return targets


def validate_rank(r, d_model: int) -> int:
    if isinstance(r, bool) or not isinstance(r, (int, np.integer)):
        raise RankError(f"rank must be an integer, got {r!r}", flag="rank")
    if r < 1 or r > d_model:
        raise RankError(f"rank must lie in [1, {d_model}], got {r}", flag="rank")
    return int(r)


def inject_lora(
    model: Forecaster,
    targets: Iterable[str] | str = ATTN_TARGETS,
    r: int = DEFAULT_RANK,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
) -> AdaptedModel:
    """Attach one zero-initialised adapter per (layer, target)."""
    targets = _parse_targets(targets)
    r = validate_rank(r, model.config.d_model)
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}", flag="alpha")
    rng = np.random.default_rng(seed)
    adapters = {}
    for i in range(model.config.n_layers):
        for t in ATTN_TARGETS:
            if t not in targets:
                continue
            name = f"layers.{i}.attn.{t}"
            d, k = model.params[name].shape
            if r > min(d, k):
                raise RankError(f"rank {r} exceeds min(d, k) = {min(d, k)} for {name}", flag="rank")
            adapters[name] = LoraAdapter(
                A=rng.normal(0.0, A_INIT_STD, size=(r, k)),
                B=np.zeros((d, r)),
                alpha=float(alpha),
                target=name,
            )
    return AdaptedModel(model, adapters)


def trainable_param_count(m, mode: str) -> int:
    """Parameters updated by fine-tuning in ``mode`` (``"lora"`` or ``"full"``)."""
    if mode == "lora":
        if not isinstance(m, AdaptedModel):
            return 0
        return int(sum(ad.rank * sum(ad.shape) for ad in m.adapters.values()))
    if mode == "full":
        base = m.base if isinstance(m, AdaptedModel) else m
        return base.num_params()
    raise ConfigError(f"unknown mode {mode!r}; expected 'lora' or 'full'", flag="mode")


def lora_count_formula(config: ModelConfig, r: int, n_targets: int = 4) -> int:
    return n_targets * config.n_layers * r * (config.d_model + config.d_model)


# ------------------------------------------------------------------ files


def save_adapters(model: AdaptedModel, path) -> None:
    meta = {
        "config": {k: getattr(model.config, k) for k in model.config.__dataclass_fields__},
        "adapters": [
            {"target": name, "rank": ad.rank, "alpha": ad.alpha}
            for name, ad in model.adapters.items()
        ],
    }
    arrays = {}
    for name, ad in model.adapters.items():
        arrays[f"{name}.lora_A"] = ad.A
        arrays[f"{name}.lora_B"] = ad.B
    write_container(path, "adapters", meta, arrays)


def load_adapters(path, base: Forecaster) -> AdaptedModel:
    kind, meta, arrays = read_container(path)
    if kind != "adapters":
        raise FormatError(f"{path}: expected an adapter file, found {kind!r}")
    adapters = {}
    for entry in meta["adapters"]:
        name = entry["target"]
        ad = LoraAdapter(arrays[f"{name}.lora_A"], arrays[f"{name}.lora_B"],
                         float(entry["alpha"]), name)
        if ad.rank != entry["rank"]:
            raise FormatError(f"{path}: rank mismatch for {name}")
        adapters[name] = ad
    return AdaptedModel(base, adapters)
