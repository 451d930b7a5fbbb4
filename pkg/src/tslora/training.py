"""Gaussian NLL, Adam, and the pretrain / full fine-tune / LoRA fine-tune driver."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numerics as nx
from .data import Dataset, WindowedSample
from .errors import ConfigError, DataError, NumericError
from .lora import AdaptedModel, save_adapters, trainable_param_count
from .model import Forecaster, save_checkpoint
from .numerics import Node

log = logging.getLogger(__name__)

MODES = ("pretrain", "full_ft", "lora_ft")
DEFAULT_LR = {"pretrain": 1e-3, "full_ft": 5e-5, "lora_ft": 1e-3}
LR_RANGE = (5e-5, 1e-3)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class TrainConfig:
    mode: str = "lora_ft"
    learning_rate: float | None = None  # None -> DEFAULT_LR[mode]
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int | None = 5
    clip_norm: float | None = 1.0
    max_steps: int | None = None
    micro_batch: int = 4  # windows per forward/backward; bounds peak memory only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}", flag="mode")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.mode]
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}", flag="lr")
        if not LR_RANGE[0] <= self.learning_rate <= LR_RANGE[1]:
            log.warning("learning rate %g is outside [%g, %g]", self.learning_rate, *LR_RANGE)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", flag="epochs")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}", flag="batch_size")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0", flag="max_steps")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    trainable_params: int = 0
    steps: int = 0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for i, (tr, va, sec) in enumerate(zip(self.train_loss, self.val_loss, self.seconds)):
                w.writerow([i + 1, repr(tr), repr(va), f"{sec:.3f}"])


# ------------------------------------------------------------------- loss


def gaussian_nll(mean, log_std, target) -> Node:
    """Mean over steps of ``0.5*log(2*pi*sigma^2) + (x - mu)^2 / (2*sigma^2)``."""
    mean, log_std = nx.as_node(mean), nx.as_node(log_std)
    target = np.asarray(target, dtype=np.float64).reshape(mean.shape)
    if mean.shape != log_std.shape:
        raise ConfigError(f"mean {mean.shape} and log_std {log_std.shape} differ in shape")
    for name, arr in (("mean", mean.value), ("log_std", log_std.value), ("target", target)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"gaussian_nll: non-finite {name}")
    z = nx.mul(nx.sub(nx.constant(target), mean), nx.exp(nx.neg(log_std)))
    per_step = nx.add(log_std, nx.scale(nx.square(z), 0.5))
    return nx.add(nx.mean_all(per_step), HALF_LOG_2PI)


# ------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------- batches


def teacher_forcing_pairs(samples: Sequence[WindowedSample], C: int) -> tuple[np.ndarray, np.ndarray]:
    """Every horizon step as (ground-truth rolling context of length C, next value)."""
    ctxs, targets = [], []
    for s in samples:
        full = s.full
        h = s.horizon.size
        ctxs.append(sliding_window_view(full, C)[:h])
        targets.append(full[C:C + h])
    return np.concatenate(ctxs), np.concatenate(targets)


def batch_loss(model, leaves: Mapping[str, Node], samples: Sequence[WindowedSample],
               micro_batch: int = 4, with_grad: bool = True) -> float:
    """Mean NLL over all horizon steps of ``samples``.

    With ``with_grad`` the gradients are accumulated into ``leaves``, one
    micro-batch at a time, already weighted so they sum to the gradient of
    the full-batch mean.
    """
    C = model.config.context_length
    total_steps = sum(s.horizon.size for s in samples)
    value = 0.0
    for start in range(0, len(samples), micro_batch):
        chunk = samples[start:start + micro_batch]
        ctx, target = teacher_forcing_pairs(chunk, C)
        mean, log_std = model.step(leaves, ctx)
        loss = gaussian_nll(mean, log_std, target)
        weight = target.size / total_steps
        if with_grad:
            nx.backward(nx.scale(loss, weight))
        value += weight * float(loss.value.reshape(-1)[0])
    return value


def dataset_loss(model, samples: Sequence[WindowedSample], micro_batch: int = 8) -> float:
    if not samples:
        return float("nan")
    return batch_loss(model, model.leaves(False), samples, micro_batch, with_grad=False)


# ------------------------------------------------------------------ driver


def _check_mode(model, mode: str) -> None:
    if mode == "lora_ft" and not isinstance(model, AdaptedModel):
        raise ConfigError("mode lora_ft needs a model with LoRA adapters injected", flag="mode")
    if mode in ("pretrain", "full_ft") and not isinstance(model, Forecaster):
        raise ConfigError(f"mode {mode} needs a plain forecaster, got {type(model).__name__}",
                          flag="mode")


def train_loop(model, dataset: Dataset, config: TrainConfig,
               checkpoint_path: str | Path | None = None) -> TrainHistory:
    """Minibatch Adam on teacher-forced next-step NLL.

    ``model.trainable_params()`` decides what moves: every parameter for a
    :class:`Forecaster`, only the adapter matrices for an
    :class:`AdaptedModel`. When a validation split exists, the parameters
    from the best validation epoch are restored at the end (and written to
    ``checkpoint_path`` if given).
    """
    _check_mode(model, config.mode)
    if not dataset.train:
        raise DataError("training split is empty")
    params = model.trainable_params()
    mode_key = "lora" if config.mode == "lora_ft" else "full"
    history = TrainHistory(trainable_params=trainable_param_count(model, mode_key))
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    train = list(dataset.train)
    best_val = math.inf
    best_params = {k: v.copy() for k, v in params.items()}
    stale = 0

    for epoch in range(config.epochs):
        if config.max_steps is not None and history.steps >= config.max_steps:
            break
        started = time.perf_counter()
        order = rng.permutation(len(train))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            if config.max_steps is not None and history.steps >= config.max_steps:
                break
            batch = [train[i] for i in order[start:start + config.batch_size]]
            leaves = model.leaves(trainable=True)
            loss = batch_loss(model, leaves, batch, config.micro_batch)
            grads = {k: leaves[k].grad for k in params}
            if config.clip_norm is not None:
                clip_global_norm(grads, config.clip_norm)
            adam_step(params, grads, state, config.learning_rate,
                      config.beta1, config.beta2, config.eps)
            history.steps += 1
            losses.append(loss)
            weights.append(len(batch))
        train_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        val_loss = dataset_loss(model, dataset.val)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.seconds.append(time.perf_counter() - started)
        log.info("%s epoch %d: train %.5f val %.5f", config.mode, epoch + 1, train_loss, val_loss)

        score = val_loss if dataset.val else train_loss
        if score < best_val:
            best_val = score
            history.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                log.info("early stop after epoch %d", epoch + 1)
                break

    if dataset.val and history.best_epoch >= 0:
        for k, v in best_params.items():
            params[k][...] = v
    if checkpoint_path is not None:
        if isinstance(model, AdaptedModel):
            save_adapters(model, checkpoint_path)
        else:
            save_checkpoint(model, checkpoint_path)
    return history
