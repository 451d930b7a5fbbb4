"""Dense float64 arrays with reverse-mode automatic differentiation.

A :class:`Node` wraps a numpy array and records the operation that produced
it. :func:`backward` walks the recorded graph in reverse topological order and
accumulates gradients into every node that requires them.

Values are plain ``numpy.float64`` arrays. Matrices are 2-D, but every op also
accepts leading batch axes (numpy broadcasting rules), which is what the
transformer uses to process many windows at once.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Node",
    "as_node",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "exp",
    "log",
    "square",
    "gelu",
    "clip",
    "sum_all",
    "mean_all",
    "reshape",
    "transpose",
    "swap_last",
    "getitem",
    "softmax_rows",
    "layer_norm",
    "backward",
    "zero_grad",
    "finite_diff_check",
]


class Node:
    """A value in the computation graph.

    ``grad`` starts at zeros and is only ever written by :func:`backward`.
    Gradients accumulate across repeated ``backward`` calls until
    :func:`zero_grad` (or a fresh leaf) resets them.
    """

    __slots__ = ("value", "_grad", "requires_grad", "op", "parents", "_backward")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Node", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        self.value = value
        self._grad = None  # materialised on first access / accumulation
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Node":
        return swap_last(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def _make(value, op, parents, backward_fn) -> Node:
    # Only record the closure when some input needs a gradient.
    needs = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=needs, op=op, parents=parents if needs else (),
                backward_fn=backward_fn if needs else None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(node: Node, g: np.ndarray) -> None:
    if node.requires_grad:
        g = _unbroadcast(g, node.value.shape)
        if node._grad is None:
            node._grad = np.array(g, dtype=np.float64)  # copy; g may alias a live buffer
        else:
            node._grad += g


# ---------------------------------------------------------------- products


def matmul(a, b) -> Node:
    """Matrix product ``a @ b`` (batched over leading axes)."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    if bv.ndim == 2 and av.ndim > 2:
        # Batched input against one matrix: fold the batch into a single GEMM.
        a2 = av.reshape(-1, av.shape[-1])

        def _bw_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ bv.T).reshape(av.shape))
            if b.requires_grad:
                _accum(b, a2.T @ g2)

        out = (a2 @ bv).reshape(*av.shape[:-1], bv.shape[-1])
        return _make(out, "matmul", (a, b), _bw_folded)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(bv, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(av, -1, -2) @ g)

    return _make(av @ bv, "matmul", (a, b), _bw)


# ------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def _bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.value + b.value, "add", (a, b), _bw)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def _bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.value - b.value, "sub", (a, b), _bw)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * bv)
        if b.requires_grad:
            _accum(b, g * av)

    return _make(av * bv, "mul", (a, b), _bw)


def neg(a) -> Node:
    return scale(a, -1.0)


def scale(a, c: float) -> Node:
    """Multiply by a Python scalar (not part of the graph)."""
    a = as_node(a)
    c = float(c)

    def _bw(g):
        _accum(a, g * c)

    return _make(a.value * c, "scale", (a,), _bw)


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)

    def _bw(g):
        _accum(a, g * out)

    return _make(out, "exp", (a,), _bw)


def log(a) -> Node:
    a = as_node(a)
    av = a.value

    def _bw(g):
        _accum(a, g / av)

    return _make(np.log(av), "log", (a,), _bw)


def square(a) -> Node:
    a = as_node(a)
    av = a.value

    def _bw(g):
        _accum(a, 2.0 * g * av)

    return _make(av * av, "square", (a,), _bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Node:
    """tanh-approximated GELU; smooth everywhere, so finite differences behave."""
    a = as_node(a)
    x = a.value
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def _bw(g):
        dinner = x2 * (3 * 0.044715)
        dinner += 1.0
        dinner *= _GELU_C
        sech2 = 1.0 - t * t
        sech2 *= x
        sech2 *= dinner
        sech2 += 1.0 + t
        sech2 *= 0.5
        sech2 *= g
        _accum(a, sech2)

    return _make(out, "gelu", (a,), _bw)


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    a = as_node(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)

    def _bw(g):
        _accum(a, g * inside)

    return _make(np.clip(av, lo, hi), "clip", (a,), _bw)


# -------------------------------------------------------------- reductions


def sum_all(a) -> Node:
    a = as_node(a)
    shape = a.value.shape

    def _bw(g):
        _accum(a, np.broadcast_to(g.reshape(()), shape))

    return _make(np.array([[a.value.sum()]]), "sum", (a,), _bw)


def mean_all(a) -> Node:
    a = as_node(a)
    return scale(sum_all(a), 1.0 / a.value.size)


# ------------------------------------------------------------------ shapes


def reshape(a, shape: Sequence[int]) -> Node:
    a = as_node(a)
    old = a.value.shape

    def _bw(g):
        _accum(a, g.reshape(old))

    return _make(a.value.reshape(shape), "reshape", (a,), _bw)


def transpose(a, axes: Sequence[int]) -> Node:
    a = as_node(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _bw(g):
        _accum(a, np.transpose(g, inverse))

    return _make(np.transpose(a.value, axes), "transpose", (a,), _bw)


def swap_last(a) -> Node:
    a = as_node(a)

    def _bw(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.value, -1, -2), "swap_last", (a,), _bw)


def getitem(a, key) -> Node:
    """Basic (slice/integer) indexing; the backward scatters into zeros."""
    a = as_node(a)
    shape = a.value.shape

    def _bw(g):
        full = np.zeros(shape)
        full[key] = g
        _accum(a, full)

    return _make(a.value[key].copy(), "getitem", (a,), _bw)


# ------------------------------------------------------- transformer pieces


def softmax_rows(m, mask: np.ndarray | None = None) -> Node:
    """Softmax over the last axis, stabilised by subtracting the row max.

    ``mask`` (broadcastable boolean array) marks entries that are excluded:
    they receive probability exactly zero. Every row must keep at least one
    unmasked entry.
    """
    m = as_node(m)
    x = np.where(mask, -np.inf, m.value) if mask is not None else m.value.copy()
    x -= x.max(axis=-1, keepdims=True)
    s = np.exp(x, out=x)
    s /= s.sum(axis=-1, keepdims=True)

    def _bw(g):
        gs = g * s
        gs -= s * gs.sum(axis=-1, keepdims=True)
        _accum(m, gs)

    return _make(s, "softmax", (m,), _bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    """Normalise each row to zero mean / unit variance, then ``* gamma + beta``."""
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    width = x.shape[-1]
    if gamma.value.size != width or beta.value.size != width:
        raise DimensionError(
            f"layer_norm affine width mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    gv = gamma.value.reshape(width)
    bv = beta.value.reshape(width)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv

    def _bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, width).sum(axis=0).reshape(gamma.shape))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, width).sum(axis=0).reshape(beta.shape))
        if x.requires_grad:
            gx = g * gv
            _accum(x, inv * (
                gx - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            ))

    return _make(out, "layer_norm", (x, gamma, beta), _bw)


# ---------------------------------------------------------------- backward


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node upstream of ``loss`` that requires it.

    ``loss`` must hold a single value. Gradients are *added* to whatever is
    already stored, so calling this twice without :func:`zero_grad` doubles
    them; the training loop relies on this to accumulate over micro-batches.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    # Intermediate grads are scratch space for this pass only.
    for node in order:
        if node._backward is not None:
            node._grad = None
    _accum(loss, np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = np.zeros_like(n.value)


# --------------------------------------------------------- gradient oracle


def finite_diff_check(
    f: Callable[[Mapping[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    step: float = 1e-6,
    n_coords: int | None = 50,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` receives a name -> Node map built from ``params`` and must return a
    scalar node. ``n_coords`` coordinates are sampled uniformly over all
    parameter entries (``None`` checks every coordinate). Returns the largest
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if not 0.0 < step <= 1e-3:
        raise ContractError(f"finite-difference step must lie in (0, 1e-3], got {step}")
    names = list(params)
    arrays = {k: np.array(params[k], dtype=np.float64) for k in names}

    leaves = {k: Node(arrays[k], requires_grad=True) for k in names}
    loss = f(leaves)
    if not np.all(np.isfinite(loss.value)):
        raise NumericError("objective is not finite at the base point")
    backward(loss)
    analytic = {k: leaves[k].grad.copy() for k in names}

    sizes = [arrays[k].size for k in names]
    total = int(sum(sizes))
    offsets = np.cumsum([0] + sizes)
    if n_coords is None or n_coords >= total:
        flat_idx = np.arange(total)
    else:
        flat_idx = np.random.default_rng(seed).choice(total, size=n_coords, replace=False)

    def evaluate() -> float:
        out = f({k: Node(arrays[k]) for k in names}).value
        val = float(out.reshape(-1)[0])
        if not np.isfinite(val):
            raise NumericError("objective became non-finite during probing")
        return val

    worst = 0.0
    for fi in flat_idx:
        which = int(np.searchsorted(offsets, fi, side="right") - 1)
        name = names[which]
        local = int(fi - offsets[which])
        arr = arrays[name].reshape(-1)
        orig = arr[local]
        arr[local] = orig + step
        f_plus = evaluate()
        arr[local] = orig - step
        f_minus = evaluate()
        arr[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[name].reshape(-1)[local])
        rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        worst = max(worst, rel)
    return worst
