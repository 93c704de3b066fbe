"""Dense float64 tensors with reverse-mode gradients, Adam, and a
finite-difference gradient checker.

The operation set is deliberately small: exactly what a GMF/MLP recommender
with a bilinear-attention encoder needs.  Everything is 64-bit; there is no
broadcasting beyond bias addition and no support for higher-order
derivatives.  A computation graph is recorded dynamically as operations are
applied and is confined to a single thread.

All randomness in the package flows through :func:`philox`, a splittable
counter-based generator keyed by a seed plus an arbitrary stream label, so
identical seeds reproduce identical runs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "elementwise_mul",
    "matmul",
    "matvec",
    "batch_matvec",
    "batch_vecmat",
    "transpose",
    "concat",
    "relu",
    "sigmoid",
    "softmax",
    "mean",
    "bce_loss",
    "backward",
    "AdamState",
    "adam_step",
    "grad_check",
    "philox",
]

# Predictions are clamped into [BCE_CLAMP, 1 - BCE_CLAMP] before the logs in
# the cross-entropy; the raw expression is undefined at 0 and 1.
BCE_CLAMP = 1e-12

_MASK64 = 0xFFFFFFFFFFFFFFFF
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fold_stream(parts: Iterable) -> int:
    """FNV-1a fold of stream labels (ints or strings) into one 64-bit word."""
    acc = _FNV_OFFSET
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
        else:
            data = int(part).to_bytes(8, "little", signed=True)
        for byte in data:
            acc = ((acc ^ byte) * _FNV_PRIME) & _MASK64
    return acc


def philox(seed: int, *stream) -> np.random.Generator:
    """Return a counter-based generator for ``(seed, stream...)``.

    Distinct stream labels give statistically independent streams, which is
    how stage/epoch/parameter seeds are split off one master seed.
    """
    key = np.array([int(seed) & _MASK64, _fold_stream(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    """Node in a dynamically recorded computation graph.

    ``data`` is always a float64 ndarray.  ``grad`` is populated by
    :func:`backward` with an array of the same shape.  Leaf tensors (inputs
    and parameters) have no parents; interior nodes carry a backward rule
    mapping the output gradient to gradients for each parent.
    """

    __slots__ = ("data", "grad", "parents", "_rule")

    def __init__(self, data, parents: tuple = (), rule: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._rule = rule

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, leaf={not self.parents})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_error(op: str, *shapes) -> ValueError:
    listed = " and ".join(str(tuple(s)) for s in shapes)
    return ValueError(f"{op}: incompatible shapes {listed}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    """Elementwise sum; the second operand may be a bias broadcast over rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), rule)


def elementwise_mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("elementwise_mul", a.shape, b.shape) from None

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, (a, b), rule)


def matmul(a, b) -> Tensor:
    """2-D matrix product ``(m, n) @ (n, p)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, (a, b), rule)


def matvec(a, x) -> Tensor:
    """Matrix-vector product ``(m, n) @ (n,) -> (m,)``."""
    a, x = _as_tensor(a), _as_tensor(x)
    if a.data.ndim != 2 or x.data.ndim != 1 or a.shape[1] != x.shape[0]:
        raise _shape_error("matvec", a.shape, x.shape)
    out = a.data @ x.data

    def rule(g):
        return np.outer(g, x.data), a.data.T @ g

    return Tensor(out, (a, x), rule)


def batch_matvec(m, v) -> Tensor:
    """Per-row matrix-vector product ``(B, k, s) @ (B, s) -> (B, k)``."""
    m, v = _as_tensor(m), _as_tensor(v)
    if (
        m.data.ndim != 3
        or v.data.ndim != 2
        or m.shape[0] != v.shape[0]
        or m.shape[2] != v.shape[1]
    ):
        raise _shape_error("batch_matvec", m.shape, v.shape)
    out = np.einsum("bks,bs->bk", m.data, v.data)

    def rule(g):
        gm = np.einsum("bk,bs->bks", g, v.data)
        gv = np.einsum("bk,bks->bs", g, m.data)
        return gm, gv

    return Tensor(out, (m, v), rule)


def batch_vecmat(v, m) -> Tensor:
    """Per-row vector-matrix product ``(B, k) @ (B, k, s) -> (B, s)``."""
    v, m = _as_tensor(v), _as_tensor(m)
    if (
        v.data.ndim != 2
        or m.data.ndim != 3
        or v.shape[0] != m.shape[0]
        or v.shape[1] != m.shape[1]
    ):
        raise _shape_error("batch_vecmat", v.shape, m.shape)
    out = np.einsum("bk,bks->bs", v.data, m.data)

    def rule(g):
        gv = np.einsum("bs,bks->bk", g, m.data)
        gm = np.einsum("bk,bs->bks", v.data, g)
        return gv, gm

    return Tensor(out, (v, m), rule)


def transpose(a) -> Tensor:
    """2-D transpose."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise _shape_error("transpose", a.shape)

    def rule(g):
        return (g.T,)

    return Tensor(a.data.T, (a,), rule)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``."""
    tensors = [_as_tensor(p) for p in parts]
    if not tensors:
        raise ValueError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *(t.shape for t in tensors)) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offsets[i] : offsets[i + 1]], 0, axis)
            for i in range(len(tensors))
        )

    return Tensor(out, tuple(tensors), rule)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def rule(g):
        return (g * (x.data > 0.0),)

    return Tensor(out, (x,), rule)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # Branch on sign for overflow-free evaluation at extreme logits.
    data = x.data
    out = np.empty_like(data)
    pos = data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-data[pos]))
    ex = np.exp(data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (x,), rule)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, (x,), rule)


def mean(x) -> Tensor:
    """Mean over all elements, producing a scalar node."""
    x = _as_tensor(x)
    out = x.data.mean()

    def rule(g):
        return (np.full_like(x.data, float(g) / x.data.size),)

    return Tensor(out, (x,), rule)


def bce_loss(pred, target) -> Tensor:
    """Mean binary cross-entropy of predictions against 0/1 targets.

    Predictions are clamped into ``[BCE_CLAMP, 1 - BCE_CLAMP]`` before the
    logs; gradients are zero where the clamp is active.
    """
    pred = _as_tensor(pred)
    y = np.asarray(target, dtype=np.float64)
    if pred.shape != y.shape:
        raise _shape_error("bce_loss", pred.shape, y.shape)
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean()
    active = (pred.data > BCE_CLAMP) & (pred.data < 1.0 - BCE_CLAMP)

    def rule(g):
        dp = (p - y) / (p * (1.0 - p)) / p.size
        return (float(g) * dp * active,)

    return Tensor(out, (pred,), rule)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into every reachable node.

    Any gradients left over from a previous traversal are cleared first, so
    leaf parameter tensors can be reused across training steps.
    """
    if loss.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones(())
    for node in reversed(order):
        if node._rule is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._rule(node.grad)):
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad += g


@dataclass
class AdamState:
    """Per-parameter Adam moments; shapes always equal the parameter's."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, **kwargs) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **kwargs)


def adam_step(
    param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns fresh arrays and state."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise _shape_error("adam_step", param.shape, grad.shape, state.m.shape)
    bad = np.size(grad) - np.count_nonzero(np.isfinite(grad))
    if bad:
        raise ValueError(f"adam_step: {bad} non-finite gradient entries, step aborted")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        m=m, v=v, step=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
    return new_param, new_state


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the given parameter tensors on every
    call.  Returns the worst relative error over all parameter entries:
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    backward(f())
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    for tensor, grads in zip(tensors, analytic):
        flat = tensor.data.reshape(-1)
        gflat = grads.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
