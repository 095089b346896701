"""Reverse-mode differentiable ops on float64 numpy arrays, Adam, cosine schedule
and a finite-difference gradient checker.

Only the ops the embedder and its losses need are provided. Every op computes
its forward value eagerly and, while gradient recording is enabled, stores a
closure that accumulates gradients into its parents.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


class ShapeError(ValueError):
    """Operand shapes are not conformable."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread (evaluation)."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, name=name)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite result in {op}")


def _make(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = op
    t._parents = ()
    t._backward = None
    t.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axis1: int = -1, axis2: int = -2) -> Tensor:
    out = np.swapaxes(a.data, axis1, axis2)
    return _make(out, (a,), lambda g: (np.swapaxes(g, axis1, axis2),), "transpose")


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather rows along ``axis`` (integer array or slice)."""
    idx = [slice(None)] * a.ndim
    idx[axis] = index
    idx = tuple(idx)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "take")


def diagonal(a: Tensor) -> Tensor:
    """Diagonal of the last two (square) axes."""
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"diagonal: needs square trailing axes, got {a.shape}")
    n = a.shape[-1]
    out = np.array(np.diagonal(a.data, axis1=-2, axis2=-1), copy=True)

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., np.arange(n), np.arange(n)] = g
        return (full,)

    return _make(out, (a,), backward, "diagonal")


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),), "mean")
    n = a.shape[axis]
    out = a.data.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def abs_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum of absolute values (an L1 norm). Subgradient 0 at exactly 0."""
    out = np.abs(a.data).sum(axis=axis)
    sign = np.sign(a.data)

    def backward(g):
        if axis is None:
            return (sign * g,)
        return (sign * np.expand_dims(g, axis),)

    return _make(np.asarray(out), (a,), backward, "abs_sum")


# --------------------------------------------------------------------------
# nonlinearities and normalizations
# --------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out, (a,), backward, "gelu")


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return _make(out, (a, gamma, beta), backward, "layer_norm")


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm; zero slices are an error."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise NumericError("l2_normalize: zero-norm input")
    y = x / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (a,), backward, "l2_normalize")


def cross_entropy(logits: Tensor, labels: Sequence[int], reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels for a (N, C) logit matrix."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if (labels < 0).any() or (labels >= c).any():
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    per = logsum - z[np.arange(n), labels]
    if reduction == "mean":
        out, scale = per.mean(), 1.0 / n
    elif reduction == "sum":
        out, scale = per.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    p = np.exp(z - logsum[:, None])

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g * scale),)

    return _make(np.asarray(out), (logits,), backward, "cross_entropy")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product multi-head self-attention on (..., T, D) projections.

    ``q``, ``k`` and ``v`` are already projected; heads split the last axis.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q/k/v shapes differ {q.shape} {k.shape} {v.shape}")
    *lead, t, d = q.shape
    if d % heads:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    hd = d // heads
    scale = 1.0 / math.sqrt(hd)

    def split(x):  # (..., T, D) -> (..., H, T, hd)
        return np.swapaxes(x.reshape(*lead, t, heads, hd), -2, -3)

    def merge(x):  # (..., H, T, hd) -> (..., T, D)
        return np.swapaxes(x, -2, -3).reshape(*lead, t, d)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = np.matmul(qh, np.swapaxes(kh, -1, -2)) * scale
    w = _softmax_np(scores, -1)
    out = merge(np.matmul(w, vh))

    def backward(g):
        gh = split(g)
        gv = np.matmul(np.swapaxes(w, -1, -2), gh)
        gw = np.matmul(gh, np.swapaxes(vh, -1, -2))
        gs = w * (gw - (gw * w).sum(-1, keepdims=True)) * scale
        gq = np.matmul(gs, kh)
        gk = np.matmul(np.swapaxes(gs, -1, -2), qh)
        return merge(gq), merge(gk), merge(gv)

    return _make(out, (q, k, v), backward, "attention")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float) -> None:
    """One AdamW update in place: bias-corrected moments, decoupled weight decay."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for {p.name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.data)
            state.second_moment[p.name] = np.zeros_like(p.data)
        v = state.second_moment[p.name]
        if m.shape != p.data.shape:
            raise ShapeError(f"moment shape mismatch for {p.name!r}")
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    params = list(params)
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        s = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return total


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / denom


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``x.data`` (perturbed in place)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> dict[str, float]:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    Returns the relative error per input, keyed by name (or position).
    """
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = fn()
    out.backward()
    analytic = {i: (x.grad.copy() if x.grad is not None else np.zeros_like(x.data)) for i, x in enumerate(inputs)}
    errors = {}
    for i, x in enumerate(inputs):
        num = numerical_gradient(fn, x, h)
        errors[x.name or str(i)] = relative_error(analytic[i], num)
    return errors
