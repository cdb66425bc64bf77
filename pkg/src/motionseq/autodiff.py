"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When recording is enabled and at
least one input requires a gradient, the result keeps references to its inputs
and a closure mapping the output gradient to one gradient per input. Calling
:func:`backward` linearises that graph into a tape (inputs always precede the
operations that consume them) and replays it in reverse.

There is no global tape: each loss owns the graph hanging off it, so disjoint
graphs can be differentiated from different threads.
"""

from __future__ import annotations

import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> list[Tensor]:
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _result(value: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    b = _const(b)
    return _const(a, b), b


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _result(out, (a,), bw)


# shape and reduction ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either a plain ``(k, n)`` matrix shared
    across the leading axes or ``(..., k, n)`` with the same leading axes as ``a``.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need at least 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ, {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _result(out, (a,), bw)


def gather(weight: Tensor, indices) -> Tensor:
    """Row lookup ``weight[indices]`` for a 2-d ``weight``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"gather: index out of range for {weight.shape[0]} rows")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[idx], (weight,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def straight_through(source: Tensor, values: np.ndarray) -> Tensor:
    """Forward ``values``; backward passes the gradient to ``source`` unchanged."""
    values = np.asarray(values, dtype=source.dtype)
    if values.shape != source.shape:
        raise ShapeError(f"straight_through: {source.shape} vs {values.shape}")
    return _result(values.copy(), (source,), lambda g: (g,))


# normalisation and attention pieces -------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction. Entries at ``-inf`` get exactly zero weight.

    A slice that is entirely ``-inf`` yields zeros and a warning.
    """
    m = x.data.max(axis=axis, keepdims=True)
    dead = np.isneginf(m)
    if dead.any():
        warnings.warn("softmax: fully masked row mapped to zeros", RuntimeWarning, stacklevel=2)
        m = np.where(dead, 0.0, m)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s == 0, 1.0, s)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: feature size {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _result(out, (x, gain, bias), bw)


def l2_normalize(a: Tensor, floor: float = 1e-8) -> Tensor:
    """Divide each last-axis row by its L2 norm; rows with norm below ``floor`` become 0."""
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    small = n < floor
    safe = np.where(small, 1.0, n)
    out = np.where(small, 0.0, a.data / safe)

    def bw(g):
        gx = (g - out * (g * out).sum(axis=-1, keepdims=True)) / safe
        return (np.where(small, 0.0, gx),)

    return _result(out, (a,), bw)


# losses -----------------------------------------------------------------------


def huber(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean Huber loss over all elements."""
    if delta <= 0:
        raise ValueError("huber: delta must be positive")
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"huber: prediction {pred.shape} vs target {target.shape}")
    e = pred.data - target.data
    ae = np.abs(e)
    quad = ae <= delta
    out = np.where(quad, 0.5 * e * e, delta * (ae - 0.5 * delta)).mean()
    n = e.size

    def bw(g):
        ge = g * np.where(quad, e, delta * np.sign(e)) / n
        return ge, -ge

    return _result(np.asarray(out, dtype=pred.dtype), (pred, target), bw)


def mse(a: Tensor, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    e = a.data - b.data
    n = e.size

    def bw(g):
        ge = g * 2.0 * e / n
        return ge, -ge

    return _result(np.asarray((e * e).mean(), dtype=a.dtype), (a, b), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    v = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    flat = logits.data.reshape(-1, v)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {flat.shape[0]} logit rows vs {t.shape[0]} targets")
    bad = np.flatnonzero((t < 0) | (t >= v))
    if bad.size:
        raise IndexError(f"cross_entropy: target {t[bad[0]]} at position {bad[0]} outside [0, {v})")
    m = flat.max(axis=1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(t.shape[0])
    out = -logp[rows, t].mean()
    n = t.shape[0]

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _result(np.asarray(out, dtype=logits.dtype), (logits,), bw)


# backward ---------------------------------------------------------------------


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of recorded tensors reachable from ``loss``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` on every tensor on the tape of ``loss``.

    Gradients from multiple uses within one graph are summed. Each call
    overwrites ``.grad`` rather than accumulating across calls. Returns the tape.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor that requires grad")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = np.asarray(g, dtype=node.dtype)
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(node.grad)):
            if not p.requires_grad or pg is None:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
    return tape


# gradient checking ------------------------------------------------------------


def _rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if scale <= 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn: Callable[..., Tensor], *arrays: np.ndarray, eps: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps float64 tensors (one per array) to a scalar tensor. The relative
    error per input is ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)``
    in the Frobenius norm.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*inputs))
    worst = 0.0
    for k, x in enumerate(arrays):
        num = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = old - eps
            lo = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = old
            num.reshape(-1)[i] = (hi - lo) / (2 * eps)
        worst = max(worst, _rel_error(inputs[k].grad, num))
    return worst


def directional_gradcheck(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    rng: np.random.Generator,
    eps: float = 1e-5,
    n_entries: int = 2,
    floor: float = 1e-5,
) -> dict[str, float]:
    """Check model gradients without perturbing every scalar.

    For each parameter tensor compares the directional derivative along a random
    unit direction, plus ``n_entries`` randomly chosen single entries, against
    central differences. Errors are relative to ``max(|analytic|, |numeric|, floor)``
    so entries with a near-zero gradient are judged on an absolute scale (key
    biases, for instance, have an exactly zero gradient and only show the
    ~1e-11 rounding noise of the difference quotient).
    Returns the worst relative error per parameter.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def fd(p: Tensor, direction: np.ndarray) -> float:
        base = p.data.copy()
        p.data = base + eps * direction
        with no_grad():
            hi = loss_fn().item()
        p.data = base - eps * direction
        with no_grad():
            lo = loss_fn().item()
        p.data = base
        return (hi - lo) / (2 * eps)

    out = {}
    for name, p in params.items():
        g = analytic[name]
        d = rng.standard_normal(p.shape)
        d /= np.linalg.norm(d)
        errs = [_rel_error(np.array([np.sum(g * d)]), np.array([fd(p, d)]), floor)]
        for i in rng.choice(p.size, size=min(n_entries, p.size), replace=False):
            e = np.zeros(p.size)
            e[i] = 1.0
            e = e.reshape(p.shape)
            errs.append(_rel_error(np.array([g.reshape(-1)[i]]), np.array([fd(p, e)]), floor))
        out[name] = max(errs)
    return out
