"""Float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside ``with Tape() as tape:`` are recorded and can be
differentiated with :func:`backward`.  Outside any tape nothing is recorded,
which is how evaluation and benchmarking run.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import DeterminismError, NumericError, ParameterError, RankError, ShapeError

MAX_RANK = 3
GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise RankError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Single-owner: do not share one tape between concurrent forward passes.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        self.records.clear()


def _current_tape() -> Tape | None:
    return Tape._active[-1] if Tape._active else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _emit(y, (a,), lambda g: (g * 0.5 / y,))


# ---------------------------------------------------------------------------
# shape manipulation


def matmul(a, b) -> Tensor:
    """Matrix product, batched over a leading axis when either side is rank 3."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim == 3:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(ad @ bd, (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _emit(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit(a.data[index], (a,), backward)


def take(a, indices) -> Tensor:
    """Gather rows of ``a`` (along axis 0) at integer ``indices`` of any shape."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def backward(g):
        flat = g.reshape(-1, *shape[1:])
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), flat)
        return (full,)

    return _emit(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


def sparse_matmul(op: sp.spmatrix, h) -> Tensor:
    """Left-multiply a dense rank-2 tensor by a constant sparse matrix."""
    h = as_tensor(h)
    if h.ndim != 2 or op.shape[1] != h.shape[0]:
        raise ShapeError(f"sparse_matmul: cannot multiply {op.shape} by {h.shape}")
    opT = op.T.tocsr()
    return _emit(np.asarray(op @ h.data), (h,), lambda g: (np.asarray(opT @ g),))


# ---------------------------------------------------------------------------
# activations


def tanh(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "tanh")
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "sigmoid")
    y = expit(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit(np.logaddexp(0.0, x), (a,), lambda g: (g * expit(x),))


def gelu(a) -> Tensor:
    """GeLU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    _check_finite(x, "gelu")
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _emit(y, (a,), backward)


def swish(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    _check_finite(x, "swish")
    s = expit(x)
    return _emit(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    z = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)
    return _emit(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def masked_softmax(a, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries get probability zero; fully masked rows are all zero.
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    _check_finite(a.data, "masked_softmax")
    x = np.where(mask, a.data, -np.inf)
    top = x.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    z = np.where(mask, np.exp(x - top), 0.0)
    total = z.sum(axis=-1, keepdims=True)
    y = z / np.where(total > 0, total, 1.0)
    return _emit(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _emit(y, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


ACTIVATIONS = {"gelu": gelu, "swish": swish, "tanh": tanh, "softmax_lastaxis": softmax}


def activation(kind: str, x) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# normalization


def _normalize(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return inv * (
        g_hat - g_hat.mean(axis=-1, keepdims=True) - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True)
    )


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x = as_tensor(x)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: empty normalization axis")
    if eps < 0:
        raise ParameterError("layer_norm: eps must be non-negative")
    gain = as_tensor(np.ones(d) if gain is None else gain)
    bias = as_tensor(np.zeros(d) if bias is None else bias)
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {d}")
    xhat, inv = _normalize(x.data, eps)
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        return (
            _normalize_backward(g * gd, xhat, inv),
            (g * xhat).sum(axis=lead),
            g.sum(axis=lead),
        )

    return _emit(xhat * gd + bias.data, (x, gain, bias), backward)


def group_norm(x, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize each contiguous block of ``d/groups`` channels per row, no affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    if groups < 1 or d % groups:
        raise ShapeError(f"group_norm: width {d} not divisible by {groups} groups")
    shape = x.shape
    grouped = x.data.reshape(*shape[:-1], groups, d // groups)
    xhat, inv = _normalize(grouped, eps)

    def backward(g):
        return (_normalize_backward(g.reshape(grouped.shape), xhat, inv).reshape(shape),)

    return _emit(xhat.reshape(shape), (x,), backward)


# ---------------------------------------------------------------------------
# pairwise rotation (complex multiplication on consecutive feature pairs)


def rotate_pairs(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (x[2j], x[2j+1]) by the angle with given cos/sin.

    ``cos``/``sin`` broadcast against ``x[..., ::2]``.
    """
    x = as_tensor(x)
    if x.shape[-1] % 2:
        raise ShapeError(f"rotate_pairs: last extent {x.shape[-1]} is odd")
    xd = x.data
    out = np.empty_like(xd)
    e, o = xd[..., 0::2], xd[..., 1::2]
    out[..., 0::2] = e * cos - o * sin
    out[..., 1::2] = e * sin + o * cos

    def backward(g):
        gx = np.empty_like(g)
        ge, go = g[..., 0::2], g[..., 1::2]
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (_unbroadcast(gx, xd.shape),)

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` on ``tape``."""
    if loss.data.ndim != 0:
        raise RankError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not tape.records or not any(r.out is loss for r in reversed(tape.records)):
        raise RankError("backward: loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    seen: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = inp
    for key, tensor in seen.items():
        tensor.grad = np.asarray(grads[key], dtype=np.float64).reshape(tensor.shape)


def grad_check_report(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> list[float]:
    """Per-tensor max relative error between analytic and central-difference grads.

    Relative error of one entry is |a - n| / max(1, |a|, |n|).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ParameterError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    first = f().item()
    if f().item() != first:
        raise DeterminismError("grad_check: closure is not deterministic")
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    errors = []
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        errors.append(worst)
    return errors


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error over all parameter entries (see grad_check_report)."""
    return max(grad_check_report(f, params, eps), default=0.0)
