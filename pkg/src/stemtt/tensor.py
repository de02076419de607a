"""Dense float32 tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy float32 array. Ops executed while a Tape
is active are recorded in order; Tape.backward walks the record in exact
reverse, accumulating gradients additively into ``.grad`` (fan-out sums).
Every op output is checked for NaN/Inf and raises on the spot. Broadcasting
is restricted to leading-dimension expansion (an operand whose shape is a
trailing suffix of the other's, or has size-1 leading axes).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "make_rng",
    "grad_check",
    "matmul",
    "concat",
    "index_select",
    "slice_axis",
    "pad_last",
    "unfold_last",
    "masked_softmax",
    "layer_norm",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "relu",
    "gelu",
    "mean",
    "sumall",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


# Stack of active tapes; ops record onto the innermost one.
_TAPES: list["Tape"] = []


def make_rng(seed: int, *tags: int) -> np.random.Generator:
    """Counter-based (Philox) generator; callers own and pass these explicitly."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags))))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if arr.size == 0:
        return
    # min+max is finite iff every element is (cheaper than isfinite().all()).
    probe = float(arr.min()) + float(arr.max())
    if not np.isfinite(probe):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Shape + row-major float32 data, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p):
        return _pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return _transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


class Tape:
    """Ordered op record; backward replays it in exact reverse order."""

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes closed out of order"

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate grads onto reachable inputs."""
        if loss.size != 1:
            raise ValueError("backward requires a scalar loss")
        loss._acc(np.ones_like(loss.data))
        for out, bw in reversed(self._ops):
            if out.grad is not None:
                bw(out.grad)


def _active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _make(data: np.ndarray, op: str, track: bool, bw: Optional[Callable[[np.ndarray], None]]) -> Tensor:
    if data.dtype != np.float32:
        data = data.astype(np.float32)
    _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if track and tape is not None and bw is not None:
        out.requires_grad = True
        tape._ops.append((out, bw))
    return out


def _track(*ts: Tensor) -> bool:
    return _active_tape() is not None and any(t.requires_grad for t in ts)


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    # allowed: identical; equal-rank with size-1 axes (keepdims stats); or the
    # lower-rank shape matching the other's trailing suffix dim-for-dim.
    if sa == sb:
        return True
    if len(sa) == len(sb):
        return all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    tail = big[len(big) - len(small):]
    return all(s == t or s == 1 for s, t in zip(small, tail))


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo leading-dimension expansion by summing over the expanded axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as_pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=np.float32))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=np.float32))
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"shapes {a.shape} and {b.shape} only broadcast by leading-dim expansion")
    return a, b


# -- arithmetic primitives --------------------------------------------------


def _add(a, b) -> Tensor:
    if isinstance(b, (int, float)) or (isinstance(b, np.ndarray) and b.ndim == 0):
        s = float(b)
        a = a if isinstance(a, Tensor) else Tensor(a)

        def bw(g, a=a):
            if a.requires_grad:
                a._acc(g)

        return _make(a.data + np.float32(s), "add", _track(a), bw)
    a, b = _as_pair(a, b)

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._acc(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._acc(_reduce_to(g, b.shape))

    return _make(a.data + b.data, "add", _track(a, b), bw)


def _sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _add(a, -float(b))
    if isinstance(a, (int, float)):
        return _add(_neg(b), float(a))
    a, b = _as_pair(a, b)

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._acc(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._acc(-_reduce_to(g, b.shape))

    return _make(a.data - b.data, "sub", _track(a, b), bw)


def _mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) or (isinstance(b, np.ndarray) and b.ndim == 0):
        s = float(b)
        a = a if isinstance(a, Tensor) else Tensor(a)

        def bw(g, a=a, s=s):
            if a.requires_grad:
                a._acc(g * np.float32(s))

        return _make(a.data * np.float32(s), "scale", _track(a), bw)
    a, b = _as_pair(a, b)

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._acc(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._acc(_reduce_to(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", _track(a, b), bw)


def _div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _mul(a, 1.0 / float(b))
    a, b = _as_pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / b.data

    def bw(g, a=a, b=b, inv=inv):
        if a.requires_grad:
            a._acc(_reduce_to(g * inv, a.shape))
        if b.requires_grad:
            b._acc(_reduce_to(-g * a.data * inv * inv, b.shape))

    return _make(a.data * inv, "div", _track(a, b), bw)


def _neg(a: Tensor) -> Tensor:
    def bw(g, a=a):
        if a.requires_grad:
            a._acc(-g)

    return _make(-a.data, "neg", _track(a), bw)


def _pow(a: Tensor, p) -> Tensor:
    p = float(p)

    def bw(g, a=a, p=p):
        if a.requires_grad:
            a._acc(g * p * a.data ** (p - 1.0))

    with np.errstate(invalid="ignore", divide="ignore"):
        y = a.data ** np.float32(p)
    return _make(y, "pow", _track(a), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bw(g, a=a, y=out_data):
        if a.requires_grad:
            a._acc(g * y)

    return _make(out_data, "exp", _track(a), bw)


def log(a: Tensor) -> Tensor:
    def bw(g, a=a):
        if a.requires_grad:
            a._acc(g / a.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _make(y, "log", _track(a), bw)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.data)

    def bw(g, a=a, y=y):
        if a.requires_grad:
            a._acc(g * (0.5 / y))

    return _make(y, "sqrt", _track(a), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g, a=a, y=y):
        if a.requires_grad:
            a._acc(g * (1.0 - y * y))

    return _make(y, "tanh", _track(a), bw)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def bw(g, a=a, pos=pos):
        if a.requires_grad:
            a._acc(g * pos)

    return _make(a.data * pos, "relu", _track(a), bw)


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + np.float32(0.044715) * x * x * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g, a=a, x=x, t=t):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + np.float32(3 * 0.044715) * x * x)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._acc(g * da)

    return _make(y, "gelu", _track(a), bw)


# -- shape primitives ---------------------------------------------------------


def _reshape(a: Tensor, shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape

    def bw(g, a=a, old=old):
        if a.requires_grad:
            a._acc(g.reshape(old))

    return _make(np.ascontiguousarray(a.data.reshape(shape)), "reshape", _track(a), bw)


def _transpose(a: Tensor, axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g, a=a, inv=inv):
        if a.requires_grad:
            a._acc(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), "transpose", _track(a), bw)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    shape = a.shape

    def bw(g, a=a, axis=axis, keepdims=keepdims, shape=shape):
        if not a.requires_grad:
            return
        if axis is None:
            a._acc(np.full(shape, g if np.ndim(g) == 0 else g.reshape(()), dtype=np.float32))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, shape).astype(np.float32, copy=True))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float32), "sum", _track(a), bw)


def sumall(a: Tensor) -> Tensor:
    return _sum(a, None, False)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return _mul(_sum(a, axis, keepdims), 1.0 / float(n))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; batch dims must match or one
    operand must be 2-D (shared weights), whose grad sums over the batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires >=2-D operands")
    if a.ndim != b.ndim and a.ndim != 2 and b.ndim != 2:
        raise ValueError(f"matmul batch ranks {a.shape} x {b.shape} unsupported")

    def bw(g, a=a, b=b):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ga.ndim > a.ndim:
                ga = ga.reshape((-1,) + a.shape).sum(axis=0)
            a._acc(ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.ndim > b.ndim:
                gb = gb.reshape((-1,) + b.shape).sum(axis=0)
            b._acc(gb)

    return _make(np.matmul(a.data, b.data), "matmul", _track(a, b), bw)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    sizes = [t.shape[axis] for t in ts]
    offs = np.cumsum([0] + sizes)

    def bw(g, ts=ts, offs=offs, axis=axis):
        for t, lo, hi in zip(ts, offs[:-1], offs[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                t._acc(np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", _track(*ts), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g, a=a, idx=idx):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=np.float32)
            full[idx] = g
            a._acc(full)

    return _make(np.ascontiguousarray(a.data[idx]), "slice", _track(a), bw)


def index_select(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; backward scatter-adds (supports repeats)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("indices must be 1-D")

    def bw(g, a=a, idx=idx, axis=axis):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=np.float32)
            if axis == 0:
                np.add.at(full, idx, g)
            else:
                mv = np.moveaxis(full, axis, 0)
                np.add.at(mv, idx, np.moveaxis(g, axis, 0))
            a._acc(full)

    return _make(np.ascontiguousarray(np.take(a.data, idx, axis=axis)), "index_select", _track(a), bw)


def pad_last(a: Tensor, left: int, right: int) -> Tensor:
    pads = [(0, 0)] * (a.ndim - 1) + [(left, right)]

    def bw(g, a=a, left=left):
        if a.requires_grad:
            idx = [slice(None)] * g.ndim
            idx[-1] = slice(left, left + a.shape[-1])
            a._acc(np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.pad(a.data, pads), "pad_last", _track(a), bw)


def unfold_last(a: Tensor, kernel: int, stride: int) -> Tensor:
    """[..., C, T] -> [..., T_out, C, kernel] sliding windows over the last axis."""
    *lead, c, t = a.shape
    if t < kernel:
        raise ValueError(f"length {t} shorter than kernel {kernel}")
    t_out = (t - kernel) // stride + 1
    x = a.data
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=tuple(lead) + (t_out, c, kernel),
        strides=s[:-2] + (s[-1] * stride, s[-2], s[-1]),
        writeable=False,
    )

    def bw(g, a=a, kernel=kernel, stride=stride, t_out=t_out):
        if not a.requires_grad:
            return
        full = np.zeros(a.shape, dtype=np.float32)
        for j in range(kernel):
            # tap j of every window maps back to input positions j, j+s, ...
            full[..., :, j : j + stride * (t_out - 1) + 1 : stride] += np.swapaxes(g[..., j], -1, -2)
        a._acc(full)

    return _make(np.ascontiguousarray(view), "unfold_last", _track(a), bw)


# -- neural primitives --------------------------------------------------------


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    if a.shape[-1] < 2:
        raise ValueError("layer_norm needs >=2 features on the last axis")
    x = a.data
    with np.errstate(invalid="ignore", over="ignore"):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + np.float32(eps))
        xhat = xc * inv

    def bw(g, a=a, xhat=xhat, inv=inv):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * xhat).mean(axis=-1, keepdims=True)
            a._acc(inv * (g - gm - xhat * gx))

    return _make(xhat, "layer_norm", _track(a), bw)


def masked_softmax(logits: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    """Softmax over the last axis with an additive {0, -inf} mask.

    Masked entries come out exactly 0. A fully masked row is an error.
    """
    z = logits.data if mask is None else logits.data + mask
    m = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("masked_softmax: a row is fully masked")
    p = np.exp(z - m)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g, logits=logits, p=p):
        if logits.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            logits._acc(p * (g - dot))

    return _make(p, "masked_softmax", _track(logits), bw)


# -- gradient checking --------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-2,
    coords: Optional[Iterable[tuple]] = None,
) -> float:
    """Max over coordinates of |autodiff - central difference| / max(1, |cd|).

    ``f`` must be a pure scalar-valued function of ``x``. ``coords`` restricts
    the check to a subset of flat indices (all coordinates by default).
    """
    was_grad = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
        if y.size != 1:
            raise ValueError("grad_check requires scalar-valued f")
        if not np.isfinite(y.data).all():
            raise NonFiniteError("f(x) is not finite")
        tape.backward(y)
    auto = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()
    x.zero_grad()
    x.requires_grad = was_grad

    flat = x.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        i = int(i)
        orig = flat[i]
        # power-of-two step: x +- h stays exactly representable for most x,
        # and the effective step below removes any residual representation error
        h = np.float32(2.0 ** round(np.log2(eps * max(1.0, abs(float(orig))))))
        hi = np.float32(orig + h)
        lo = np.float32(orig - h)
        flat[i] = hi
        y_hi = float(f(x).data.reshape(()))
        flat[i] = lo
        y_lo = float(f(x).data.reshape(()))
        flat[i] = orig
        fd = (y_hi - y_lo) / (float(hi) - float(lo))
        err = abs(float(auto[i]) - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
