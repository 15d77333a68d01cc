"""Dense float32 tensors with reverse-mode differentiation on an explicit tape.

Forward values are stored as contiguous row-major float32 arrays. Gradients
are accumulated in float64 and exposed on ``Tensor.grad`` after a backward
pass. Operations record themselves on the innermost active ``Tape``; with no
tape active (inference) nothing is recorded and ops are plain numpy calls.

Broadcasting follows numpy's trailing-dimension rules. Incompatible shapes
raise ``ValueError`` naming both shapes.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "set_finite_checks",
    "custom_op",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "sigmoid",
    "silu",
    "softplus",
    "relu",
    "clamp",
    "matmul",
    "conv2d",
    "layer_norm",
    "softmax",
    "logsumexp",
    "sum_",
    "mean_",
    "max_",
    "reshape",
    "transpose",
    "flip",
    "concat",
    "take",
    "pad",
    "broadcast0",
    "upsample2x",
    "detach",
    "serialize",
    "deserialize",
]

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Globally toggle per-op output checks. Raises FloatingPointError on NaN/Inf."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A float32 array plus an optional float64 gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def numpy(self) -> np.ndarray:
        """A copy of the forward value."""
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar ---------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _basic_slice(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self) -> "Tensor":
        return detach(self)


def _scalar_err(t: Tensor):
    raise ValueError(f"item() expects a single-element tensor, got shape {t.shape}")


# -- tape ------------------------------------------------------------------

class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)``. The record list is cleared once the backward pass
    finishes, so one tape serves one training step.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Walk the record in reverse and populate ``grad`` on every
        requires_grad tensor that fed the loss (float64 buffers)."""
        if loss.data.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        # id -> (tensor ref, accumulated float64 grad); tensor ref keeps the
        # id stable while the entry lives.
        pending: dict[int, list] = {
            id(loss): [loss, np.ones(loss.data.shape, dtype=np.float64)]
        }
        for rec in reversed(self._records):
            entry = pending.pop(id(rec.output), None)
            if entry is None:
                continue  # did not feed the loss
            grads = rec.backward_fn(entry[1])
            for t, g in zip(rec.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.data.shape:
                    g = np.reshape(g, t.data.shape)
                slot = pending.get(id(t))
                if slot is None:
                    pending[id(t)] = [t, np.array(g, dtype=np.float64, copy=True)]
                else:
                    slot[1] += g
        for t, g in pending.values():
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
        self._records.clear()


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run reverse-mode accumulation from a scalar loss on the active tape."""
    if tape is None:
        if not _TAPES:
            raise RuntimeError("backward() called with no active tape")
        tape = _TAPES[-1]
    tape.backward(loss)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _check_finite(data: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _make(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append(_Record(inputs, out, backward_fn))
    return out


def custom_op(
    name: str,
    inputs: tuple[Tensor, ...],
    data: np.ndarray,
    backward_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Register a fused op on the active tape.

    ``backward_fn`` receives the float64 output gradient and must return one
    gradient (or None) per input, in order.
    """
    return _make(name, inputs, data, backward_fn)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the dimensions that broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", (a, b), a.data + b.data, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", (a, b), a.data - b.data, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", (a, b), ad * bd, bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g, out=out):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make("div", (a, b), out, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (-g,)

    return _make("neg", (a,), -a.data, bwd)


# -- elementwise unary -------------------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g, out=out):
        return (g * out,)

    return _make("exp", (a,), out, bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _make("log", (a,), np.log(ad), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g, out=out):
        return (g * 0.5 / out,)

    return _make("sqrt", (a,), out, bwd)


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g * 2.0 * ad,)

    return _make("square", (a,), ad * ad, bwd)


def _expit(x: np.ndarray) -> np.ndarray:
    # overflow-free logistic; both branches evaluate exp(-|x|) <= 1
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _expit(a.data)

    def bwd(g, s=s):
        return (g * s * (1.0 - s),)

    return _make("sigmoid", (a,), s, bwd)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    ad = a.data
    s = _expit(ad)

    def bwd(g, s=s):
        return (g * s * (1.0 + ad * (1.0 - s)),)

    return _make("silu", (a,), ad * s, bwd)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = _as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(np.float32)

    def bwd(g):
        return (g * _expit(ad),)

    return _make("softplus", (a,), out, bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g * (ad > 0),)

    return _make("relu", (a,), np.maximum(ad, 0.0), bwd)


def clamp(a, lo: float, hi: float, passthrough: bool = False) -> Tensor:
    """Clip to [lo, hi]; gradient passes through inside the closed interval.

    ``passthrough`` forwards the gradient on saturated entries too. A final
    output clamp with masked gradients turns full saturation into an absorbing
    state (no pixel inside the range means no gradient anywhere); training
    heads clamp with passthrough so the pull back into range survives.
    """
    a = _as_tensor(a)
    ad = a.data
    if passthrough:
        bwd = lambda g: (g,)
    else:
        mask = (ad >= lo) & (ad <= hi)

        def bwd(g, mask=mask):
            return (g * mask,)

    return _make("clamp", (a,), np.clip(ad, lo, hi), bwd)


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "square": square,
    "sigmoid": sigmoid, "silu": silu, "softplus": softplus, "relu": relu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (binary kinds require ``b``)."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"elementwise '{kind}' needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"elementwise '{kind}' takes one operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind '{kind}'")


# -- contractions ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make("matmul", (a, b), out, bwd)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, w, bias=None, stride=1, padding=0, depthwise: bool = False) -> Tensor:
    """2-D cross-correlation over NCHW input.

    Args:
        x: input of shape (B, C, H, W).
        w: weights (O, C, kh, kw), or (C, kh, kw) when ``depthwise``.
        bias: optional (O,) (or (C,) depthwise).
        stride, padding: int or (row, col) pair; zero padding.
        depthwise: one filter per channel, no channel mixing.

    Output spatial size is ((H + 2p - k) // s) + 1 per dim. Raises
    ValueError when the kernel exceeds the padded input.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    b = _as_tensor(bias) if bias is not None else None
    xd, wd = x.data, w.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d input must be (B, C, H, W), got {xd.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = xd.shape
    if depthwise:
        if wd.ndim != 3 or wd.shape[0] != C:
            raise ValueError(f"depthwise weights must be ({C}, kh, kw), got {wd.shape}")
        kh, kw = wd.shape[1:]
    else:
        if wd.ndim != 4 or wd.shape[1] != C:
            raise ValueError(f"weights must be (O, {C}, kh, kw), got {wd.shape}")
        kh, kw = wd.shape[2:]
    OH = (H + 2 * ph - kh) // sh + 1
    OW = (W + 2 * pw - kw) // sw + 1
    if OH < 1 or OW < 1:
        raise ValueError(
            f"kernel ({kh}x{kw}) larger than padded input ({H + 2 * ph}x{W + 2 * pw})"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd

    # tap loop: one GEMM (or broadcast multiply) per kernel offset keeps peak
    # memory at one (B, C, OH, OW) block instead of a full im2col buffer
    if depthwise:
        out = np.zeros((B, C, OH, OW), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + sh * OH : sh, j : j + sw * OW : sw]
                out += patch * wd[None, :, i, j, None, None]
        if b is not None:
            out += b.data[:, None, None]
    else:
        O = wd.shape[0]
        acc = np.zeros((B, OH, OW, O), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + sh * OH : sh, j : j + sw * OW : sw]
                acc += np.tensordot(patch, wd[:, :, i, j], axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
        if b is not None:
            out += b.data[:, None, None]

    def bwd(g):
        need_x = x.requires_grad
        dxp = np.zeros(xp.shape, dtype=np.float64) if need_x else None
        if depthwise:
            dw = np.zeros(wd.shape, dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + sh * OH : sh, j : j + sw * OW : sw]
                    dw[:, i, j] = np.einsum("bcuv,bcuv->c", g, patch)
                    if need_x:
                        dxp[:, :, i : i + sh * OH : sh, j : j + sw * OW : sw] += (
                            g * wd[None, :, i, j, None, None]
                        )
            gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        else:
            dw = np.zeros(wd.shape, dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + sh * OH : sh, j : j + sw * OW : sw]
                    dw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                    if need_x:
                        dtap = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))
                        dxp[:, :, i : i + sh * OH : sh, j : j + sw * OW : sw] += (
                            dtap.transpose(0, 3, 1, 2)
                        )
            gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        dx = None
        if need_x:
            dx = dxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else dxp
        if b is not None:
            return dx, dw, gb
        return dx, dw

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", inputs, out, bwd)


# -- fused normalizations ------------------------------------------------------

def layer_norm(a, axes, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance over ``axes`` (no affine part).

    Population variance; raises on an empty normalization slice.
    """
    a = _as_tensor(a)
    ad = a.data
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ad.ndim for ax in axes)
    m = 1
    for ax in axes:
        m *= ad.shape[ax]
    if m == 0:
        raise ValueError(f"layer_norm over an empty slice: shape {ad.shape}, axes {axes}")
    mu = ad.mean(axis=axes, keepdims=True)
    var = ad.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (ad - mu) * inv

    def bwd(g, xhat=xhat, inv=inv):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return ((g - gm - xhat * gx) * inv,)

    return _make("layer_norm", (a,), xhat, bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    z = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, s=s):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make("softmax", (a,), s, bwd)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    out_k = m + np.log(np.exp(ad - m).sum(axis=axis, keepdims=True))
    sm = np.exp(ad - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bwd(g, sm=sm):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * sm,)

    return _make("logsumexp", (a,), out, bwd)


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    axes = _norm_axis(axis, ad.ndim)

    def bwd(g):
        return (_expand_reduced(g, ad.shape, axes, keepdims),)

    return _make("sum", (a,), ad.sum(axis=axes, keepdims=keepdims), bwd)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    axes = _norm_axis(axis, ad.ndim)
    count = ad.size if axes is None else int(np.prod([ad.shape[ax] for ax in axes]))

    def bwd(g):
        return (_expand_reduced(g, ad.shape, axes, keepdims) / count,)

    return _make("mean", (a,), ad.mean(axis=axes, keepdims=keepdims), bwd)


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties share the incoming gradient equally."""
    a = _as_tensor(a)
    ad = a.data
    axes = _norm_axis(axis, ad.ndim)
    out = ad.max(axis=axes, keepdims=keepdims)
    full = ad.max(axis=axes, keepdims=True)
    mask = (ad == full)
    cnt = mask.sum(axis=axes, keepdims=True)

    def bwd(g, mask=mask, cnt=cnt):
        return (_expand_reduced(g, ad.shape, axes, keepdims) * mask / cnt,)

    return _make("max", (a,), out, bwd)


# -- shape surgery ---------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(ad.shape),)

    return _make("reshape", (a,), ad.reshape(shape), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)), bwd)


def flip(a, axis: int) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (np.flip(g, axis),)

    return _make("flip", (a,), np.ascontiguousarray(np.flip(a.data, axis)), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    ax = axis % ts[0].data.ndim
    sizes = [t.data.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", tuple(ts), np.concatenate([t.data for t in ts], axis=ax), bwd)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array (repeats allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    ad = a.data
    ax = axis % ad.ndim

    def bwd(g):
        ga = np.zeros(ad.shape, dtype=np.float64)
        np.add.at(np.moveaxis(ga, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (ga,)

    return _make("take", (a,), np.take(ad, idx, axis=ax), bwd)


def _basic_slice(a: Tensor, key) -> Tensor:
    ad = a.data
    out = ad[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=np.float32)

    def bwd(g):
        ga = np.zeros(ad.shape, dtype=np.float64)
        ga[key] += g
        return (ga,)

    return _make("slice", (a,), np.ascontiguousarray(out), bwd)


def pad(a, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` is a per-dimension sequence of (before, after)."""
    a = _as_tensor(a)
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    ad = a.data
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, ad.shape))

    def bwd(g):
        return (g[crop],)

    return _make("pad", (a,), np.pad(ad, pw), bwd)


def broadcast0(a, n: int) -> Tensor:
    """Prepend a new leading axis of length n by repetition."""
    a = _as_tensor(a)
    ad = a.data
    out = np.ascontiguousarray(np.broadcast_to(ad[None], (n,) + ad.shape))

    def bwd(g):
        return (g.sum(axis=0),)

    return _make("broadcast0", (a,), out, bwd)


def upsample2x(a) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (B, C, H, W) tensor."""
    a = _as_tensor(a)
    ad = a.data
    if ad.ndim != 4:
        raise ValueError(f"upsample2x expects (B, C, H, W), got {ad.shape}")
    B, C, H, W = ad.shape
    out = np.repeat(np.repeat(ad, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make("upsample2x", (a,), out, bwd)


def detach(a) -> Tensor:
    """A view of the value cut off from the tape."""
    a = _as_tensor(a)
    return Tensor(a.data)


# -- serialization ----------------------------------------------------------------

_TENSOR_MAGIC = b"LMTN"


def _write_tensor_payload(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    fh.write(_TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4").tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor stream")
    return buf


def _read_tensor_payload(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != _TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    rank = struct.unpack("<I", _read_exact(fh, 4))[0]
    if rank > 32:
        raise ValueError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return data.copy()  # own the buffer, keep 0-d shape


def serialize(t: Tensor | np.ndarray, path) -> None:
    """Write to the binary tensor format: magic, u32 rank, u32 extents, f32 payload."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
    with open(path, "wb") as fh:
        _write_tensor_payload(fh, arr)


def deserialize(path) -> Tensor:
    """Read a tensor written by :func:`serialize` (round-trips bit-exactly)."""
    with open(path, "rb") as fh:
        arr = _read_tensor_payload(fh)
        if fh.read(1):
            raise ValueError("trailing bytes after tensor payload")
    return Tensor(arr)
