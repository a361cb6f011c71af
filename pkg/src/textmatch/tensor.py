"""Dense float tensors with reverse-mode differentiation on an explicit tape.

All kernels are numpy-backed and CPU-only. A forward pass records one tape
entry per op; replaying the tape in reverse accumulates gradients into every
tensor that requires them. Recording only happens inside an active ``Tape``
context, so plain inference builds no graph and pays no bookkeeping cost.

Tensors are immutable once produced by an op, except for the ``grad`` buffer.
Every op validates that its output is finite and raises instead of letting
NaN/Inf propagate silently.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class MaskError(ValueError):
    """A reduction saw a row with no valid (unmasked) positions."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], list]


class Tape:
    """Ordered record of ops; replayed backward by :func:`backward`."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.records)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(op: str, inputs: Sequence, out_data: np.ndarray, vjp) -> Tensor:
    """Wrap an op result, registering it on the active tape when needed.

    ``vjp`` maps the output adjoint to ``[(input_tensor, adjoint), ...]``
    pairs; entries for non-Tensor inputs are ignored by the driver.
    """
    _check_finite(out_data, op)
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs and tape is not None
    out.grad = None
    if out.requires_grad:
        tape.records.append(TapeRecord(op, tuple(inputs), out, vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Adjoints are computed in a scratch map and added into ``grad`` at the
    end, so repeated calls over the same tape accumulate additively.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = adjoints.get(id(rec.output))
        if g is None:
            continue
        for t, gt in rec.vjp(g):
            if not (isinstance(t, Tensor) and t.requires_grad):
                continue
            key = id(t)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gt
            else:
                adjoints[key] = gt
                holders[key] = t
    for key, t in holders.items():
        g = adjoints[key]
        t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad + bd

    def vjp(g):
        return [(a, _unbroadcast(g, ad.shape)), (b, _unbroadcast(g, bd.shape))]

    return record_op("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad - bd

    def vjp(g):
        return [(a, _unbroadcast(g, ad.shape)), (b, _unbroadcast(-g, bd.shape))]

    return record_op("sub", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad * bd

    def vjp(g):
        return [(a, _unbroadcast(g * bd, ad.shape)), (b, _unbroadcast(g * ad, bd.shape))]

    return record_op("mul", (a, b), out, vjp)


def neg(a) -> Tensor:
    ad = _data(a)

    def vjp(g):
        return [(a, -g)]

    return record_op("neg", (a,), -ad, vjp)


def abs_(a) -> Tensor:
    ad = _data(a)
    sign = np.sign(ad)

    def vjp(g):
        return [(a, g * sign)]

    return record_op("abs", (a,), np.abs(ad), vjp)


def sum_(a) -> Tensor:
    """Sum every element into a scalar."""
    ad = _data(a)

    def vjp(g):
        return [(a, np.broadcast_to(g, ad.shape).copy())]

    return record_op("sum", (a,), np.asarray(ad.sum(), dtype=ad.dtype), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {ad.shape} vs {bd.shape}")
    out = ad @ bd

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return [(a, ga), (b, gb)]

    return record_op("matmul", (a, b), out, vjp)


def swap_last2(a) -> Tensor:
    ad = _data(a)

    def vjp(g):
        return [(a, np.swapaxes(g, -1, -2))]

    return record_op("swap_last2", (a,), np.swapaxes(ad, -1, -2), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    datas = [_data(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, cuts, axis=axis)
        return list(zip(tensors, pieces))

    return record_op("concat", tuple(tensors), out, vjp)


# ---------------------------------------------------------------------------
# neural kernels
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """x * Phi(x) with Phi the standard normal CDF (exact erf form)."""
    xd = _data(x)
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return [(x, g * (cdf + xd * pdf))]

    return record_op("gelu", (x,), out, vjp)


def dropout(x, keep_prob: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept elements are scaled by 1/keep_prob."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x if isinstance(x, Tensor) else Tensor(x)
    xd = _data(x)
    mask = (rng.random(xd.shape) < keep_prob).astype(xd.dtype) / np.asarray(keep_prob, dtype=xd.dtype)
    out = xd * mask

    def vjp(g):
        return [(x, g * mask)]

    return record_op("dropout", (x,), out, vjp)


def softmax_masked(scores, mask) -> Tensor:
    """Row softmax over the last axis with masked positions pinned to 0.

    Masking is additive (-1e9 before normalization) followed by exact
    zeroing; rows are stabilized by max subtraction. A fully masked row is
    an error: it means an empty sequence reached the alignment step.
    """
    sd = _data(scores)
    m = np.broadcast_to(np.asarray(_data(mask), dtype=bool), sd.shape)
    if not m.any(axis=-1).all():
        raise MaskError("softmax_masked: some rows have no unmasked positions")
    shifted = sd + np.where(m, 0.0, -1e9).astype(sd.dtype)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    expd = np.where(m, expd, 0.0)
    y = expd / expd.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return [(scores, y * (g - inner))]

    return record_op("softmax_masked", (scores,), y, vjp)


def masked_max(x, mask) -> Tensor:
    """Per-channel max over valid sequence positions; x is [B, L, H]."""
    xd = _data(x)
    m = np.asarray(_data(mask), dtype=bool)
    if not m.any(axis=-1).all():
        raise MaskError("masked_max: a sequence has no valid positions")
    lowered = np.where(m[..., None], xd, -np.inf)
    idx = lowered.argmax(axis=1)
    out = np.take_along_axis(xd, idx[:, None, :], axis=1)[:, 0, :]

    def vjp(g):
        gx = np.zeros_like(xd)
        b_idx = np.arange(xd.shape[0])[:, None]
        h_idx = np.arange(xd.shape[2])[None, :]
        np.add.at(gx, (b_idx, idx, h_idx), g)
        return [(x, gx)]

    return record_op("masked_max", (x,), out, vjp)


def conv1d_same(x, w, bias) -> Tensor:
    """1-d convolution over [B, L, Din] with zero same-padding.

    The kernel is [K, Din, Dout] with odd K; output length equals input
    length via (K-1)/2 zeros on each side.
    """
    xd, wd, bd = _data(x), _data(w), _data(bias)
    if xd.ndim != 3 or wd.ndim != 3:
        raise ShapeError(f"conv1d_same expects x [B,L,Din] and w [K,Din,Dout], got {xd.shape}, {wd.shape}")
    k = wd.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"conv1d_same requires an odd kernel size, got {k}")
    if xd.shape[2] != wd.shape[1]:
        raise ShapeError(f"conv1d_same channel mismatch: x {xd.shape} vs w {wd.shape}")
    pad = (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # [B, L, Din, K]
    out = np.einsum("blik,kio->blo", win, wd, optimize=True) + bd

    def vjp(g):
        gb = g.sum(axis=(0, 1))
        gw = np.einsum("blik,blo->kio", win, g, optimize=True)
        gp = np.pad(g, ((0, 0), (pad, pad), (0, 0)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=1)  # [B, L, Dout, K]
        gx = np.einsum("blok,kio->bli", gwin, wd[::-1], optimize=True)
        return [(x, gx), (w, gw), (bias, gb)]

    return record_op("conv1d_same", (x, w, bias), out, vjp)


def weight_norm(v, g) -> Tensor:
    """Effective weight g * v / ||v||, per output unit (last axis)."""
    vd, gd = _data(v), _data(g)
    axes = tuple(range(vd.ndim - 1))
    norm = np.sqrt((vd * vd).sum(axis=axes, keepdims=True))
    scale = gd / norm
    out = vd * scale

    def vjp(gout):
        s = (gout * vd).sum(axis=axes, keepdims=True)
        gv = scale * gout - vd * (gd * s / norm**3)
        gg = (gout * vd / norm).sum(axis=axes)
        return [(v, gv), (g, gg)]

    return record_op("weight_norm", (v, g), out, vjp)


# ---------------------------------------------------------------------------
# initialization and rng plumbing
# ---------------------------------------------------------------------------


def he_init(shape, fan_in: int, gain: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal samples with std gain/sqrt(fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    std = gain / math.sqrt(fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class RngTree:
    """One master seed, split deterministically into named streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence([self.seed, key]))


class Parameter:
    """Named trainable value, optionally stored in weight-normalized form.

    With weight normalization the direction tensor ``v`` and per-unit scale
    ``g`` are the trainable quantities; the effective weight g * v / ||v||
    is rebuilt on every :meth:`effective` call, so it always reflects the
    current v and g.
    """

    def __init__(self, name: str, value: np.ndarray, weight_normed: bool = False):
        self.name = name
        value = np.asarray(value)
        self.v = Tensor(value, requires_grad=True)
        if weight_normed:
            axes = tuple(range(value.ndim - 1))
            norms = np.sqrt((value * value).sum(axis=axes))
            self.g: Tensor | None = Tensor(norms.astype(value.dtype), requires_grad=True)
        else:
            self.g = None

    @property
    def weight_normed(self) -> bool:
        return self.g is not None

    def effective(self) -> Tensor:
        return weight_norm(self.v, self.g) if self.g is not None else self.v

    def tensors(self) -> list[Tensor]:
        return [self.v] if self.g is None else [self.v, self.g]

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors())

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.v.shape}, weight_normed={self.weight_normed})"


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
