"""Dense NCHW float32 arrays, a keyed deterministic RNG, and the matmul/im2col kernels.

Tensors are plain ``numpy.ndarray`` objects.  Storage is float32; every
reduction (matmul, convolution sums) accumulates in float64 and is cast back
to the operand dtype.  Kernels preserve a float64 input dtype so gradient
checks can run at double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

DTYPE = np.float32
MAX_ELEMENTS = 2**40

RNG_ALGORITHM = "numpy-pcg64-seedsequence"

# Spawn-key namespaces for child streams.
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_AUGMENT = 2
STREAM_DROPOUT = 3
STREAM_SYNTH = 4


class Rng:
    """Seeded PCG64 stream; children are keyed, not drawn, so they never depend on draw order.

    ``Rng(7).child(STREAM_DROPOUT, epoch, batch)`` always yields the same
    stream no matter what was sampled from the parent before.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def normal(self, loc=0.0, scale=1.0, shape=None):
        return self._gen.normal(loc, scale, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


@dataclass(frozen=True)
class Uniform:
    low: float = 0.0
    high: float = 1.0


@dataclass(frozen=True)
class KaimingNormal:
    fan_in: int


def check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"rank must be 1..4, got shape {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    if math.prod(shape) > MAX_ELEMENTS:
        raise ShapeError(f"element count of {shape} overflows the {MAX_ELEMENTS} limit")
    return shape


def ensure_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return x


def tensor_create(shape, fill=0.0, rng: Rng | None = None, dtype=DTYPE) -> np.ndarray:
    """Allocate a tensor filled with a constant or drawn from an init rule.

    ``fill`` is a scalar, :class:`Uniform` or :class:`KaimingNormal`.  Stochastic
    fills draw only from ``rng``.
    """
    shape = check_shape(shape)
    if isinstance(fill, Uniform):
        if rng is None:
            raise ValueError("uniform fill needs an rng")
        data = rng.uniform(fill.low, fill.high, shape)
    elif isinstance(fill, KaimingNormal):
        if rng is None:
            raise ValueError("kaiming fill needs an rng")
        if fill.fan_in < 1:
            raise ShapeError(f"fan_in must be >= 1, got {fill.fan_in}")
        data = rng.normal(0.0, math.sqrt(2.0 / fill.fan_in), shape)
    else:
        value = float(fill)
        if not math.isfinite(value):
            raise NonFiniteError(f"fill value {fill!r} is not finite")
        return np.full(shape, value, dtype=dtype)
    return np.asarray(data, dtype=dtype)


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}


def elementwise(op: str, a, b) -> np.ndarray:
    """Pointwise binary op; ``b`` must match ``a`` or be per-channel ``(1,C,1,1)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        per_channel = (
            a.ndim == 4 and b.ndim == 4 and b.shape[0] == 1 and b.shape[2:] == (1, 1)
            and b.shape[1] == a.shape[1]
        )
        if not per_channel:
            raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")
    if op == "div" and np.any(b == 0):
        raise ZeroDivisionError("elementwise div by zero")
    with np.errstate(over="ignore", invalid="ignore"):
        out = fn(a, b)
    return ensure_finite(out, f"elementwise {op}")


def matmul(a, b) -> np.ndarray:
    """(M,K) x (K,N) product accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out_dtype = np.result_type(a, b)
    c = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return ensure_finite(c.astype(out_dtype, copy=False), "matmul")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    """Output extent with floor semantics, as for every strided 3x3 layer on even inputs."""
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded extent {size + 2 * pad}")
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower (N,C,H,W) into a (C*kh*kw, N*Ho*Wo) patch matrix.

    Row ``c*kh*kw + i*kw + j`` holds tap (i,j) of channel c; column
    ``n*Ho*Wo + y*Wo + x`` is output position (n,y,x).  Out-of-bounds taps
    read zero.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col needs NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if kh == kw == 1 and stride == 1 and pad == 0:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back onto the input grid."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if kh == kw == 1 and stride == 1 and pad == 0:
        return cols.reshape(c, n, h, w).transpose(1, 0, 2, 3).copy()
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols6[:, i, j].transpose(1, 0, 2, 3)
            )
    return out[:, :, pad : pad + h, pad : pad + w].astype(cols.dtype)
