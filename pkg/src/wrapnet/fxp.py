"""Fixed-point primitives: quantizers, wrap-around and the integer dot product.

Every quantized tensor is a ``FixedTensor``: an int64 payload together with the
``QuantScheme`` that maps it back to reals (``x = step_size * x_q``).
Accumulation happens either exactly (64-bit) or in a ``b``-bit register that
wraps around modulo ``2**b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import (
    DegenerateScaleError,
    InvalidSchemeError,
    RangeError,
    ShapeMismatchError,
)

QuantKind = Literal["uniform", "binary", "ternary"]

TERNARY_THRESHOLD = 0.7


@dataclass(frozen=True)
class QuantScheme:
    step_size: float
    bits: int
    signed: bool = True
    kind: QuantKind = "uniform"

    def __post_init__(self):
        if not (self.step_size > 0 and np.isfinite(self.step_size)):
            raise InvalidSchemeError(f"step size must be positive, got {self.step_size!r}")
        if not 1 <= self.bits <= 16:
            raise InvalidSchemeError(f"bits must lie in [1, 16], got {self.bits}")
        if self.kind not in ("uniform", "binary", "ternary"):
            raise InvalidSchemeError(f"unknown quantizer kind {self.kind!r}")
        if self.kind == "binary" and self.bits != 1:
            raise InvalidSchemeError("binary schemes use exactly 1 bit")
        if self.kind == "ternary" and self.bits != 2:
            raise InvalidSchemeError("ternary schemes use exactly 2 bits")

    @property
    def qmin(self) -> int:
        if self.kind == "binary":
            return -1
        if self.signed:
            return -(1 << (self.bits - 1))
        return 0

    @property
    def qmax(self) -> int:
        if self.kind == "binary":
            return 1
        if self.signed:
            return (1 << (self.bits - 1)) - 1
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class FixedTensor:
    """Integer payload plus the scheme that gives it meaning."""

    values: np.ndarray
    scheme: QuantScheme
    shape: tuple = field(default=())

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.dtype.kind not in "iub":
            if not np.all(np.equal(np.mod(vals, 1), 0)):
                raise RangeError("fixed-point payload must be integral")
        vals = vals.astype(np.int64)
        shape = tuple(self.shape) if self.shape else vals.shape
        if int(np.prod(shape, dtype=np.int64)) != vals.size:
            raise ShapeMismatchError(f"shape {shape} does not match {vals.size} values")
        vals = vals.reshape(shape)
        if vals.size and (vals.min() < self.scheme.qmin or vals.max() > self.scheme.qmax):
            raise RangeError(
                f"payload outside [{self.scheme.qmin}, {self.scheme.qmax}] "
                f"(min {vals.min()}, max {vals.max()})"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "shape", shape)

    def dequantize(self) -> np.ndarray:
        return self.values * self.scheme.step_size

    def reshape(self, *shape) -> "FixedTensor":
        return FixedTensor(self.values.reshape(*shape), self.scheme)

    # Blob layout: int32 ndim, int32 dims..., int32 payload; all little endian.
    def to_bytes(self) -> bytes:
        header = struct.pack(f"<i{len(self.shape)}i", len(self.shape), *self.shape)
        return header + self.values.astype("<i4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, scheme: QuantScheme) -> "FixedTensor":
        shape, values = decode_int_blob(blob)
        return cls(values.reshape(shape), scheme)


def encode_int_blob(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    header = struct.pack(f"<i{values.ndim}i", values.ndim, *values.shape)
    return header + values.astype("<i4").tobytes()


def decode_int_blob(blob: bytes) -> tuple[tuple, np.ndarray]:
    if len(blob) < 4:
        raise RangeError("blob too short for a dimension header")
    (ndim,) = struct.unpack_from("<i", blob, 0)
    if ndim < 0 or len(blob) < 4 * (1 + ndim):
        raise RangeError("corrupt dimension header")
    shape = struct.unpack_from(f"<{ndim}i", blob, 4)
    count = int(np.prod(shape, dtype=np.int64))
    body = blob[4 * (1 + ndim):]
    if len(body) != 4 * count:
        raise RangeError(f"expected {count} int32 values, found {len(body) / 4:g}")
    values = np.frombuffer(body, dtype="<i4").astype(np.int64)
    return tuple(shape), values.reshape(shape)


def round_half_away(x):
    """Round to nearest integer, ties away from zero (odd-symmetric)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_uniform(x, scheme: QuantScheme) -> FixedTensor:
    """``clamp(round(x / step), range)`` as a FixedTensor."""
    if scheme.kind != "uniform":
        raise InvalidSchemeError(f"uniform quantizer needs a uniform scheme, got {scheme.kind}")
    q = round_half_away(np.asarray(x, dtype=np.float64) / scheme.step_size)
    q = np.clip(q, scheme.qmin, scheme.qmax)
    return FixedTensor(q.astype(np.int64), scheme)


def quantize_binary(w) -> tuple[FixedTensor, float]:
    """Sign quantizer with a per-tensor scale ``mean(|w|)``.

    Zero entries map to +1 so the payload stays in {-1, +1}.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise DegenerateScaleError("cannot binarize an empty tensor")
    scale = float(np.mean(np.abs(w)))
    if scale == 0.0:
        raise DegenerateScaleError("all-zero tensor has no binary scale")
    q = np.where(w >= 0, 1, -1).astype(np.int64)
    return FixedTensor(q, QuantScheme(scale, 1, True, "binary")), scale


def ternary_threshold(w) -> float:
    return TERNARY_THRESHOLD * float(np.mean(np.abs(w)))


def quantize_ternary(w) -> tuple[FixedTensor, float]:
    """Threshold at 0.7 mean|w|; scale is the mean magnitude of the survivors."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise DegenerateScaleError("cannot ternarize an empty tensor")
    t = ternary_threshold(w)
    keep = np.abs(w) > t
    if not keep.any():
        raise DegenerateScaleError("no entry exceeds the ternary threshold")
    scale = float(np.mean(np.abs(w[keep])))
    q = (np.sign(w) * keep).astype(np.int64)
    return FixedTensor(q, QuantScheme(scale, 2, True, "ternary")), scale


def wrap(z, bits: int):
    """Reduce ``z`` into the signed ``bits``-bit range, modulo ``2**bits``.

    Works on Python ints (arbitrary width) and integer/float numpy arrays.
    """
    half = 1 << (bits - 1)
    if isinstance(z, (int, np.integer)):
        return (int(z) + half) % (1 << bits) - half
    z = np.asarray(z)
    if z.dtype.kind in "iu":
        z = z.astype(np.int64)
        return ((z + half) & ((1 << bits) - 1)) - half
    return np.mod(z + half, float(1 << bits)) - half


def _check_pair(x_q, w_q):
    x = np.asarray(getattr(x_q, "values", x_q), dtype=np.int64).ravel()
    w = np.asarray(getattr(w_q, "values", w_q), dtype=np.int64).ravel()
    if x.shape != w.shape:
        raise ShapeMismatchError(f"length mismatch: {x.size} vs {w.size}")
    return x, w


def exact_dot(x_q, w_q) -> int:
    """Wide (64-bit) integer inner product."""
    x, w = _check_pair(x_q, w_q)
    return int(np.dot(x, w))


def wrapped_dot(x_q, w_q, bits: int) -> int:
    """Inner product accumulated in a ``bits``-bit wrapping register.

    Each partial sum is wrapped, mirroring what a narrow accumulator does
    step by step; the result agrees with ``wrap(exact_dot(...))``.
    """
    x, w = _check_pair(x_q, w_q)
    prods = x * w
    mask = (1 << bits) - 1
    # masked products are < 2**bits, so the int64 sum is safe for K <= 2**20, bits <= 32
    acc = int(np.bitwise_and(prods, mask).sum() & mask)
    half = 1 << (bits - 1)
    return acc - (1 << bits) if acc >= half else acc


def to_unsigned(v, bits: int):
    """Reinterpret signed two's complement ``bits``-bit values as unsigned."""
    half = 1 << (bits - 1)
    arr = np.asarray(v, dtype=np.int64)
    if arr.size and (arr.min() < -half or arr.max() >= half):
        raise RangeError(f"value outside signed {bits}-bit range")
    out = np.where(arr < 0, arr + (1 << bits), arr)
    return int(out) if np.ndim(v) == 0 else out


def to_signed(u, bits: int):
    """Inverse of :func:`to_unsigned` on ``[0, 2**bits)``."""
    arr = np.asarray(u, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << bits)):
        raise RangeError(f"value outside unsigned {bits}-bit range")
    out = np.where(arr >= (1 << (bits - 1)), arr - (1 << bits), arr)
    return int(out) if np.ndim(u) == 0 else out


@dataclass(frozen=True)
class AccumulatorSpec:
    bits: int

    def __post_init__(self):
        if not 4 <= self.bits <= 32:
            raise InvalidSchemeError(f"accumulator bits must lie in [4, 32], got {self.bits}")

    @property
    def period(self) -> int:
        return 1 << self.bits

    def wrap(self, z):
        return wrap(z, self.bits)


def signed_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def as_int_array(x: FixedTensor | Sequence[int] | np.ndarray) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.int64)
