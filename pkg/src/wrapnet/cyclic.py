"""Periodic activations that make a layer blind to accumulator wrap-around.

All kinds share the period ``2**bits``; the input is first folded into
``m in [-2**(bits-1), 2**(bits-1))`` and then shaped by a piecewise-linear
basis function.  ``smooth_modulo`` is the default; ``relu_like`` and
``absolute`` are the alternatives compared against it, and ``pure_modulo`` is
the raw wrap (the ``slope -> inf`` limit).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InvalidSchemeError

CyclicKind = Literal["smooth_modulo", "relu_like", "absolute", "pure_modulo"]
KINDS = ("smooth_modulo", "relu_like", "absolute", "pure_modulo")


@dataclass(frozen=True)
class CyclicSpec:
    bits: int
    slope: float = 2.0
    kind: CyclicKind = "smooth_modulo"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSchemeError(f"unknown cyclic kind {self.kind!r}")
        if not 2 <= self.bits <= 32:
            raise InvalidSchemeError(f"cyclic bits must lie in [2, 32], got {self.bits}")
        if not self.slope >= 1:
            raise InvalidSchemeError(f"slope must be >= 1, got {self.slope!r}")
        if self.kind == "smooth_modulo" and math.isinf(self.slope):
            object.__setattr__(self, "kind", "pure_modulo")

    @property
    def half(self) -> int:
        return 1 << (self.bits - 1)

    @property
    def period(self) -> int:
        return 1 << self.bits

    @property
    def boundary(self) -> float:
        """Transition point ``M = k/(k+1) * 2**(bits-1)``."""
        if math.isinf(self.slope):
            return float(self.half)
        return self.slope / (self.slope + 1.0) * self.half

    def slope_str(self) -> str:
        return "inf" if math.isinf(self.slope) else repr(float(self.slope))

    def to_dict(self) -> dict:
        return {"bits": self.bits, "slope": self.slope_str(), "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "CyclicSpec":
        slope = d.get("slope", "2")
        slope = math.inf if str(slope).lower() in ("inf", "infinity") else float(slope)
        return cls(int(d["bits"]), slope, d.get("kind", "smooth_modulo"))


def fold(z, bits: int) -> np.ndarray:
    """``mod(z + 2**(bits-1), 2**bits) - 2**(bits-1)`` for ints or reals."""
    half = 1 << (bits - 1)
    z = np.asarray(z)
    if z.dtype.kind in "iu":
        z = z.astype(np.int64)
        return (((z + half) & ((1 << bits) - 1)) - half).astype(np.float64)
    return np.mod(z.astype(np.float64) + half, float(1 << bits)) - half


def cyclic_apply(z, spec: CyclicSpec) -> np.ndarray:
    m = fold(z, spec.bits)
    k = spec.slope
    half = float(spec.half)
    if spec.kind == "pure_modulo":
        return m
    if spec.kind == "absolute":
        return np.abs(m)
    M = spec.boundary
    if spec.kind == "smooth_modulo":
        out = np.where(m > M, k * half - k * m, m)
        return np.where(m < -M, -k * half - k * m, out)
    # relu_like
    return np.where(m > M, k * (half - m), np.maximum(m, 0.0))


def cyclic_derivative(z, spec: CyclicSpec) -> np.ndarray:
    """Slope of :func:`cyclic_apply`; at a kink the left-hand slope is used."""
    m = fold(z, spec.bits)
    k = spec.slope
    if spec.kind == "pure_modulo":
        return np.ones_like(m)
    half = -float(spec.half)
    at_seam = m == half
    if spec.kind == "absolute":
        d = np.where(m > 0, 1.0, -1.0)
        # left of the period seam lies the rising edge (m -> +2**(b-1))
        return np.where(at_seam, 1.0, d)
    M = spec.boundary
    if spec.kind == "smooth_modulo":
        return np.where((m > M) | (m <= -M), -k, 1.0)
    d = np.where(m > M, -k, np.where(m > 0, 1.0, 0.0))
    return np.where(at_seam, -k, d)


def kink_points(spec: CyclicSpec) -> np.ndarray:
    """Slope discontinuities inside one period ``[-2**(b-1), 2**(b-1)]``."""
    half = float(spec.half)
    if spec.kind == "pure_modulo":
        return np.array([half])
    if spec.kind == "absolute":
        return np.array([-half, 0.0, half])
    M = spec.boundary
    if spec.kind == "smooth_modulo":
        # the period seam is not a kink: both sides share the slope -k
        return np.array([-M, M])
    return np.array([-half, 0.0, M, half])
