"""Operand preparation shared by both kernel backends.

Activations are packed along K: product ``k`` lives in word ``k // L``,
lane ``k % L``.  Sign/ternary weights never get packed as numbers; they
become three masks per word:

* ``neg``  - all value bits set in lanes whose weight is -1
* ``nz``   - all value bits set in lanes whose weight is non-zero
* ``ones`` - the lowest bit set in lanes whose weight is -1

``(a ^ neg) & nz`` is then ``a``, ``~a`` or ``0`` per lane; the missing
``+1`` of the negations is either added per lane (``ones``) or, when the
accumulator wraps per lane anyway, once at the end (``negcount``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..packing import lane_masks


@dataclass(frozen=True)
class PackedOperands:
    Ap: np.ndarray
    neg: np.ndarray
    nz: np.ndarray
    ones: np.ndarray
    negcount: np.ndarray
    lane_bits: int
    lanes: int
    width: int
    buffered: bool

    @property
    def value_bits(self) -> int:
        return self.lane_bits - 1 if self.buffered else self.lane_bits

    def masks(self) -> tuple[int, int, int]:
        return lane_masks(self.width, self.lane_bits, self.buffered)


def _shifts(lanes: int, lane_bits: int) -> np.ndarray:
    return (np.arange(lanes, dtype=np.uint64) * np.uint64(lane_bits)).astype(np.uint64)


def pack_rows(A: np.ndarray, lane_bits: int, width: int, buffered: bool = False) -> np.ndarray:
    """Pack each row of an integer matrix into uint64 words (two's complement lanes)."""
    A = np.asarray(A, dtype=np.int64)
    M, K = A.shape
    L = width // lane_bits
    vb = lane_bits - 1 if buffered else lane_bits
    Kw = max(1, -(-K // L))
    lanes = np.zeros((M, Kw * L), dtype=np.uint64)
    lanes[:, :K] = (A & ((1 << vb) - 1)).astype(np.uint64)
    lanes = lanes.reshape(M, Kw, L) << _shifts(L, lane_bits)
    return np.bitwise_or.reduce(lanes, axis=2)


def weight_masks(B: np.ndarray, lane_bits: int, width: int, buffered: bool = False):
    """Masks for a K x N sign/ternary matrix; each returned array is N x Kw."""
    B = np.asarray(B, dtype=np.int64)
    K, N = B.shape
    L = width // lane_bits
    vb = lane_bits - 1 if buffered else lane_bits
    Kw = max(1, -(-K // L))
    Bt = np.zeros((N, Kw * L), dtype=np.int64)
    Bt[:, :K] = B.T
    Bt = Bt.reshape(N, Kw, L)
    sh = _shifts(L, lane_bits)
    full = np.uint64((1 << vb) - 1)

    def fold(sel, fill):
        return np.bitwise_or.reduce(np.where(sel, fill, np.uint64(0)) << sh, axis=2)

    neg = fold(Bt == -1, full)
    nz = fold(Bt != 0, full)
    ones = fold(Bt == -1, np.uint64(1))
    negcount = (B == -1).sum(axis=0).astype(np.int64)
    return neg, nz, ones, negcount


def prepare_packed(A, B, lane_bits: int, width: int, buffered: bool = False) -> PackedOperands:
    Ap = pack_rows(A, lane_bits, width, buffered)
    neg, nz, ones, negcount = weight_masks(B, lane_bits, width, buffered)
    return PackedOperands(np.ascontiguousarray(Ap), np.ascontiguousarray(neg),
                          np.ascontiguousarray(nz), np.ascontiguousarray(ones),
                          negcount, lane_bits, width // lane_bits, width, buffered)
