"""SWAR bit-packing of narrow integers and the carries it produces.

A ``PackedWord`` holds ``L = width // lane_bits`` lanes side by side, lane
``i`` at bits ``[i*lane_bits, (i+1)*lane_bits)``.  Three ways of adding two
words are modelled:

* ``add_contaminated`` - one plain wide add; a lane's carry-out leaks into
  the next lane, the top lane's carry is lost.
* ``add_lane_isolated`` - what a vector instruction does: every lane wraps on
  its own.
* ``add_buffered`` - lanes keep their top bit free as a buffer, the wide add
  lets carries land there and a mask clears them afterwards.

The scalar functions here use Python ints and are the reference semantics
for the vectorized kernels in :mod:`wrapnet.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import RangeError, SpecMismatchError, WrapnetError
from .fxp import as_int_array, to_signed, to_unsigned

WIDTHS = (16, 32, 64)
DEFAULT_MOMENTUM = 0.99
DEFAULT_TEMPERATURE = 1.0


def lane_count(width: int, lane_bits: int) -> int:
    if width not in WIDTHS:
        raise SpecMismatchError(f"word width must be one of {WIDTHS}, got {width}")
    if not 2 <= lane_bits <= width:
        raise SpecMismatchError(f"lane_bits must lie in [2, {width}], got {lane_bits}")
    return width // lane_bits


def lane_masks(width: int, lane_bits: int, buffered: bool = False) -> tuple[int, int, int]:
    """Return ``(value_mask, high_mask, used_mask)`` for a layout.

    ``high_mask`` has the top bit of every lane set, ``value_mask`` the bits
    that may carry data (all lane bits, or all but the buffer bit) and
    ``used_mask`` every bit that belongs to some lane.
    """
    L = lane_count(width, lane_bits)
    lane = (1 << lane_bits) - 1
    used = value = high = 0
    for i in range(L):
        shift = i * lane_bits
        used |= lane << shift
        high |= 1 << (shift + lane_bits - 1)
    value = used & ~high if buffered else used
    return value, high, used


@dataclass(frozen=True)
class PackedWord:
    width: int
    lane_bits: int
    buffered: bool
    payload: int

    def __post_init__(self):
        lane_count(self.width, self.lane_bits)
        if not 0 <= self.payload < (1 << self.width):
            raise RangeError(f"payload does not fit in {self.width} bits")

    @property
    def lanes(self) -> int:
        return self.width // self.lane_bits

    @property
    def value_bits(self) -> int:
        return self.lane_bits - 1 if self.buffered else self.lane_bits

    def layout(self) -> tuple[int, int, bool]:
        return self.width, self.lane_bits, self.buffered

    def __repr__(self):
        digits = self.width // 4
        return (f"PackedWord(W={self.width}, lane_bits={self.lane_bits}, "
                f"buffered={self.buffered}, payload=0x{self.payload:0{digits}X})")


def pack(values: Sequence[int], width: int, lane_bits: int, buffered: bool = False) -> PackedWord:
    L = lane_count(width, lane_bits)
    values = [int(v) for v in values]
    if len(values) != L:
        raise RangeError(f"expected {L} lane values, got {len(values)}")
    cap = 1 << (lane_bits - 1 if buffered else lane_bits)
    payload = 0
    for i, v in enumerate(values):
        if not 0 <= v < cap:
            raise RangeError(f"lane value {v} exceeds lane capacity {cap - 1}")
        payload |= v << (i * lane_bits)
    return PackedWord(width, lane_bits, buffered, payload)


def unpack(word: PackedWord) -> list[int]:
    lane = (1 << word.lane_bits) - 1
    return [(word.payload >> (i * word.lane_bits)) & lane for i in range(word.lanes)]


def _same_layout(a: PackedWord, c: PackedWord):
    if a.layout() != c.layout():
        raise SpecMismatchError(f"layouts differ: {a.layout()} vs {c.layout()}")


def add_contaminated(a: PackedWord, c: PackedWord) -> PackedWord:
    _same_layout(a, c)
    if a.buffered:
        raise SpecMismatchError("contaminated addition expects unbuffered words")
    _, _, used = lane_masks(a.width, a.lane_bits)
    # bits above the last lane (when lane_bits does not divide W) are not storage
    return PackedWord(a.width, a.lane_bits, False, (a.payload + c.payload) & used)


def add_lane_isolated(a: PackedWord, c: PackedWord) -> PackedWord:
    """Lane-wise wrapping add built from wide-word logic only.

    Adding with every lane's top bit cleared cannot carry across lanes; the
    top bits are then restored with XOR (their sum bit, carry discarded).
    For buffered words the lanes wrap at ``lane_bits - 1`` bits.
    """
    _same_layout(a, c)
    if a.buffered:
        return add_buffered(a, c)
    _, high, used = lane_masks(a.width, a.lane_bits)
    low = used & ~high
    s = ((a.payload & low) + (c.payload & low)) ^ ((a.payload ^ c.payload) & high)
    return PackedWord(a.width, a.lane_bits, False, s & used)


def add_buffered(a: PackedWord, c: PackedWord) -> PackedWord:
    _same_layout(a, c)
    if not a.buffered:
        raise SpecMismatchError("buffered addition expects buffered words")
    _, high, _ = lane_masks(a.width, a.lane_bits, buffered=True)
    if (a.payload | c.payload) & high:
        raise RangeError("operand has a buffer bit set")
    return PackedWord(a.width, a.lane_bits, True,
                      buffered_add_payload(a.payload, c.payload, a.width, a.lane_bits))


def buffered_add_payload(a, c, width: int, lane_bits: int):
    """Payload arithmetic of :func:`add_buffered`: one wide add, then clear the buffer bits.

    Works on Python ints or on ``uint64`` arrays (``width <= 64``), where the
    wide add wraps modulo 2**64 before masking.
    """
    value, _, _ = lane_masks(width, lane_bits, buffered=True)
    if isinstance(a, np.ndarray) or isinstance(c, np.ndarray):
        a = np.asarray(a, dtype=np.uint64)
        c = np.asarray(c, dtype=np.uint64)
        return (a + c) & np.uint64(value)
    return ((a + c) & ((1 << width) - 1)) & value


# -- carry accounting ---------------------------------------------------------

def carry_fold(u: int, bits: int) -> tuple[int, int, int]:
    """Fold an unsigned total into a ``bits``-bit register, re-adding carries.

    Returns ``(total_carries, final_register, iterations)``.
    """
    period = 1 << bits
    ci, ri, total, iters = int(u), 0, 0, 0
    while ci != 0:
        s = ci + ri
        ci, ri = s >> bits, s & (period - 1)
        total += ci
        iters += 1
    return total, ri, iters


def carry_count(v, bits: int) -> tuple[int, int]:
    """Total carries and the final register when summing ``v`` in ``bits`` bits.

    ``v`` holds signed ``bits``-bit values; they are reinterpreted as unsigned
    before summing, so negative entries contribute ``v + 2**bits``.
    """
    u = int(np.sum(to_unsigned(as_int_array(v).ravel(), bits), dtype=np.int64))
    c, r, _ = carry_fold(u, bits)
    return c, r


def carry_fold_batch(u: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`carry_fold` over an array of unsigned totals."""
    mask = (1 << bits) - 1
    ci = np.asarray(u, dtype=np.int64).copy()
    ri = np.zeros_like(ci)
    total = np.zeros_like(ci)
    while ci.any():
        s = ci + ri
        ci = s >> bits
        ri = s & mask
        total += ci
    return total, ri


def carry_count_batch(products: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """:func:`carry_count` over the last axis of a signed products array."""
    p = np.asarray(products, dtype=np.int64)
    u = np.where(p < 0, p + (1 << bits), p).sum(axis=-1)
    return carry_fold_batch(u, bits)


class ContaminatedDot(NamedTuple):
    result: int
    top_carries: int
    reduction_carries: int

    @property
    def dropped(self) -> int:
        return self.top_carries + self.reduction_carries


def packed_dot_contaminated(x_q, w_q, width: int, lane_bits: int) -> ContaminatedDot:
    """Dot product of activations with sign/ternary weights in packed words.

    Product ``i`` goes to lane ``i % L`` of word ``i // L``.  The words are
    summed with plain wide adds (carries leak into the next lane, the top
    lane's carry is dropped), then the lanes are summed in a ``lane_bits``
    register whose carries are dropped too.  Both drop counts are reported.
    """
    x = as_int_array(x_q).ravel()
    w = as_int_array(w_q).ravel()
    if x.shape != w.shape:
        raise RangeError(f"length mismatch: {x.size} vs {w.size}")
    if w.size and (w.min() < -1 or w.max() > 1):
        raise RangeError("packed accumulation needs weights in {-1, 0, 1}")
    L = lane_count(width, lane_bits)
    lane = (1 << lane_bits) - 1
    _, _, used = lane_masks(width, lane_bits)
    prods = (x * w) & lane
    acc = top = 0
    for start in range(0, prods.size, L):
        word = 0
        for j, p in enumerate(prods[start:start + L]):
            word |= int(p) << (j * lane_bits)
        s = acc + word
        top += s >> (L * lane_bits)
        acc = s & used
    red = reduced = 0
    for i in range(L):
        s = reduced + ((acc >> (i * lane_bits)) & lane)
        red += s >> lane_bits
        reduced = s & lane
    return ContaminatedDot(int(to_signed(reduced, lane_bits)), top, red)


@dataclass(frozen=True)
class CarryStats:
    """Per-neuron running carry statistics."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise WrapnetError(f"momentum must lie in (0, 1), got {self.momentum}")

    @classmethod
    def zeros(cls, n: int, momentum: float = DEFAULT_MOMENTUM) -> "CarryStats":
        return cls(np.zeros(n), np.zeros(n), momentum)


def carry_batch_stats(counts) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance over the batch (first) axis."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim == 0 or counts.shape[0] == 0:
        raise WrapnetError("carry statistics need a non-empty batch")
    mean = counts.mean(axis=0)
    var = np.mean((counts - mean) ** 2, axis=0)
    return mean, var


def update_moving_mean(stats: CarryStats, batch_mean, batch_var=None) -> CarryStats:
    m = stats.momentum
    mean = m * stats.mean + (1.0 - m) * np.asarray(batch_mean, dtype=np.float64)
    var = stats.var if batch_var is None else np.asarray(batch_var, dtype=np.float64)
    return CarryStats(mean, var, m)


# -- differentiable surrogate ---------------------------------------------------

def soft_selector(v, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Smooth stand-in for ``[v >= 0]`` on integer inputs.

    The argument is offset by one half so integral zeros land on the
    non-negative side, matching the hard reinterpretation.
    """
    return 0.5 * (np.tanh((np.asarray(v, dtype=np.float64) + 0.5) / temperature) + 1.0)


def soft_selector_grad(v, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    t = np.tanh((np.asarray(v, dtype=np.float64) + 0.5) / temperature)
    return 0.5 * (1.0 - t * t) / temperature


def relaxed_carry(v, bits: int, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Smooth part of the carry surrogate, ``u_soft / (2**bits - 1)``.

    Since ``carries = (u - r_final) / (2**bits - 1)``, treating the final
    register as a constant (straight-through on floor/mod) leaves this
    function; its gradient is the one :func:`soft_carry_count` returns.
    """
    v = np.asarray(v, dtype=np.float64)
    u = np.sum(v + (1.0 - soft_selector(v, temperature)) * (1 << bits))
    return float(u / ((1 << bits) - 1))


def soft_carry_count(v, bits: int, temperature: float = DEFAULT_TEMPERATURE) -> tuple[float, np.ndarray]:
    """Carry count with a straight-through gradient.

    The forward value is the exact count on ``round(v)``; the gradient is
    ``d relaxed_carry / dv``.
    """
    v = np.asarray(v, dtype=np.float64)
    hard = np.clip(np.rint(v), -(1 << (bits - 1)), (1 << (bits - 1)) - 1).astype(np.int64)
    value, _ = carry_count(hard, bits)
    grad = (1.0 - (1 << bits) * soft_selector_grad(v, temperature)) / ((1 << bits) - 1)
    return float(value), grad


def iteration_bound(u: int, bits: int) -> int:
    """Upper bound on :func:`carry_fold` iterations."""
    n, cap = 0, 1
    while cap < max(u, 1):
        cap <<= bits
        n += 1
    return n + 1
