"""Integer GEMM / convolution with selectable accumulator semantics.

The inner loops come from the compiled ``_ckernels`` extension when it is
importable, otherwise from the numpy fallback ``_pykernels``.  Set
``WRAPNET_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import importlib
import os
import re
from dataclasses import dataclass
from types import ModuleType

import numpy as np

from ..errors import RangeError, ShapeMismatchError, SpecMismatchError
from ..fxp import as_int_array, wrap
from ..packing import WIDTHS, lane_masks
from .layout import PackedOperands, prepare_packed

MODES = ("exact32", "wrapped", "packed_isolated", "packed_buffered", "packed_contaminated")


def _load_backend() -> ModuleType:
    if os.environ.get("WRAPNET_PURE_PYTHON", "") not in ("", "0"):
        return importlib.import_module("._pykernels", __name__)
    try:
        return importlib.import_module("._ckernels", __name__)
    except ImportError:
        return importlib.import_module("._pykernels", __name__)


_backend = _load_backend()
BACKEND = _backend.NAME


def get_backend(name: str | None = None) -> ModuleType:
    """Return a kernel backend by name (``"cython"`` / ``"numpy"``) or the active one."""
    if name is None:
        return _backend
    if name == "numpy":
        return importlib.import_module("._pykernels", __name__)
    if name == "cython":
        return importlib.import_module("._ckernels", __name__)
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list[str]:
    names = ["numpy"]
    try:
        get_backend("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


@dataclass(frozen=True)
class AccMode:
    kind: str
    bits: int = 32
    width: int = 64

    def __post_init__(self):
        if self.kind not in MODES:
            raise SpecMismatchError(f"unknown accumulator mode {self.kind!r}")
        if self.kind == "wrapped" and not 2 <= self.bits <= 32:
            raise SpecMismatchError(f"wrapped mode needs 2 <= b <= 32, got {self.bits}")
        if self.kind.startswith("packed"):
            if not 2 <= self.bits <= 16:
                raise SpecMismatchError(f"packed modes need 2 <= b <= 16, got {self.bits}")
            if self.width not in WIDTHS:
                raise SpecMismatchError(f"packed word width must be in {WIDTHS}")
            if self.kind == "packed_buffered" and self.bits < 3:
                raise SpecMismatchError("buffered lanes need at least 3 bits")

    @property
    def packed(self) -> bool:
        return self.kind.startswith("packed")

    @property
    def effective_bits(self) -> int:
        """Modulus (in bits) of the result, or 64 for the exact path."""
        if self.kind == "exact32":
            return 64
        if self.kind == "packed_buffered":
            return self.bits - 1
        return self.bits

    def __str__(self):
        if self.kind == "exact32":
            return "exact32"
        if self.kind == "wrapped":
            return f"wrapped({self.bits})"
        return f"{self.kind}({self.bits},{self.width})"

    @classmethod
    def parse(cls, text: str) -> "AccMode":
        """Parse ``exact32``, ``wrapped(8)`` or ``packed_isolated(8,64)``."""
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*(\d+)\s*(?:,\s*(\d+)\s*)?\))?\s*", text)
        if not m:
            raise SpecMismatchError(f"cannot parse accumulator mode {text!r}")
        kind, b, w = m.groups()
        if kind == "exact32":
            return cls("exact32")
        if b is None:
            raise SpecMismatchError(f"mode {kind} needs a bit count, e.g. {kind}(8)")
        return cls(kind, int(b), int(w) if w else 64)


def exact32() -> AccMode:
    return AccMode("exact32")


def wrapped(bits: int) -> AccMode:
    return AccMode("wrapped", bits)


def packed_isolated(bits: int, width: int = 64) -> AccMode:
    return AccMode("packed_isolated", bits, width)


def packed_buffered(bits: int, width: int = 64) -> AccMode:
    return AccMode("packed_buffered", bits, width)


def packed_contaminated(bits: int, width: int = 64) -> AccMode:
    return AccMode("packed_contaminated", bits, width)


def _matrices(A, B):
    a = as_int_array(A)
    b = as_int_array(B)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError("gemm operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a, b


def run_packed(ops: PackedOperands, kind: str, threads: int = 1, backend=None):
    """Run a packed kernel on prepared operands (no re-layout)."""
    be = backend or _backend
    value, high, used = ops.masks()
    low = used & ~high
    if kind == "packed_isolated":
        return be.gemm_packed_isolated(ops.Ap, ops.neg, ops.nz, ops.negcount,
                                       ops.lane_bits, ops.lanes, low, high, threads)
    if kind == "packed_buffered":
        return be.gemm_packed_buffered(ops.Ap, ops.neg, ops.nz, ops.negcount,
                                       ops.lane_bits, ops.lanes, value, threads)
    if kind == "packed_contaminated":
        return be.gemm_packed_contaminated(ops.Ap, ops.neg, ops.nz, ops.ones,
                                           ops.lane_bits, ops.lanes, low, high, threads)
    raise SpecMismatchError(f"{kind} is not a packed mode")


def gemm(A, B, mode: AccMode | str = "exact32", threads: int = 1, backend=None,
         return_dropped: bool = False):
    """``A (M x K) @ B (K x N)`` with the accumulator behaviour of ``mode``.

    Packed modes need ``B`` in {-1, 0, 1}.  With ``return_dropped`` the
    contaminated mode also returns the top-lane and reduction carry drops.
    """
    if isinstance(mode, str):
        mode = AccMode.parse(mode)
    be = backend or _backend
    a, b = _matrices(A, B)
    if mode.kind == "exact32":
        return be.gemm_exact(np.ascontiguousarray(a), np.ascontiguousarray(b.T), threads)
    if mode.kind == "wrapped":
        # uint32 products/sums are exact modulo 2**32, hence modulo 2**b for b <= 32
        a32 = np.ascontiguousarray((a & 0xFFFFFFFF).astype(np.uint32).view(np.int32))
        b32 = np.ascontiguousarray((b.T & 0xFFFFFFFF).astype(np.uint32).view(np.int32))
        out = be.gemm_wrap32(a32, b32, threads).astype(np.int64)
        return wrap(out, mode.bits)
    if b.size and (b.min() < -1 or b.max() > 1):
        raise RangeError("packed modes need weights in {-1, 0, 1}")
    ops = prepare_packed(a, b, mode.bits, mode.width, mode.kind == "packed_buffered")
    res = run_packed(ops, mode.kind, threads, be)
    if mode.kind == "packed_contaminated":
        out, top, red = res
        return (out, top, red) if return_dropped else out
    return res


from .lowering import conv2d, conv_output_shape, im2col  # noqa: E402

__all__ = [
    "AccMode", "BACKEND", "MODES", "available_backends", "conv2d", "conv_output_shape",
    "exact32", "gemm", "get_backend", "im2col", "packed_buffered", "packed_contaminated",
    "packed_isolated", "prepare_packed", "run_packed", "wrapped", "lane_masks",
]
