"""Micro-benchmarks for the GEMM kernels: median and MAD over repetitions.

Only the kernel call is timed; operand layout (packing, transposes, dtype
conversion) happens once beforehand, as it would for pre-packed weights and
activations that arrive already narrow.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import AccMode, get_backend, run_packed
from .layout import prepare_packed

# 3x3 convolution layers lowered to GEMM: M = H*W pixels, K = 9*C, N = Cout
PRESETS = {
    "resnet-64x56x56": (56 * 56, 9 * 64, 64),
    "resnet-128x28x28": (28 * 28, 9 * 128, 128),
    "resnet-256x14x14": (14 * 14, 9 * 256, 256),
    "resnet-512x7x7": (7 * 7, 9 * 512, 512),
}

BASELINE = AccMode("wrapped", 32)
FIELDS = ["shape", "mode", "b", "W", "backend", "reps", "median_ns", "mad_ns", "gops"]


@dataclass
class BenchRecord:
    shape: str
    mode: str
    b: int
    W: int
    backend: str
    reps: int
    median_ns: float
    mad_ns: float
    gops: float


def shape_str(shape) -> str:
    return "x".join(str(int(s)) for s in shape)


def make_operands(shape, seed: int = 0, act_bits: int = 3):
    """Unsigned ``act_bits`` activations and binary weights for an MxKxN GEMM."""
    M, K, N = shape
    rng = np.random.default_rng(seed)
    A = rng.integers(0, 1 << act_bits, size=(M, K), dtype=np.int64)
    B = rng.choice(np.array([-1, 1]), size=(K, N))
    return A, B


def _kernel_call(A, B, mode: AccMode, backend, threads: int):
    if mode.kind == "exact32":
        a = np.ascontiguousarray(A, dtype=np.int64)
        bt = np.ascontiguousarray(B.T, dtype=np.int64)
        return lambda: backend.gemm_exact(a, bt, threads)
    if mode.kind == "wrapped":
        small = A.min() >= -128 and A.max() <= 127
        dt = np.int8 if small else np.int32
        a = np.ascontiguousarray(A, dtype=dt)
        bt = np.ascontiguousarray(B.T, dtype=dt)
        return lambda: backend.gemm_wrap32(a, bt, threads)
    ops = prepare_packed(A, B, mode.bits, mode.width, mode.kind == "packed_buffered")
    return lambda: run_packed(ops, mode.kind, threads, backend)


def bench_gemm(shape, mode: AccMode | str, repetitions: int = 5, warmup: int = 3,
               seed: int = 0, backend: str | None = None, threads: int = 1) -> BenchRecord:
    if isinstance(mode, str):
        mode = AccMode.parse(mode)
    if warmup < 3:
        raise ValueError("at least 3 warm-up iterations are required")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    be = get_backend(backend)
    A, B = make_operands(shape, seed)
    call = _kernel_call(A, B, mode, be, threads)
    for _ in range(warmup):
        call()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        call()
        samples.append(time.perf_counter_ns() - t0)
    samples = np.asarray(samples, dtype=np.float64)
    med = float(np.median(samples))
    mad = float(np.median(np.abs(samples - med)))
    M, K, N = shape
    return BenchRecord(shape_str(shape), str(mode), mode.bits, mode.width if mode.packed else 0,
                       be.NAME, repetitions, med, mad, 2.0 * M * K * N / med)


def speedup_table(records: list[BenchRecord], baseline: str = str(BASELINE)) -> list[dict]:
    """Ratio of baseline median time to every other mode, per (shape, backend)."""
    base = {(r.shape, r.backend): r.median_ns for r in records if r.mode == baseline}
    rows = []
    for r in records:
        ref = base.get((r.shape, r.backend))
        if ref is None or r.mode == baseline:
            continue
        rows.append({"shape": r.shape, "backend": r.backend, "mode": r.mode,
                     "baseline": baseline, "ratio": ref / r.median_ns})
    return rows


def write_csv(path, records: list[BenchRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def write_jsonl(path, records: list[BenchRecord]):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")
