"""Acceptance criteria 1-10.  Each test records one PASS/FAIL line (see conftest).

The training criteria share one desk-scale setup: ``TrainConfig()`` defaults
(512-wide, 3 quantized layers, 3000-sample spiral task) and five seeds.  Each
seed is pretrained once; every pipeline variant starts from a copy of that
network, and results are memoized so criteria reuse each other's runs.
"""
import itertools
import math
import time

import numpy as np
import pytest

from wrapnet import autodiff as ad
from wrapnet.cyclic import CyclicSpec, cyclic_apply, cyclic_derivative, fold, kink_points
from wrapnet.errors import DivergenceError
from wrapnet.fxp import exact_dot, wrap, wrapped_dot
from wrapnet.kernels import gemm
from wrapnet.kernels.bench import PRESETS, bench_gemm
from wrapnet.netgraph import calibrate_model, forward, overflow_penalty
from wrapnet.packing import (buffered_add_payload, carry_count, carry_count_batch, relaxed_carry,
                             soft_carry_count)
from wrapnet.train import TrainConfig, make_synthetic_dataset, pretrain, train_pipeline

SEEDS = range(5)


def end_around_register(values, bits):
    """One addition at a time; a carry-out re-enters at bit 0 and is counted."""
    reg = carries = 0
    for v in values:
        reg += v + (1 << bits) if v < 0 else v
        if reg >= 1 << bits:
            reg -= (1 << bits) - 1
            carries += 1
    return carries, reg


def accuracy(model, data, mode):
    return float(np.mean(np.argmax(forward(model, data.x_test, mode), axis=1) == data.y_test))


class Desk:
    """Lazily pretrained networks and memoized pipeline runs, with wall-clock bookkeeping."""

    def __init__(self):
        self.data, self.nets, self.runs, self.seconds = {}, {}, {}, {}

    def config(self, seed, **kw):
        return TrainConfig(seed=seed).replace(**kw)

    def pretrained(self, seed):
        if seed not in self.nets:
            cfg = self.config(seed)
            t0 = time.perf_counter()
            self.data[seed] = make_synthetic_dataset(seed, cfg.n_samples, cfg.difficulty)
            self.nets[seed] = pretrain(cfg, self.data[seed])
            self.seconds[("pretrain", seed)] = time.perf_counter() - t0
        return self.nets[seed], self.data[seed]

    def run(self, seed, **kw):
        """``TrainResult`` or the ``DivergenceError`` raised by the pipeline."""
        key = (seed, tuple(sorted(kw.items())))
        if key not in self.runs:
            net, data = self.pretrained(seed)
            t0 = time.perf_counter()
            try:
                self.runs[key] = train_pipeline(self.config(seed, **kw), data, pretrained=net)
            except DivergenceError as exc:
                self.runs[key] = exc
            self.seconds[key] = time.perf_counter() - t0
        return self.runs[key]

    def elapsed(self, seed, **kw):
        return self.seconds[(seed, tuple(sorted(kw.items())))]


@pytest.fixture(scope="module")
def desk():
    return Desk()


CONVENTIONAL = dict(calibration="range", cyclic=False, lambda_overflow=0.0, acc_bits=32)
CARRY = dict(lambda_carry=0.1)


def test_criterion_1_oracle_identities(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    bad = 0
    # wrapped_dot against Python-int sums reduced by the wrap formula
    for _ in range(100_000):
        b = int(rng.choice([4, 8, 12]))
        n = int(rng.integers(1, 65))
        x = rng.integers(-(1 << (b - 1)), 1 << (b - 1), size=n)
        w = rng.integers(-(1 << (b - 1)), 1 << (b - 1), size=n)
        s = sum(int(p) * int(q) for p, q in zip(x, w))
        bad += wrapped_dot(x, w, b) != ((s + (1 << (b - 1))) % (1 << b)) - (1 << (b - 1))
        bad += exact_dot(x, w) != s
    # packed_isolated gemm against wrapped gemm: 1000 gemms of 10 x 10 outputs
    for _ in range(1000):
        b = int(rng.choice([4, 8, 12]))
        width = int(rng.choice([16, 32, 64]))
        K = int(rng.integers(1, 65))
        A = rng.integers(0, 1 << (b - 1), size=(10, K))
        B = rng.integers(-1, 2, size=(K, 10))
        bad += int(np.sum(gemm(A, B, f"packed_isolated({b},{width})") != gemm(A, B, f"wrapped({b})")))
        bad += int(np.sum(gemm(A, B, f"wrapped({b})") != wrap(A @ B, b)))
    # exhaustive at b=4: joint (x, w) space up to length 5, every x up to length 8
    cases = 0
    for n in range(1, 9):
        X = np.array(list(itertools.product(range(8), repeat=n)))
        if n <= 5:
            W = np.array(list(itertools.product((-1, 0, 1), repeat=n))).T
        else:
            W = np.array([[1] * n, [-1] * n, [(-1) ** i for i in range(n)], [0] * n]).T
        for lo in range(0, len(X), 1 << 18):
            Xc = X[lo:lo + (1 << 18)]
            ref = wrap(Xc @ W, 4)
            bad += int(np.sum(gemm(Xc, W, "wrapped(4)") != ref))
            bad += int(np.sum(gemm(Xc, W, "packed_isolated(4,16)") != ref))
            cases += ref.size
        if n <= 3:
            for x in X:
                for w in W.T:
                    bad += wrapped_dot(x, w, 4) != int(wrap(int(x @ w), 4))
    secs = time.perf_counter() - t0
    ok = bad == 0 and secs < 60
    criterion(1, ok, f"{bad} mismatches over 2x10^5 random + {cases} exhaustive b=4 cases in {secs:.1f}s")
    assert ok


def test_criterion_2_carry_count(criterion):
    rng = np.random.default_rng(102)
    bad = 0
    for _ in range(100_000):
        b = int(rng.choice([4, 8, 12]))
        v = rng.integers(-(1 << (b - 1)), 1 << (b - 1), size=int(rng.integers(1, 65)))
        c, r = carry_count(v, b)
        u = sum(int(p) + (1 << b) if p < 0 else int(p) for p in v)
        bad += r != (u + c) % (1 << b)
        bad += (c, r) != end_around_register(v.tolist(), b)
    # batched variant agrees with the scalar one
    v = rng.integers(-128, 128, size=(2000, 64))
    cb, rb = carry_count_batch(v, 8)
    bad += sum((int(cb[i]), int(rb[i])) != carry_count(v[i], 8) for i in range(2000))
    criterion(2, bad == 0, f"{bad} mismatches over 10^5 vectors (b in 4/8/12, length <= 64)")
    assert bad == 0


def test_criterion_3_buffer_bit(criterion):
    # W=16, b=8: two lanes of 7-bit values; every pair of words
    words = np.array([v0 | (v1 << 8) for v1 in range(128) for v0 in range(128)], dtype=np.uint64)
    lo, hi = words & np.uint64(0x7F), words >> np.uint64(8)
    bad = 0
    for i in range(len(words)):
        got = buffered_add_payload(words[i], words, 16, 8)
        want = ((lo[i] + lo) & np.uint64(0x7F)) | (((hi[i] + hi) & np.uint64(0x7F)) << np.uint64(8))
        bad += int(np.count_nonzero(got != want))
    ok = bad == 0
    criterion(3, ok, f"{bad} mismatches over all {len(words) ** 2} word pairs (W=16, b=8)")
    assert ok


def test_criterion_4_cyclic_properties(criterion):
    failures = []
    for b in range(2, 13):
        half = 1 << (b - 1)
        z = np.arange(-half, half)
        # dyadic reals: shifting by a period is exact in floating point
        zr = np.round(np.random.default_rng(b).uniform(-4 * half, 4 * half, 10_000) * 1024) / 1024
        for k in (1.0, 2.0, 3.0, 10.0, math.inf):
            spec = CyclicSpec(b, k)
            for pts in (z, zr):
                if not np.array_equal(cyclic_apply(pts, spec), cyclic_apply(pts + (1 << b), spec)):
                    failures.append(f"periodicity b={b} k={k}")
            if math.isinf(k):
                if not np.array_equal(cyclic_apply(z, spec), wrap(z, b)):
                    failures.append(f"k=inf vs wrap b={b}")
                continue
            bound = k / (k + 1) * half
            grid = np.linspace(-half, half, 100_001)
            if np.max(np.abs(cyclic_apply(grid, spec))) > bound * (1 + 1e-12):
                failures.append(f"range b={b} k={k}")
            if not math.isclose(float(cyclic_apply(spec.boundary, spec)), bound, rel_tol=1e-12):
                failures.append(f"attainment b={b} k={k}")
            if not np.array_equal(cyclic_apply(-zr, spec), -cyclic_apply(zr, spec)):
                failures.append(f"odd symmetry b={b} k={k}")
            eps = 1e-6 * half
            kinks = kink_points(spec)
            gap = np.abs(cyclic_apply(kinks - eps, spec) - cyclic_apply(kinks + eps, spec))
            if np.any(gap > (1 + k) * eps * (1 + 1e-9)):
                failures.append(f"continuity b={b} k={k}")
    ok = not failures
    criterion(4, ok, "b=2..12, k in {1,2,3,10,inf}: " + ("all properties hold" if ok else ", ".join(failures[:5])))
    assert ok


def test_criterion_5_gradient_audit(criterion):
    rng = np.random.default_rng(105)
    worst = {}
    # cyclic_apply: every kind, 10^4 points each, away from kinks
    h = 1e-4
    for kind in ("smooth_modulo", "relu_like", "absolute", "pure_modulo"):
        spec = CyclicSpec(8, 2.0, kind)
        z = rng.uniform(-1024, 1024, 12_000)
        dist = np.min(np.abs(fold(z, 8)[:, None] - kink_points(spec)[None, :]), axis=1)
        z = z[dist > 10 * h][:10_000]
        fd = (cyclic_apply(z + h, spec) - cyclic_apply(z - h, spec)) / (2 * h)
        an = cyclic_derivative(z, spec)
        t = ad.parameter(z)
        ad.sum_all(ad.cyclic(t, spec)).backward()
        worst[f"cyclic/{kind}"] = float(max(np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1.0))
                                            for g in (an, t.grad)))
    # overflow penalty (mean hinge): gradient of each point alone
    z = rng.uniform(-400, 400, 10_000)
    z = z[np.abs(np.abs(z) - 128) > 10 * h]
    errs = []
    for zi in z:
        _, g = overflow_penalty(np.array([zi]), 8)
        fd = (overflow_penalty(np.array([zi + h]), 8)[0] - overflow_penalty(np.array([zi - h]), 8)[0]) / (2 * h)
        errs.append(abs(fd - g[0]) / max(abs(g[0]), 1.0))
    worst["overflow_penalty"] = float(max(errs))
    # soft carry count: 1000 vectors x 10 coordinates
    h = 1e-5
    errs = []
    for _ in range(1000):
        v = rng.uniform(-20, 20, 10)
        _, g = soft_carry_count(v, 8, 1.0)
        for i in range(10):
            e = np.zeros(10)
            e[i] = h
            fd = (relaxed_carry(v + e, 8, 1.0) - relaxed_carry(v - e, 8, 1.0)) / (2 * h)
            errs.append(abs(fd - g[i]) / max(abs(g[i]), 1e-6))
    worst["soft_carry_count"] = float(max(errs))
    ok = all(v < 1e-4 for v in worst.values())
    criterion(5, ok, "max rel. err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert ok


@pytest.mark.slow
def test_criterion_6_wrapping_gap(desk, criterion):
    t0 = time.perf_counter()
    exact, wrapped8, wrapnet = [], [], []
    for s in SEEDS:
        conv = desk.run(s, **CONVENTIONAL)
        exact.append(accuracy(conv.model, desk.data[s], "exact32"))
        wrapped8.append(accuracy(conv.model, desk.data[s], "wrapped(8)"))
        wrapnet.append(desk.run(s).summary["acc_wrapped"])
    secs = time.perf_counter() - t0
    loss = 100 * (np.mean(exact) - np.mean(wrapped8))
    gap = 100 * (np.mean(exact) - np.mean(wrapnet))
    ok = loss >= 30 and gap <= 2 and secs < 600
    criterion(6, ok, f"conventional 32-bit {100 * np.mean(exact):.2f}% -> 8-bit wrapped "
                     f"{100 * np.mean(wrapped8):.2f}% (loss {loss:.1f} pts); WrapNet 8-bit "
                     f"{100 * np.mean(wrapnet):.2f}% (gap {gap:.2f} pts); {secs:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_slope(desk, criterion):
    # the default run uses k=2
    acc = {2.0: [desk.run(s).summary["acc_wrapped"] for s in SEEDS],
           10.0: [desk.run(s, slope=10.0).summary["acc_wrapped"] for s in SEEDS]}
    inf_runs = [desk.run(s, slope=math.inf) for s in SEEDS]
    diverged = [isinstance(r, DivergenceError) for r in inf_runs]
    inf_acc = [None if d else round(100 * r.summary["acc_wrapped"], 1) for r, d in zip(inf_runs, diverged)]
    order_ok = np.mean(acc[2.0]) >= np.mean(acc[10.0])
    ok = order_ok and all(diverged)
    criterion(7, ok, f"k=2 {100 * np.mean(acc[2.0]):.2f}% vs k=10 {100 * np.mean(acc[10.0]):.2f}% "
                     f"({'ok' if order_ok else 'order violated'}); k=inf diverged on "
                     f"{sum(diverged)}/5 seeds (final 8-bit acc {inf_acc})")
    assert order_ok, "k=2 should not be worse than k=10"
    assert all(diverged), f"k=inf did not trigger the divergence detector: {inf_acc}"


@pytest.mark.slow
def test_criterion_8_calibration(desk, criterion):
    problems, bits_by_p = [], {}
    for s in SEEDS:
        model = desk.run(s).model
        x = desk.data[s].x_train[:2000]
        for p in (0, 2, 5, 10, 20):
            _, rows = calibrate_model(model, x, p)
            bits_by_p.setdefault(p, []).append([r["act_bits"] for r in rows])
            for r in rows:
                if p and abs(100 * r["rate"] - p) > 1.0:
                    problems.append(f"seed {s} {r['layer']} p={p}: {100 * r['rate']:.2f}%")
    minimal = all(np.all(np.array(bits_by_p[0]) <= np.array(bits_by_p[p])) for p in (2, 5, 10, 20))
    ok = not problems and minimal
    mean_bits = {p: round(float(np.mean(v)), 2) for p, v in bits_by_p.items()}
    criterion(8, ok, f"rates within 1% of target: {not problems}; mean activation bits by p {mean_bits}"
              + (f"; {problems[:3]}" if problems else ""))
    assert ok


@pytest.mark.slow
def test_criterion_9_regularizers(desk, criterion):
    ov = {lam: np.mean([desk.run(s, **({} if lam else {"lambda_overflow": 0.0})).summary["overflow_rate"]
                        for s in SEEDS]) for lam in (0.0, 0.01)}
    std0 = np.mean([desk.run(s).summary["carry_std"] for s in SEEDS])
    std1 = np.mean([desk.run(s, **CARRY).summary["carry_std"] for s in SEEDS])
    acc = {m: np.mean([desk.run(s, carry_adaptation=m, **CARRY).summary["acc_packed"] for s in SEEDS])
           for m in ("carry", "hybrid")}
    cut = 1 - std1 / std0
    checks = [ov[0.01] < ov[0.0], cut >= 0.5, acc["hybrid"] >= acc["carry"]]
    ok = all(checks)
    criterion(9, ok, f"overflow rate {100 * ov[0.0]:.2f}% -> {100 * ov[0.01]:.2f}%; carry std "
                     f"{std0:.2f} -> {std1:.2f} ({100 * cut:.0f}% lower); packed acc hybrid "
                     f"{100 * acc['hybrid']:.2f}% vs carry-only {100 * acc['carry']:.2f}%")
    assert ok


def test_criterion_10_benchmark(tmp_path, criterion):
    from wrapnet.cli import main
    base = bench_gemm((256, 256, 256), "wrapped(32)", repetitions=7)
    packed = bench_gemm((256, 256, 256), "packed_isolated(8,64)", repetitions=7)
    ratio = base.median_ns / packed.median_ns
    rc = main(["bench", "--reps", "1", "--out", str(tmp_path)])
    rows = (tmp_path / "ratios.csv").read_text().splitlines()[1:]
    shapes = {r.split(",")[0] for r in rows}
    table_ok = rc == 0 and shapes == {"x".join(map(str, s)) for s in PRESETS.values()}
    ok = ratio >= 1.5 and table_ok
    criterion(10, ok, f"packed_isolated(8,64) vs wrapped(32) on 256^3 ({packed.backend}): {ratio:.2f}x; "
                      f"ratio table for {len(shapes)} preset shapes")
    assert table_ok
    assert ratio >= 1.5
