import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wrapnet import autodiff as ad
from wrapnet.cyclic import KINDS, CyclicSpec, fold, kink_points


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` at every entry of ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check(build, *values, rtol=1e-4, atol=1e-8):
    """Compare reverse-mode gradients of ``sum(build(*params))`` with central differences."""
    params = [ad.parameter(v) for v in values]
    out = build(*params)
    loss = ad.sum_all(out) if np.ndim(out.value) else out
    loss.backward()
    for i, p in enumerate(params):
        def f(v, i=i):
            args = [ad.as_tensor(np.array(q.value)) for q in params]
            args[i] = ad.as_tensor(v)
            return float(np.sum(build(*args).value))
        np.testing.assert_allclose(p.grad, numeric_grad(f, p.value.copy()), rtol=rtol, atol=atol)


rng = np.random.default_rng(0)


class TestElementary:
    def test_add_broadcast(self):
        check(lambda a, b: ad.add(a, b), rng.normal(size=(4, 3)), rng.normal(size=(1, 3)))

    def test_mul_broadcast(self):
        check(lambda a, b: ad.mul(a, b), rng.normal(size=(4, 3)), rng.normal(size=(3,)))

    def test_matmul(self):
        check(lambda a, b: ad.matmul(a, b), rng.normal(size=(5, 4)), rng.normal(size=(4, 3)))

    def test_relu_away_from_zero(self):
        x = rng.normal(size=(6, 5))
        x[np.abs(x) < 0.1] = 0.5
        check(lambda a: ad.mul(ad.relu(a), a), x)

    def test_means(self):
        x = rng.normal(size=(6, 3))
        check(lambda a: ad.mul(ad.mean_axis0(a), ad.mean_axis0(a)), x)
        check(lambda a: ad.mean_all(ad.mul(a, a)), x)

    def test_operators(self):
        m = ad.as_tensor(rng.normal(size=(2, 2)))
        check(lambda a, b: (a - b) * a + (-b) + a @ m + (1.0 - a) * 2.0,
              rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))

    def test_shared_subexpression_accumulates(self):
        x = ad.parameter([2.0])
        y = ad.mul(x, x)
        ad.sum_all(ad.add(y, y)).backward()
        assert x.grad[0] == pytest.approx(8.0)

    def test_detach_blocks_gradient(self):
        x = ad.parameter([3.0])
        ad.sum_all(ad.mul(ad.detach(x), x)).backward()
        assert x.grad[0] == pytest.approx(3.0)


class TestLosses:
    def test_cross_entropy(self):
        labels = np.array([0, 2, 1, 2])
        check(lambda z: ad.cross_entropy(z, labels), rng.normal(size=(4, 3)) * 3)

    def test_cross_entropy_value(self):
        # uniform logits give log(classes)
        val = ad.cross_entropy(ad.as_tensor(np.zeros((2, 4))), np.array([1, 3])).value
        assert val == pytest.approx(np.log(4))

    def test_cross_entropy_stable_for_large_logits(self):
        val = ad.cross_entropy(ad.as_tensor(np.array([[1000.0, 0.0]])), np.array([0])).value
        assert np.isfinite(val) and val == pytest.approx(0.0)

    def test_overflow_hinge(self):
        z = rng.uniform(-400, 400, size=(8, 6))
        z[np.abs(np.abs(z) - 128) < 1e-2] = 0.0
        check(lambda a: ad.overflow_hinge(a, 8), z)

    def test_batch_variance_mean(self):
        check(lambda n: ad.batch_variance_mean(n), rng.normal(size=(7, 4)) * 5)


@pytest.mark.parametrize("kind", KINDS)
def test_cyclic_gradient(kind):
    spec = CyclicSpec(8, 2.0, kind)
    z = rng.uniform(-600, 600, size=200)
    m = fold(z, 8)
    keep = np.min(np.abs(m[:, None] - kink_points(spec)[None, :]), axis=1) > 1e-2
    check(lambda a: ad.cyclic(a, spec), z[keep])


class TestCarryCounts:
    @pytest.mark.parametrize("temperature", [0.5, 1.0, 3.0])
    def test_gradient_matches_relaxation(self, temperature):
        r = np.random.default_rng(int(temperature * 10))
        x = r.integers(0, 8, size=(5, 12)).astype(float)
        w = r.integers(-1, 2, size=(12, 4)).astype(float)
        xt, wt = ad.parameter(x), ad.parameter(w)
        g = r.normal(size=(5, 4))
        ad.carry_counts(xt, wt, 8, temperature).backward(g)
        f = lambda which: lambda v: float(np.sum(g * ad.relaxed_carry_total(
            v if which == "x" else x, v if which == "w" else w, 8, temperature)))
        np.testing.assert_allclose(xt.grad, numeric_grad(f("x"), x.copy()), rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(wt.grad, numeric_grad(f("w"), w.copy()), rtol=1e-4, atol=1e-8)

    def test_forward_counts(self):
        # three products of 100 in an 8-bit register carry once
        x = ad.as_tensor(np.array([[100.0, 100.0, 100.0]]))
        w = ad.as_tensor(np.ones((3, 1)))
        assert ad.carry_counts(x, w, 8).value.tolist() == [[1.0]]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_forward_equals_register_count(self, seed):
        from wrapnet.packing import carry_count
        r = np.random.default_rng(seed)
        x = r.integers(0, 16, size=(3, 20))
        w = r.integers(-1, 2, size=(20, 2))
        got = ad.carry_counts(ad.as_tensor(x.astype(float)), ad.as_tensor(w.astype(float)), 8).value
        for i in range(3):
            for j in range(2):
                assert got[i, j] == carry_count(x[i] * w[:, j], 8)[0]


class TestStraightThrough:
    def test_quantize_example(self):
        x = ad.parameter([1.3])
        y = ad.ste_quantize(x, 0.5, -8, 7)
        assert y.value[0] == pytest.approx(1.5)
        ad.sum_all(y).backward()
        assert x.grad[0] == 1.0

    def test_clamped_region_has_zero_gradient(self):
        x = ad.parameter([10.0, -10.0])
        y = ad.ste_quantize(x, 0.5, -8, 7)
        assert y.value.tolist() == [3.5, -4.0]
        ad.sum_all(y).backward()
        assert x.grad.tolist() == [0.0, 0.0]

    def test_chain_rule_through_square(self):
        # d/dx q(x)^2 = 2 q(x) * 1 = 3 at x = 1.3
        x = ad.parameter([1.3])
        q = ad.ste_quantize(x, 0.5, -8, 7)
        ad.sum_all(ad.mul(q, q)).backward()
        assert x.grad[0] == pytest.approx(3.0)

    def test_levels_gradient_scaled(self):
        x = ad.parameter([1.3, 100.0])
        y = ad.ste_levels(x, 0.5, 0, 7)
        assert y.value.tolist() == [3.0, 7.0]
        ad.sum_all(y).backward()
        assert x.grad.tolist() == [2.0, 0.0]

    def test_sign(self):
        w = ad.parameter([-0.3, 0.0, 2.0])
        y = ad.ste_sign(w, scale=0.5, clip=1.0)
        assert y.value.tolist() == [-1.0, 1.0, 1.0]
        ad.sum_all(y).backward()
        assert w.grad.tolist() == [2.0, 2.0, 0.0]
