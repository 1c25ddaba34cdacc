import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wrapnet.cyclic import KINDS, CyclicSpec, cyclic_apply, cyclic_derivative, fold, kink_points
from wrapnet.errors import InvalidSchemeError
from wrapnet.fxp import wrap


def c(z, bits, k=2.0, kind="smooth_modulo"):
    return float(cyclic_apply(z, CyclicSpec(bits, k, kind)))


class TestSpec:
    def test_boundary(self):
        assert CyclicSpec(8, 2).boundary == pytest.approx(256 / 3)
        assert CyclicSpec(4, 1).boundary == 4.0

    def test_infinite_slope_is_pure_modulo(self):
        assert CyclicSpec(8, math.inf).kind == "pure_modulo"

    @pytest.mark.parametrize("kw", [dict(bits=1), dict(bits=8, slope=0.5), dict(bits=8, kind="sine")])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSchemeError):
            CyclicSpec(**kw)

    def test_dict_roundtrip(self):
        for spec in (CyclicSpec(8, 2.0), CyclicSpec(12, math.inf), CyclicSpec(6, 3.5, "relu_like")):
            assert CyclicSpec.from_dict(spec.to_dict()) == spec
        assert CyclicSpec(8, math.inf).to_dict()["slope"] == "inf"


class TestExamples:
    def test_values(self):
        assert c(0, 4, 1) == 0
        assert c(6, 4, 1) == 2
        assert c(8, 4, 1) == 0
        assert c(22, 4, 1) == 2
        assert c(100, 8, 2) == 56

    def test_derivatives(self):
        d = lambda z, b, k: float(cyclic_derivative(z, CyclicSpec(b, k)))
        assert d(10, 8, 2) == 1
        assert d(100, 8, 2) == -2
        assert d(22, 4, 1) == -1

    def test_other_kinds(self):
        assert c(-5, 8, kind="absolute") == 5
        assert c(200, 8, kind="absolute") == 56
        assert c(-5, 8, 2, "relu_like") == 0
        assert c(50, 8, 2, "relu_like") == 50
        assert c(100, 8, 2, "relu_like") == 56
        assert c(130, 8, kind="pure_modulo") == -126

    def test_fold_matches_wrap(self):
        z = np.arange(-1000, 1000)
        np.testing.assert_array_equal(fold(z, 8), wrap(z, 8))


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("bits", [4, 8, 12])
class TestInvariants:
    def test_periodicity_exhaustive(self, kind, bits):
        spec = CyclicSpec(bits, 2.0, kind)
        z = np.arange(-(1 << (bits + 2)), (1 << (bits + 2)) + 1)
        np.testing.assert_array_equal(cyclic_apply(z, spec), cyclic_apply(z + (1 << bits), spec))

    def test_continuity_at_kinks(self, kind, bits):
        if kind == "pure_modulo":
            pytest.skip("the modulo seam is a jump by construction")
        for k in (1.0, 2.0, 10.0):
            spec = CyclicSpec(bits, k, kind)
            eps = 1e-6
            kinks = kink_points(spec)
            gaps = np.abs(cyclic_apply(kinks - eps, spec) - cyclic_apply(kinks + eps, spec))
            assert np.all(gaps <= (1 + k) * eps * (1 + 1e-6))


class TestSmoothModulo:
    @pytest.mark.parametrize("bits", [4, 8, 12])
    @pytest.mark.parametrize("k", [1.0, 2.0, 3.0, 10.0])
    def test_range_and_attainment(self, bits, k):
        spec = CyclicSpec(bits, k)
        z = np.linspace(-(1 << bits), 1 << bits, 200_001)
        vals = cyclic_apply(z, spec)
        bound = k / (k + 1) * (1 << (bits - 1))
        assert np.max(np.abs(vals)) <= bound + 1e-9
        assert float(cyclic_apply(spec.boundary, spec)) == pytest.approx(bound)
        assert float(cyclic_apply(-spec.boundary, spec)) == pytest.approx(-bound)

    def test_half_range_at_k1(self):
        spec = CyclicSpec(8, 1.0)
        vals = cyclic_apply(np.arange(-256, 256), spec)
        assert vals.max() == 64 and vals.min() == -64

    @given(st.integers(-2 ** 20, 2 ** 20), st.integers(3, 16), st.sampled_from([1.0, 2.0, 5.0]))
    def test_odd_symmetry(self, z, bits, k):
        spec = CyclicSpec(bits, k)
        assert float(cyclic_apply(-z, spec)) == -float(cyclic_apply(z, spec))

    @pytest.mark.parametrize("bits", [4, 8, 12])
    def test_infinite_slope_equals_wrap(self, bits):
        z = np.arange(-(1 << (bits + 1)), 1 << (bits + 1))
        np.testing.assert_array_equal(cyclic_apply(z, CyclicSpec(bits, math.inf)), wrap(z, bits))

    @pytest.mark.parametrize("bits", [4, 8])
    def test_large_slope_limit(self, bits):
        half = 1 << (bits - 1)
        z = np.random.default_rng(1).uniform(-4 * half, 4 * half, 100_000)
        m = fold(z, bits)
        away = np.abs(np.abs(m) - half) > 1e-6 * half
        got = cyclic_apply(z, CyclicSpec(bits, 1e6))
        assert np.max(np.abs(got - m)[away]) <= half * 1e-5


@pytest.mark.parametrize("kind", KINDS)
def test_derivative_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    spec = CyclicSpec(8, 2.0, kind)
    z = rng.uniform(-1024, 1024, 10_000)
    m = fold(z, 8)
    dist = np.min(np.abs(m[:, None] - kink_points(spec)[None, :]), axis=1)
    z = z[dist >= 1e-3]
    h = 1e-4
    fd = (cyclic_apply(z + h, spec) - cyclic_apply(z - h, spec)) / (2 * h)
    an = cyclic_derivative(z, spec)
    assert np.max(np.abs(fd - an) / np.maximum(np.abs(an), 1.0)) < 1e-4


def test_left_slope_at_kinks():
    spec = CyclicSpec(8, 2.0)
    M = spec.boundary
    assert float(cyclic_derivative(M, spec)) == 1.0
    assert float(cyclic_derivative(-M, spec)) == -2.0
