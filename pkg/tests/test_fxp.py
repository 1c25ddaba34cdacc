import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wrapnet.errors import (DegenerateScaleError, InvalidSchemeError, RangeError,
                            ShapeMismatchError)
from wrapnet.fxp import (AccumulatorSpec, FixedTensor, QuantScheme, decode_int_blob,
                         encode_int_blob, exact_dot, quantize_binary, quantize_ternary,
                         quantize_uniform, round_half_away, to_signed, to_unsigned, wrap,
                         wrapped_dot)


def _oracle_wrap(z, b):
    """Textbook definition on Python ints."""
    return ((z + 2 ** (b - 1)) % 2 ** b) - 2 ** (b - 1)


class TestQuantScheme:
    def test_ranges(self):
        assert (QuantScheme(1.0, 8).qmin, QuantScheme(1.0, 8).qmax) == (-128, 127)
        assert (QuantScheme(1.0, 3, signed=False).qmin, QuantScheme(1.0, 3, signed=False).qmax) == (0, 7)
        assert (QuantScheme(1.0, 1, kind="binary").qmin, QuantScheme(1.0, 1, kind="binary").qmax) == (-1, 1)

    @pytest.mark.parametrize("step", [0.0, -1.0, float("nan"), float("inf")])
    def test_bad_step(self, step):
        with pytest.raises(InvalidSchemeError):
            QuantScheme(step, 8)

    @pytest.mark.parametrize("bits,kind", [(0, "uniform"), (17, "uniform"), (2, "binary"), (1, "ternary")])
    def test_bad_bits(self, bits, kind):
        with pytest.raises(InvalidSchemeError):
            QuantScheme(1.0, bits, kind=kind)


class TestFixedTensor:
    def test_range_enforced(self):
        with pytest.raises(RangeError):
            FixedTensor(np.array([128]), QuantScheme(1.0, 8))

    def test_shape_checked(self):
        with pytest.raises(ShapeMismatchError):
            FixedTensor(np.arange(6), QuantScheme(1.0, 8), shape=(4, 2))
        t = FixedTensor(np.arange(6), QuantScheme(1.0, 8), shape=(2, 3))
        assert t.values.shape == (2, 3)

    def test_non_integral_rejected(self):
        with pytest.raises(RangeError):
            FixedTensor(np.array([0.5]), QuantScheme(1.0, 8))

    def test_immutable(self):
        t = FixedTensor(np.arange(3), QuantScheme(1.0, 8))
        with pytest.raises(ValueError):
            t.values[0] = 5

    def test_blob_roundtrip(self):
        s = QuantScheme(0.25, 12)
        t = FixedTensor(np.arange(-12, 12).reshape(2, 3, 4), s)
        back = FixedTensor.from_bytes(t.to_bytes(), s)
        assert back.shape == (2, 3, 4)
        np.testing.assert_array_equal(back.values, t.values)

    def test_blob_layout(self):
        blob = encode_int_blob(np.array([[1, -1]]))
        assert blob == (b"\x02\x00\x00\x00" b"\x01\x00\x00\x00" b"\x02\x00\x00\x00"
                        b"\x01\x00\x00\x00" b"\xff\xff\xff\xff")
        with pytest.raises(RangeError):
            decode_int_blob(blob[:-1])


class TestQuantizers:
    @pytest.mark.parametrize("x,q", [(0.0, 0), (1.3, 3), (-1.3, -3), (0.25, 1), (-0.25, -1)])
    def test_uniform_examples(self, x, q):
        t = quantize_uniform(x, QuantScheme(0.5, 8))
        assert int(t.values) == q
        assert t.dequantize() == pytest.approx(q * 0.5)

    def test_uniform_clamps(self):
        t = quantize_uniform(np.array([-5.0, 100.0]), QuantScheme(1.0, 3, signed=False))
        np.testing.assert_array_equal(t.values, [0, 7])

    def test_uniform_rejects_binary_scheme(self):
        with pytest.raises(InvalidSchemeError):
            quantize_uniform(1.0, QuantScheme(1.0, 1, kind="binary"))

    def test_uniform_idempotent(self):
        s = QuantScheme(0.37, 6)
        x = np.random.default_rng(0).normal(scale=5, size=1000)
        once = quantize_uniform(x, s)
        np.testing.assert_array_equal(quantize_uniform(once.dequantize(), s).values, once.values)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50), st.floats(1e-3, 10.0))
    def test_uniform_monotone(self, xs, step):
        xs = np.sort(np.array(xs))
        q = quantize_uniform(xs, QuantScheme(step, 10)).values
        assert np.all(np.diff(q) >= 0)

    def test_round_half_away(self):
        np.testing.assert_array_equal(round_half_away([0.5, 1.5, -0.5, -2.5, 2.4]), [1, 2, -1, -3, 2])

    @pytest.mark.parametrize("w,q,scale", [
        ([0.3, -0.4], [1, -1], 0.35),
        ([1.0, 1.0, 1.0], [1, 1, 1], 1.0),
        ([-2.0, 2.0], [-1, 1], 2.0),
    ])
    def test_binary_examples(self, w, q, scale):
        t, s = quantize_binary(w)
        np.testing.assert_array_equal(t.values, q)
        assert s == pytest.approx(scale)
        assert t.scheme.step_size == pytest.approx(scale)

    def test_binary_degenerate(self):
        with pytest.raises(DegenerateScaleError):
            quantize_binary([0.0, 0.0])
        with pytest.raises(DegenerateScaleError):
            quantize_binary([])

    @pytest.mark.parametrize("w,q,scale", [
        ([0.05, 0.9, -0.8], [0, 1, -1], 0.85),
        ([0.0, 0.0, 1.0], [0, 0, 1], 1.0),
        ([0.4, 0.4, 0.4], [1, 1, 1], 0.4),
    ])
    def test_ternary_examples(self, w, q, scale):
        t, s = quantize_ternary(w)
        np.testing.assert_array_equal(t.values, q)
        assert s == pytest.approx(scale)

    def test_ternary_degenerate(self):
        with pytest.raises(DegenerateScaleError):
            quantize_ternary(np.zeros(4))


class TestWrap:
    @pytest.mark.parametrize("z,out", [(127, 127), (130, -126), (-129, 127), (-128, -128), (128, -128)])
    def test_examples(self, z, out):
        assert wrap(z, 8) == out
        assert int(wrap(np.array([z]), 8)[0]) == out

    def test_accumulator_spec(self):
        assert AccumulatorSpec(8).period == 256
        assert AccumulatorSpec(8).wrap(300) == 44
        with pytest.raises(InvalidSchemeError):
            AccumulatorSpec(3)

    @given(st.integers(-2 ** 40, 2 ** 40), st.integers(-2 ** 40, 2 ** 40), st.integers(2, 32))
    def test_ring_homomorphism(self, a, c, b):
        assert wrap(a + c, b) == wrap(wrap(a, b) + wrap(c, b), b)
        assert wrap(a, b) == _oracle_wrap(a, b)

    def test_float_inputs(self):
        np.testing.assert_allclose(wrap(np.array([130.5, -129.0]), 8), [-125.5, 127.0])


class TestDot:
    def test_examples(self):
        assert exact_dot([1, 1], [1, -1]) == 0 and wrapped_dot([1, 1], [1, -1], 8) == 0
        assert exact_dot([100] * 3, [1] * 3) == 300
        assert wrapped_dot([100] * 3, [1] * 3, 8) == 44
        assert exact_dot([-1] * 300, [1] * 300) == -300
        assert wrapped_dot([-1] * 300, [1] * 300, 8) == -44

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            exact_dot([1, 2], [1])

    def test_stepwise_register(self):
        # a register that wraps after every addition gives the same answer
        rng = np.random.default_rng(3)
        for _ in range(200):
            x = rng.integers(-128, 128, size=50)
            w = rng.integers(-128, 128, size=50)
            acc = 0
            for xi, wi in zip(x, w):
                acc = _oracle_wrap(acc + int(xi) * int(wi), 8)
            assert wrapped_dot(x, w, 8) == acc

    @settings(max_examples=200)
    @given(st.integers(4, 16).flatmap(lambda b: st.tuples(
        st.just(b), st.lists(st.tuples(st.integers(-2 ** (b - 1), 2 ** (b - 1) - 1),
                                       st.integers(-2 ** (b - 1), 2 ** (b - 1) - 1)),
                             min_size=1, max_size=64))))
    def test_oracle_identity(self, case):
        b, pairs = case
        x, w = map(list, zip(*pairs))
        exact = sum(a * c for a, c in pairs)
        assert exact_dot(x, w) == exact
        assert wrapped_dot(x, w, b) == _oracle_wrap(exact, b)


class TestSignedness:
    @pytest.mark.parametrize("v,u", [(-1, 255), (0, 0), (-128, 128), (127, 127)])
    def test_examples(self, v, u):
        assert to_unsigned(v, 8) == u
        assert to_signed(u, 8) == v

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            to_unsigned(128, 8)
        with pytest.raises(RangeError):
            to_signed(256, 8)

    @pytest.mark.parametrize("b", [4, 8, 12])
    def test_roundtrip_exhaustive(self, b):
        u = np.arange(2 ** b)
        np.testing.assert_array_equal(to_unsigned(to_signed(u, b), b), u)
