from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neuralfuse import quant
from neuralfuse.graph import Graph
from neuralfuse.quant import QuantizedWeights


def exact_codes(w, b):
    # rational-arithmetic oracle for round-half-away(W / s), s = max|W| / qmax
    w = [Fraction(v) for v in w]
    s = max(abs(v) for v in w) / (2 ** (b - 1) - 1)
    out = []
    for v in w:
        r = abs(v / s)
        n = int(r) + (1 if r - int(r) >= Fraction(1, 2) else 0)
        out.append(n if v >= 0 else -n)
    return s, out


@pytest.mark.parametrize("b,scale,codes", [(8, 3 / 127, [-85, 42, 127]), (2, 3.0, [-1, 0, 1])])
def test_worked_examples(b, scale, codes):
    q = quant.quantize(np.array([-2.0, 1.0, 3.0]), b)
    s, oracle = exact_codes([-2, 1, 3], b)
    assert q.codes.tolist() == codes == oracle
    assert q.scale == pytest.approx(scale) == pytest.approx(float(s))


def test_all_zero_layer():
    q = quant.quantize(np.zeros((2, 3)), 4)
    assert q.scale == 1.0 and not q.codes.any()


def test_half_away_from_zero():
    assert quant.round_half_away(np.array([-2.5, -0.5, 0.5, 1.5, 2.4])).tolist() == [-3, -1, 1, 2, 2]


@pytest.mark.parametrize("b", [1, 9, 0])
def test_bits_out_of_range(b):
    with pytest.raises(ValueError):
        quant.quantize(np.ones(3), b)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        quant.quantize(np.array([1.0, np.nan]), 8)


def test_dequantize_examples():
    assert quant.dequantize(QuantizedWeights(np.array([127], np.int16), 3 / 127, 8))[0] == pytest.approx(3.0)
    assert quant.dequantize(QuantizedWeights(np.array([-128], np.int16), 1.0, 8))[0] == -128.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3)), st.integers(2, 8))
def test_quantization_properties(w, b):
    q = quant.quantize(w, b)
    qm = 2 ** (b - 1) - 1
    assert q.codes.min() >= -qm and q.codes.max() <= qm
    if np.abs(w).max() > 0:
        assert q.scale > 0 and np.abs(q.codes).max() == qm
        assert np.all(np.abs(w - quant.dequantize(q)) <= q.scale / 2 * (1 + 1e-9))


def test_codes_match_rational_oracle():
    rng = np.random.default_rng(0)
    for b in range(2, 9):
        w = rng.standard_normal(50)
        _, oracle = exact_codes(w.tolist(), b)
        assert quant.quantize(w, b).codes.tolist() == oracle


def test_encode_examples():
    assert quant.encode_bits(3, 8) == [0, 0, 0, 0, 0, 0, 1, 1]
    assert quant.encode_bits(-125, 8) == [1, 0, 0, 0, 0, 0, 1, 1]


@pytest.mark.parametrize("b", range(2, 9))
def test_codec_exhaustive(b):
    for code in range(-(2 ** (b - 1)), 2 ** (b - 1)):
        bits = quant.encode_bits(code, b)
        assert len(bits) == b and quant.decode_bits(bits, b) == code
    codes = np.arange(-(2 ** (b - 1)), 2 ** (b - 1))
    words = quant.to_unsigned(codes, b)
    assert sorted(words.tolist()) == list(range(2 ** b))
    np.testing.assert_array_equal(quant.from_unsigned(words, b), codes)


def test_codec_errors():
    with pytest.raises(ValueError):
        quant.encode_bits(128, 8)
    with pytest.raises(ValueError):
        quant.encode_bits(-3, 2)
    with pytest.raises(ValueError):
        quant.decode_bits([0, 1], 3)


def test_model_quantization_skips_bias_and_bn():
    g = Graph((3, 4, 4))
    g.add("conv2d", out_channels=2, kernel=3, stride=1, padding=1, name="c")
    g.add("batchnorm", name="bn")
    g.add("linear", out_features=2, name="fc")
    assert sorted(quant.quantize_model(g, 8)) == ["c.weight", "fc.weight"]


def test_fake_quantize_is_idempotent():
    w = np.random.default_rng(1).standard_normal(100)
    once = quant.fake_quantize(w, 5)
    np.testing.assert_allclose(quant.fake_quantize(once, 5), once, rtol=0, atol=1e-12)
