import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neuralfuse import quant
from neuralfuse.faults import (BitErrorSpec, QuantizedModel, VoltageCurve, apply_bit_errors,
                               sample_flip_mask, sample_perturbed_model, stream_rng, voltage_curve)
from neuralfuse.models import build_base
from neuralfuse.quant import QuantizedWeights


def flips(mask):
    return int(np.unpackbits(mask.astype(np.uint8)).sum())


def q8(codes):
    return QuantizedWeights(np.asarray(codes, dtype=np.int16), 1.0, 8)


def test_degenerate_rates():
    assert not sample_flip_mask((10, 3), BitErrorSpec(0.0, 1), 0).any()
    assert (sample_flip_mask((10, 3), BitErrorSpec(1.0, 1), 0) == 0xFF).all()
    assert (sample_flip_mask((4,), BitErrorSpec(1.0, 1, 3), 0) == 0b111).all()


def test_rate_seed42():
    m = sample_flip_mask((125_000,), BitErrorSpec(0.01, 42), 0)
    assert 0.0097 <= flips(m) / 1e6 <= 0.0103


@pytest.mark.parametrize("p", [0.001, 0.005, 0.01])
def test_rate_within_three_sigma(p):
    n = 1_000_000
    bound = 3 * math.sqrt(p * (1 - p) / n)
    for seed in range(10):
        m = sample_flip_mask((n // 8,), BitErrorSpec(p, seed), ("stats", seed))
        assert abs(flips(m) / n - p) <= bound


def test_mask_is_deterministic_and_keyed():
    spec = BitErrorSpec(0.3, 7)
    a = sample_flip_mask((500,), spec, ("eval", "m", "w", 0))
    np.testing.assert_array_equal(a, sample_flip_mask((500,), spec, ("eval", "m", "w", 0)))
    assert (a != sample_flip_mask((500,), spec, ("eval", "m", "w", 1))).any()
    assert (a != sample_flip_mask((500,), spec, ("train", "m", "w", 0))).any()
    assert (a != sample_flip_mask((500,), BitErrorSpec(0.3, 8), ("eval", "m", "w", 0))).any()


def test_stream_rng_namespaces_differ():
    x = stream_rng(0, "train", 3).random(8)
    y = stream_rng(0, "eval", 3).random(8)
    assert not np.array_equal(x, y)


def test_flip_sign_bit_example():
    mask = np.array([0x80], dtype=np.uint8)
    assert apply_bit_errors(q8([3]), mask).codes.tolist() == [-125]


def test_single_bit_flip_exhaustive():
    codes = np.arange(-128, 128)
    for k in range(8):
        mask = np.full(codes.shape, 1 << k, dtype=np.uint8)
        out = apply_bit_errors(q8(codes), mask).codes.astype(int)
        assert np.all(np.abs(out - codes) == 2 ** k)
        # clearing a magnitude bit lowers the value by 2^k; the sign bit weighs -2^7
        bit_set = (quant.to_unsigned(codes, 8) >> k) & 1
        weight = -(2 ** k) if k == 7 else 2 ** k
        np.testing.assert_array_equal(out - codes, np.where(bit_set, -weight, weight))


@given(st.lists(st.integers(-128, 127), min_size=1, max_size=50), st.data())
def test_xor_involution(codes, data):
    mask = np.array(data.draw(st.lists(st.integers(0, 255), min_size=len(codes), max_size=len(codes))),
                    dtype=np.uint8)
    q = q8(codes)
    twice = apply_bit_errors(apply_bit_errors(q, mask), mask)
    np.testing.assert_array_equal(twice.codes, q.codes)


@pytest.mark.parametrize("b", range(2, 9))
def test_low_precision_flips_stay_in_range(b):
    codes = np.arange(-(2 ** (b - 1)), 2 ** (b - 1))
    q = QuantizedWeights(codes.astype(np.int16), 1.0, b)
    mask = sample_flip_mask(codes.shape, BitErrorSpec(0.5, 0, b), 0)
    out = apply_bit_errors(q, mask).codes
    assert out.min() >= -(2 ** (b - 1)) and out.max() < 2 ** (b - 1)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        apply_bit_errors(q8([1, 2]), np.zeros(3, dtype=np.uint8))


def test_bad_rate():
    with pytest.raises(ValueError):
        BitErrorSpec(1.5)


@pytest.fixture(scope="module")
def base():
    g = build_base("tinycnn-a", (3, 16, 16), 4, seed=0)
    return QuantizedModel.from_graph(g, 8, "tiny")


def test_p0_perturbed_equals_quantized(base):
    x = np.random.default_rng(0).uniform(-1, 1, (3, 3, 16, 16))
    m = sample_perturbed_model(base, BitErrorSpec(0.0, 3), 5)
    np.testing.assert_array_equal(m.forward(x).data, base.forward(x).data)


def test_perturbed_model_deterministic_and_base_untouched(base):
    before = {k: q.codes.copy() for k, q in base.qweights.items()}
    fbefore = base.graph.state()
    x = np.random.default_rng(1).uniform(-1, 1, (2, 3, 16, 16))
    spec = BitErrorSpec(0.05, 11)
    a = sample_perturbed_model(base, spec, 2).forward(x).data
    b = sample_perturbed_model(base, spec, 2).forward(x).data
    assert a.tobytes() == b.tobytes()
    for k, q in base.qweights.items():
        np.testing.assert_array_equal(q.codes, before[k])
    for k, v in base.graph.state().items():
        assert v.tobytes() == fbefore[k].tobytes()


def test_indices_give_different_masks(base):
    spec = BitErrorSpec(0.01, 0)
    m0, m1 = (sample_perturbed_model(base, spec, i) for i in (0, 1))
    assert sum(m.size * 8 for m in m0.masks.values()) >= 1000
    assert any((m0.masks[k] != m1.masks[k]).any() for k in m0.masks)


def test_only_weights_differ(base):
    m = sample_perturbed_model(base, BitErrorSpec(0.1, 0), 0)
    assert set(m.qweights) == set(base.qweights)
    assert all(k.endswith(".weight") for k in m.qweights)


# ---------------------------------------------------------------- voltage

def test_voltage_anchors():
    assert voltage_curve(1.0).ber == 0 and voltage_curve(1.0).energy_ratio == 1.0
    p = voltage_curve(0.83)
    assert p.ber == pytest.approx(0.01) and p.energy_ratio == pytest.approx(0.6936)


@pytest.mark.parametrize("v", [0.49, 1.21])
def test_voltage_range(v):
    with pytest.raises(ValueError):
        voltage_curve(v)


def test_voltage_monotone():
    vs = np.linspace(0.5, 1.2, 141)
    pts = [voltage_curve(v) for v in vs]
    bers = [p.ber for p in pts]
    es = [p.energy_ratio for p in pts]
    assert all(a >= b for a, b in zip(bers, bers[1:]))
    assert all(a <= b for a, b in zip(es, es[1:]))
    assert all(0 <= b <= 0.5 for b in bers)


def test_voltage_for_ber_inverts_curve():
    c = VoltageCurve()
    for p in (0.001, 0.005, 0.01, 0.05):
        assert c.ber(c.voltage_for_ber(p)) == pytest.approx(p, rel=1e-6)
    assert c.voltage_for_ber(0.01) == pytest.approx(0.83, abs=1e-8)


def test_custom_anchors_and_validation():
    c = VoltageCurve([(0.8, 0.02, 0.6), (0.9, 0.001, 0.8), (1.0, 0.0, 1.0)])
    assert c(0.9).ber == pytest.approx(0.001) and c(0.85).ber == pytest.approx(math.sqrt(0.02 * 0.001))
    with pytest.raises(ValueError):
        VoltageCurve([(0.8, 0.001, 0.6), (0.9, 0.01, 0.8)])
