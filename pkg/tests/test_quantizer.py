import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lobit.metrics import Rng
from lobit.quantizer import (
    SCALE_FLOOR,
    ChannelAffine,
    QuantSpec,
    alt_opt_init,
    channel_errors,
    dequantize,
    effective_bits,
    minmax_init,
    quantize,
    ste_backward,
)


def aff(s, z):
    return ChannelAffine(np.array(s, dtype=np.float64), np.array(z))


def brute_force_best_error(w, spec, lo=0.001, hi=2.0, step=1e-4):
    """Smallest roundtrip l2 error over a fine grid of scales (independent loop code)."""
    L = spec.levels
    z = spec.center
    best = math.inf
    for s in np.arange(lo, hi + step / 2, step):
        err = 0.0
        for x in w:
            r = x / s
            q = math.floor(abs(r) + 0.5) * (1 if r >= 0 else -1)
            code = min(max(q + z, 0), L - 1)
            err += (s * (code - z) - x) ** 2
        best = min(best, err)
    return best


# --- spec / effective bits -------------------------------------------------


def test_levels_and_effective_bits():
    assert QuantSpec(2, True).levels == 5
    assert QuantSpec(2, False).levels == 4
    # a balanced 2-bit layer is a log2(5) = 2.32-bit layer
    assert effective_bits(QuantSpec(2, True)) == pytest.approx(2.3219, abs=1e-4)
    assert abs(effective_bits(QuantSpec(2, True)) - math.log2(5)) <= 1e-12
    assert effective_bits(QuantSpec(1, True)) == pytest.approx(1.585, abs=1e-3)
    assert effective_bits(QuantSpec(4, False)) == 4.0
    with pytest.raises(ValueError):
        QuantSpec(9)


# --- min-max ---------------------------------------------------------------


def test_minmax_balanced_one_bit():
    a = minmax_init(np.array([[-1.0, 0.3, 1.0]]), QuantSpec(1, True))
    assert a.scales[0] == 1.0 and a.zero_offsets[0] == 1


def test_minmax_unbalanced_two_bit():
    a = minmax_init(np.array([[0.0, 1.5, 3.0]]), QuantSpec(2, False))
    assert a.scales[0] == 1.0 and a.zero_offsets[0] == 0


def test_minmax_constant_channel_floored():
    w = np.full((1, 5), 0.7)
    spec = QuantSpec(2, False)
    a = minmax_init(w, spec)
    assert a.scales[0] == SCALE_FLOOR
    q = quantize(w, spec, a)
    assert len(set(q.codes.ravel().tolist())) == 1
    assert np.allclose(dequantize(q), 0.7, atol=1e-7)
    z = minmax_init(np.zeros((1, 4)), QuantSpec(1, True))
    assert z.scales[0] == SCALE_FLOOR


def test_minmax_channel_axis():
    w = np.array([[1.0, -4.0], [2.0, 0.5]])
    a0 = minmax_init(w, QuantSpec(3, True, 0))
    a1 = minmax_init(w, QuantSpec(3, True, 1))
    assert np.allclose(a0.scales, [1.0, 0.5])
    assert np.allclose(a1.scales, [0.5, 1.0])


# --- quantize / dequantize ---------------------------------------------------


def test_quantize_exact_grid():
    q = quantize(np.array([[-1.0, 0.0, 1.0]]), QuantSpec(1, True), aff([1.0], [1]))
    assert q.codes.tolist() == [[0, 1, 2]]


def test_quantize_rounds_then_clips():
    q = quantize(np.array([[0.4]]), QuantSpec(2, False), aff([1.0], [0]))
    assert q.codes.tolist() == [[0]]


def test_round_half_away_from_zero():
    spec = QuantSpec(3, True)
    q = quantize(np.array([[0.5, -0.5, 1.5, -1.5]]), spec, aff([1.0], [4]))
    assert q.codes.tolist() == [[5, 3, 6, 2]]


def test_quantize_rejects_bad_affine():
    with pytest.raises(ValueError):
        quantize(np.ones((2, 3)), QuantSpec(2), aff([1.0], [2]))
    with pytest.raises(ValueError):
        quantize(np.ones((1, 3)), QuantSpec(2), aff([0.0], [2]))


def test_dequantize_affine():
    q = quantize(np.array([[-1.0, 0.0, 1.0]]), QuantSpec(1, True), aff([1.0], [1]))
    q.affine = aff([0.5], [1])
    assert dequantize(q).tolist() == [[-0.5, 0.0, 0.5]]


def test_balanced_one_bit_levels_are_minus_zero_plus():
    spec = QuantSpec(1, True)
    w = Rng(2).normal((1, 200))
    a = minmax_init(w, spec)
    vals = np.unique(dequantize(quantize(w, spec, a)))
    s = a.scales[0]
    assert set(vals.tolist()) <= {-s, 0.0, s}


def test_roundtrip_bound_on_64_uniform_weights():
    rng = Rng(9)
    w = rng.uniform((1, 64)) * 2 - 1
    spec = QuantSpec(2, False)
    a = aff([0.3], [1])  # representable range [-0.3, 0.6]
    rec = dequantize(quantize(w, spec, a))
    s = 0.3
    lo, hi = s * (0 - 1), s * (spec.levels - 1 - 1)
    for x, y in zip(w.ravel(), rec.ravel()):
        if lo <= x <= hi:
            assert abs(y - x) <= s / 2 + 1e-12
        else:
            assert abs(y - x) == pytest.approx(max(lo - x, x - hi), abs=1e-12)


def test_grid_aligned_roundtrip_bit_exact():
    spec = QuantSpec(3, True)
    s = np.array([0.25, 0.125], dtype=np.float32)
    k = np.array([[-4, -1, 0, 3, 4], [2, -3, 1, 0, -4]])
    w = (s[:, None] * k).astype(np.float32)
    a = ChannelAffine(s, np.full(2, spec.center))
    rec = dequantize(quantize(w, spec, a))
    assert rec.dtype == np.float32
    assert np.array_equal(rec, w)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.booleans())
def test_codes_in_range_and_idempotent(seed, bits, balanced):
    rng = Rng(seed)
    spec = QuantSpec(bits, balanced)
    w = (rng.normal((3, 20)) * 2).astype(np.float32)
    s = rng.uniform(3) * 0.5 + 1e-3
    z = rng.integers(spec.levels, 3)
    q = quantize(w, spec, ChannelAffine(s.astype(np.float32), z))
    assert q.codes.min() >= 0 and q.codes.max() <= spec.levels - 1
    again = quantize(dequantize(q), spec, q.affine)
    assert np.array_equal(again.codes, q.codes)


# --- alternating optimization ------------------------------------------------


def test_alt_opt_fixed_point_on_grid():
    spec = QuantSpec(2, True)
    w = np.array([[-0.5, -0.25, 0.0, 0.25, 0.5]])
    init = minmax_init(w, spec)
    hist = []
    out = alt_opt_init(w, spec, init, 10, hist)
    assert out.scales[0] == init.scales[0] == 0.25
    assert all(h[0] == 0.0 for h in hist)


def test_alt_opt_zero_channel_keeps_scale():
    spec = QuantSpec(1, True)
    w = np.zeros((1, 6))
    init = minmax_init(w, spec)
    out = alt_opt_init(w, spec, init)
    assert out.scales[0] == init.scales[0]
    assert channel_errors(w, spec, out)[0] == 0.0


def test_alt_opt_matches_scale_grid_optimum():
    spec = QuantSpec(1, True)
    w = np.array([[0.1, 0.9, -0.8, 0.5]])
    out = alt_opt_init(w, spec, minmax_init(w, spec))
    best = brute_force_best_error(w[0], spec)
    err = channel_errors(w, spec, out)[0]
    assert err <= best * 1.01
    # hand check: codes {0, +1, -1, +1} give s = 2.2 / 3
    assert out.scales[0] == pytest.approx(2.2 / 3, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 2, 3, 4]), st.booleans())
def test_alt_opt_monotone(seed, bits, balanced):
    spec = QuantSpec(bits, balanced)
    w = Rng(seed).normal((8, 33))
    hist = []
    init = minmax_init(w, spec)
    out = alt_opt_init(w, spec, init, 10, hist)
    assert len(hist) == 11
    for a, b in zip(hist, hist[1:]):
        assert np.all(b <= a)
    assert np.all(channel_errors(w, spec, out) <= channel_errors(w, spec, init))


def test_alt_opt_rejects_zero_iters():
    spec = QuantSpec(2)
    w = np.ones((1, 3))
    with pytest.raises(ValueError):
        alt_opt_init(w, spec, minmax_init(w, spec), 0)


# --- straight-through estimator ----------------------------------------------


def surrogate(w, s, spec, z, residual, region):
    """STE surrogate of the fake-quantized weights with rounding residual and
    clip region frozen at a reference point; its exact derivatives are what
    the STE rule claims."""
    L = spec.levels
    s = s[:, None]
    inside = w + s * residual
    return np.where(region == 0, inside, np.where(region < 0, s * (0 - z), s * (L - 1 - z)))


def frozen_state(w, s, z, spec):
    r = w / s[:, None]
    v = r + z
    rounded = np.trunc(r) + np.where(np.abs(r - np.trunc(r)) >= 0.5, np.sign(r), 0)
    region = np.where(v < 0, -1, np.where(v > spec.levels - 1, 1, 0))
    return rounded - r, region


def test_ste_pass_through_in_range():
    spec = QuantSpec(2, True)
    w = np.array([[0.1, -0.3, 0.45]])
    gw, _ = ste_backward(np.ones_like(w), w, spec, aff([0.25], [2]))
    assert np.array_equal(gw, np.ones_like(w))


def test_ste_zero_above_clip():
    spec = QuantSpec(2, True)
    w = np.array([[10.0, 0.1]])
    gw, _ = ste_backward(np.ones_like(w), w, spec, aff([0.25], [2]))
    assert gw.tolist() == [[0.0, 1.0]]


def test_ste_grad_w_is_masked_grad_out_bitwise():
    rng = Rng(4)
    spec = QuantSpec(1, True)
    w = (rng.normal((4, 50))).astype(np.float32)
    g = rng.normal((4, 50)).astype(np.float32)
    a = ChannelAffine(np.full(4, 0.6, dtype=np.float32), np.full(4, 1))
    gw, _ = ste_backward(g, w, spec, a)
    v = w.astype(np.float64) / 0.6000000238418579 + 1
    mask = (v >= 0) & (v <= 2)
    assert np.array_equal(gw, np.where(mask, g, np.float32(0)))


@pytest.mark.parametrize("bits,balanced", [(1, True), (2, True), (3, False)])
def test_ste_scale_gradient_matches_surrogate_finite_differences(bits, balanced):
    rng = Rng(100 + bits)
    spec = QuantSpec(bits, balanced)
    w = rng.normal((3, 40)) * 0.8
    a = minmax_init(w, spec)
    a.scales = a.scales * 0.7  # push some weights into the clip region
    target = rng.normal((3, 40)) * 0.5
    residual, region = frozen_state(w, a.scales, a.zero_offsets[:, None], spec)

    def loss(wv, sv):
        return np.sum((surrogate(wv, sv, spec, a.zero_offsets[:, None], residual, region) - target) ** 2)

    rec = dequantize(quantize(w, spec, a))
    grad_out = 2 * (rec - target)
    gw, gs = ste_backward(grad_out, w, spec, a, grad_scale=False)
    h = 1e-6
    for c in range(3):
        sp, sm = a.scales.copy(), a.scales.copy()
        sp[c] += h
        sm[c] -= h
        fd = (loss(w, sp) - loss(w, sm)) / (2 * h)
        assert abs(gs[c] - fd) <= 1e-3 * max(abs(fd), 1e-6)
    for idx in [(0, 0), (1, 7), (2, 39)]:
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        fd = (loss(wp, a.scales) - loss(wm, a.scales)) / (2 * h)
        assert gw[idx] == pytest.approx(fd, rel=1e-3, abs=1e-7)


def test_ste_gradient_scale_constant():
    spec = QuantSpec(2, True)
    w = Rng(1).normal((2, 16))
    a = minmax_init(w, spec)
    g = Rng(2).normal((2, 16))
    _, raw = ste_backward(g, w, spec, a, grad_scale=False)
    _, scaled = ste_backward(g, w, spec, a, grad_scale=True)
    # Q_P = L - 1 - zero_offset = 2
    assert np.allclose(scaled, raw / math.sqrt(16 * 2), rtol=1e-12)
