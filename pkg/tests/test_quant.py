import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from kittykv import (
    KittyError,
    QuantParams,
    channel_scores,
    dequantize_values,
    fake_quantize_matrix,
    quantize_values,
    select_boost,
)

finite_lanes = st.lists(
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, width=32),
    min_size=1,
    max_size=64,
)


# -- channel scores -----------------------------------------------------------


def test_scores_constant_column():
    x = np.full((4, 1), -2.0, dtype=np.float32)
    assert channel_scores(x)[0] == pytest.approx(2.0)


def test_scores_hand_arithmetic():
    x = np.array([[1.0], [-1.0], [3.0], [-3.0]], dtype=np.float32)
    assert channel_scores(x)[0] == pytest.approx(2.0)


def test_scores_match_double_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 2, (128, 64)).astype(np.float32)
    scores = channel_scores(x)
    # independent brute-force oracle
    oracle = np.zeros(64)
    for i in range(64):
        acc = 0.0
        for t in range(128):
            acc += abs(float(x[t, i]))
        oracle[i] = acc / 128
    np.testing.assert_allclose(scores, oracle, rtol=1e-6)


def test_scores_empty_rejected():
    with pytest.raises(KittyError):
        channel_scores(np.zeros((0, 4), dtype=np.float32))


# -- boost selection -----------------------------------------------------------


def _topk_oracle(scores, k):
    return sorted(sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k])


def test_select_quarter_of_128():
    scores = np.random.default_rng(0).random(128)
    sel = select_boost(scores, 0.25)
    assert sel.d_boost == 32 and len(sel.boosted) == 32


def test_select_boundary_fractions():
    scores = np.arange(16, dtype=float)
    assert len(select_boost(scores, 0.0).boosted) == 0
    assert list(select_boost(scores, 1.0).boosted) == list(range(16))


def test_select_tie_breaking():
    assert list(select_boost(np.array([5.0, 1.0, 5.0, 0.0]), 0.5).boosted) == [0, 2]
    assert list(select_boost(np.array([5.0, 5.0, 5.0, 0.0]), 0.5).boosted) == [0, 1]


def test_select_matches_sort_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        d = int(rng.integers(1, 40))
        scores = rng.choice([0.0, 1.0, 2.0, 3.5], size=d)  # plenty of ties
        frac = float(rng.random())
        sel = select_boost(scores, frac)
        assert list(sel.boosted) == _topk_oracle(scores, round(frac * d))


def test_select_rescale_invariance():
    rng = np.random.default_rng(11)
    scores = rng.random(50)
    base = select_boost(scores, 0.3)
    for factor in (1e-6, 0.5, 3.0, 1e6):
        scaled = select_boost(scores * factor, 0.3)
        assert np.array_equal(base.boosted, scaled.boosted)


def test_select_random_mode():
    scores = np.arange(64, dtype=float)
    a = select_boost(scores, 0.25, "random", seed=5)
    b = select_boost(scores, 0.25, "random", seed=5)
    c = select_boost(scores, 0.25, "random", seed=6)
    assert np.array_equal(a.boosted, b.boosted)
    assert len(set(a.boosted.tolist())) == 16  # without replacement
    assert not np.array_equal(a.boosted, c.boosted)  # seed matters
    # ignores scores entirely
    d = select_boost(scores[::-1].copy(), 0.25, "random", seed=5)
    assert np.array_equal(a.boosted, d.boosted)


# -- 1-D quantizer --------------------------------------------------------------


def test_quantize_on_grid():
    codes, params = quantize_values([0.0, 1.0, 2.0, 3.0], 2)
    assert params.scale == 1.0 and params.zero_point == 0.0
    assert list(codes) == [0, 1, 2, 3]
    assert np.array_equal(dequantize_values(codes, params), [0.0, 1.0, 2.0, 3.0])


def test_quantize_constant_group():
    codes, params = quantize_values([5.0, 5.0, 5.0], 4)
    assert params.scale == 0.0 and params.zero_point == 5.0
    assert list(codes) == [0, 0, 0]
    assert np.array_equal(dequantize_values(codes, params), [5.0, 5.0, 5.0])


def test_quantize_half_even_rounding():
    # hand-computed: scale = 2/3, zero = -1; (0.4+1)/(2/3) = 2.1 -> 2
    codes, params = quantize_values([-1.0, 0.4, 1.0], 2)
    assert params.scale == pytest.approx(2 / 3, rel=1e-6)
    assert params.zero_point == -1.0
    assert list(codes) == [0, 2, 3]
    np.testing.assert_allclose(
        dequantize_values(codes, params), [-1.0, 1 / 3, 1.0], rtol=1e-6
    )


def test_dequantize_hand_cases():
    assert dequantize_values([0], QuantParams(2, 0.0, 7.0))[0] == 7.0
    assert dequantize_values([3], QuantParams(2, 2.0, -3.0))[0] == 3.0


def test_dequantize_code_range_checked():
    with pytest.raises(KittyError):
        dequantize_values([4], QuantParams(2, 1.0, 0.0))


def test_quantize_input_validation():
    with pytest.raises(KittyError):
        quantize_values([], 2)
    with pytest.raises(KittyError):
        quantize_values([1.0], 3)
    with pytest.raises(KittyError):
        quantize_values([np.nan], 2)


@settings(max_examples=150, deadline=None)
@given(finite_lanes, st.sampled_from([2, 4]))
def test_roundtrip_error_bound(xs, bits):
    xs = np.asarray(xs, dtype=np.float32)
    assume(np.ptp(xs) == 0 or np.ptp(xs) > 1e-30)  # scale must not underflow
    codes, params = quantize_values(xs, bits)
    back = dequantize_values(codes, params)
    tol = params.scale / 2 + 4 * np.spacing(np.float32(np.max(np.abs(xs)) or 1.0))
    assert np.all(np.abs(back - xs) <= tol)


@settings(max_examples=150, deadline=None)
@given(finite_lanes)
def test_precision_monotonicity(xs):
    xs = np.asarray(xs, dtype=np.float32)
    assume(np.ptp(xs) == 0 or np.ptp(xs) > 1e-30)  # scale must not underflow
    errs = {}
    for bits in (2, 4):
        codes, params = quantize_values(xs, bits)
        errs[bits] = np.max(np.abs(dequantize_values(codes, params) - xs))
    # 4 ulp of the span covers float-rounded grids that are not exactly nested
    span = np.float32(np.max(xs) - np.min(xs))
    assert errs[4] <= errs[2] + 4 * np.spacing(span)


# -- matrix fake quantization -----------------------------------------------------


def _fake_quant_lane_oracle(x, axis, bits):
    """Brute-force lane loop composed from the 1-D ops."""
    out = x.astype(np.float32).copy()
    lanes = x.shape[1] if axis == "per_channel" else x.shape[0]
    for i in range(lanes):
        lane = out[:, i] if axis == "per_channel" else out[i, :]
        if bits[i] == 16:
            continue
        codes, params = quantize_values(lane, int(bits[i]))
        lane[:] = dequantize_values(codes, params)
    return out


def test_fake_quant_passthrough():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (8, 4)).astype(np.float32)
    out = fake_quantize_matrix(x, "per_channel", [16, 16, 16, 16])
    assert np.array_equal(out, x)


def test_fake_quant_single_lane_reduces_to_1d():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, (16, 1)).astype(np.float32)
    out = fake_quantize_matrix(x, "per_channel", [2])
    codes, params = quantize_values(x[:, 0], 2)
    assert np.array_equal(out[:, 0], dequantize_values(codes, params))


@pytest.mark.parametrize("axis", ["per_channel", "per_token"])
def test_fake_quant_matches_lane_oracle(axis):
    rng = np.random.default_rng(2)
    x = rng.normal(0, 5, (8, 4)).astype(np.float32)
    lanes = 4 if axis == "per_channel" else 8
    for _ in range(10):
        bits = rng.choice([2, 4, 16], size=lanes)
        out = fake_quantize_matrix(x, axis, bits)
        assert np.array_equal(out, _fake_quant_lane_oracle(x, axis, bits))


def test_fake_quant_idempotent():
    rng = np.random.default_rng(4)
    x = rng.normal(0, 3, (32, 8)).astype(np.float32)
    bits = np.array([2, 4, 2, 4, 16, 2, 4, 2])
    once = fake_quantize_matrix(x, "per_channel", bits)
    twice = fake_quantize_matrix(once, "per_channel", bits)
    # grid points map to themselves under half-even rounding; the re-derived
    # scale can wobble by float rounding, so allow a couple of ulps
    assert np.all(np.abs(twice - once) <= 2 * np.spacing(np.abs(once).max()))


def test_fake_quant_validation():
    x = np.zeros((4, 4), dtype=np.float32)
    with pytest.raises(KittyError):
        fake_quantize_matrix(x, "per_channel", [2, 2])  # wrong lane count
    with pytest.raises(KittyError):
        fake_quantize_matrix(x, "diagonal", [2, 2, 2, 2])
    with pytest.raises(KittyError):
        fake_quantize_matrix(x, "per_token", [3, 3, 3, 3])
