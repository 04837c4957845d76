import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepmstm import tensorcore as tc
from deepmstm.errors import DimensionError
from deepmstm.layers import (
    EventParams,
    FourierSpec,
    LstmParams,
    SeasonalParams,
    dense_forward,
    event_forward,
    fourier_features,
    lstm_forward,
    seasonal_forward,
)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def zero_lstm(H, F):
    return LstmParams(np.zeros((4 * H, F)), np.zeros((4 * H, H)), np.zeros(4 * H))


def test_lstm_zero_params_give_zero_states():
    rng = np.random.default_rng(0)
    h = lstm_forward(rng.normal(size=(3, 7)), zero_lstm(4, 3))
    assert h.shape == (4, 7)
    assert np.all(h.data == 0.0)


def test_lstm_single_cell_by_hand():
    # H = F = 1; gate rows i, f, g, o
    wx = np.array([[0.5], [-0.3], [0.8], [0.2]])
    wh = np.array([[0.1], [0.4], [-0.6], [0.3]])
    b = np.array([0.05, 1.0, -0.1, 0.0])
    x1, x2 = 0.7, -1.2
    h_prev, c_prev = 0.0, 0.0
    expected = []
    for x in (x1, x2):
        i = _sig(0.5 * x + 0.1 * h_prev + 0.05)
        f = _sig(-0.3 * x + 0.4 * h_prev + 1.0)
        g = math.tanh(0.8 * x - 0.6 * h_prev - 0.1)
        o = _sig(0.2 * x + 0.3 * h_prev)
        c_prev = f * c_prev + i * g
        h_prev = o * math.tanh(c_prev)
        expected.append(h_prev)
    out = lstm_forward(np.array([[x1, x2]]), LstmParams(wx, wh, b))
    np.testing.assert_allclose(out.data[0], expected, rtol=1e-14, atol=0)


def test_lstm_feature_mismatch():
    with pytest.raises(DimensionError):
        lstm_forward(np.ones((2, 3)), zero_lstm(2, 3))


def test_lstm_gradients_match_central_differences():
    rng = np.random.default_rng(1)
    H, F = 3, 2
    params = {"wx": rng.normal(size=(4 * H, F)), "wh": rng.normal(size=(4 * H, H)), "b": rng.normal(size=4 * H)}
    seq = rng.normal(size=(F, 5))
    w_out = rng.normal(size=H)

    def f(p):
        h_last = lstm_forward(seq, LstmParams(p["wx"], p["wh"], p["b"]), return_sequence=False)
        return tc.matmul(h_last, w_out)

    assert tc.finite_diff_check(f, params) < 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.1, 2.0))
def test_lstm_states_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    H, F = 3, 2
    p = LstmParams(rng.normal(size=(4 * H, F)) * scale, rng.normal(size=(4 * H, H)) * scale, rng.normal(size=4 * H))
    h = lstm_forward(rng.normal(size=(F, 6)) * scale, p).data
    assert np.all(np.abs(h) < 1.0)


def test_dense_identity_and_hand_case():
    x = np.array([1.5, -2.0, 3.0])
    np.testing.assert_array_equal(dense_forward(x, np.eye(3), np.zeros(3)).data, x)
    np.testing.assert_array_equal(dense_forward(np.array([2.0, 3.0]), np.array([[1.0, 1.0]]), np.array([1.0])).data, [6.0])


def test_dense_random_vs_loops():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)
    expected = [b[o] + sum(w[o, i] * x[i] for i in range(4)) for o in range(3)]
    np.testing.assert_allclose(dense_forward(x, w, b).data, expected, rtol=1e-13)


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        dense_forward(np.ones(3), np.ones((2, 4)), np.zeros(2))


def test_fourier_at_zero():
    f = fourier_features(0, FourierSpec(((7, 3), (365, 2))))
    np.testing.assert_array_equal(f, [1, 1, 1, 0, 0, 0, 1, 1, 0, 0])


def test_fourier_full_cycle():
    f = fourier_features(7, FourierSpec(((7, 1),)))
    np.testing.assert_allclose(f, [1.0, 0.0], atol=1e-15)


def test_fourier_direct_evaluation():
    f = fourier_features(3, FourierSpec(((7, 2),)))
    direct = [math.cos(2 * math.pi * 1 * 3 / 7), math.cos(2 * math.pi * 2 * 3 / 7)]
    direct += [math.sin(2 * math.pi * 1 * 3 / 7), math.sin(2 * math.pi * 2 * 3 / 7)]
    np.testing.assert_allclose(f, direct, rtol=0, atol=1e-14)


def test_fourier_dim():
    assert FourierSpec(((7, 3), (365, 10))).dim == 26
    assert fourier_features(np.arange(5), FourierSpec(((7, 3),))).shape == (5, 6)


@given(t=st.integers(0, 10**5))
def test_fourier_periodic_over_lcm(t):
    spec = FourierSpec(((7, 2), (3, 1)))
    np.testing.assert_array_equal(fourier_features(t, spec), fourier_features(t + 21, spec))


def _seasonal_params(rng, D, S=8):
    return SeasonalParams(rng.normal(size=(S, D)), rng.normal(size=S), rng.normal(size=(1, S)), rng.normal(size=1))


def test_seasonal_zero_weights():
    spec = FourierSpec(((7, 3),))
    p = SeasonalParams(np.zeros((8, 6)), np.zeros(8), np.zeros((1, 8)), np.zeros(1))
    s = seasonal_forward(fourier_features(np.arange(30), spec), p)
    assert np.all(s.data == 0.0)


def test_seasonal_single_unit_by_hand():
    spec = FourierSpec(((7, 1),))
    p = SeasonalParams(np.array([[0.5, -1.0]]), np.array([0.2]), np.array([[2.0]]), np.array([0.3]))
    t = 2
    c, s = math.cos(2 * math.pi * t / 7), math.sin(2 * math.pi * t / 7)
    expected = 2.0 * math.tanh(0.5 * c - 1.0 * s + 0.2) + 0.3
    assert seasonal_forward(fourier_features(t, spec), p).data == pytest.approx(expected, rel=1e-14)


def test_seasonal_depends_on_t_mod_p():
    rng = np.random.default_rng(3)
    spec = FourierSpec(((7, 3),))
    p = _seasonal_params(rng, 6)
    s = seasonal_forward(fourier_features(np.arange(21), spec), p).data
    np.testing.assert_array_equal(s[:7], s[7:14])
    np.testing.assert_array_equal(s[:7], s[14:21])


def test_seasonal_dimension_mismatch():
    rng = np.random.default_rng(4)
    with pytest.raises(DimensionError):
        seasonal_forward(np.ones(4), _seasonal_params(rng, 6))


@pytest.mark.parametrize("b, expected", [([0, 0], 0.0), ([1, 0], 2.0), ([1, 1], 5.0)])
def test_event_examples(b, expected):
    assert event_forward(np.array(b, dtype=float), EventParams(np.array([2.0, 3.0]))).data == expected


def test_event_length_mismatch():
    with pytest.raises(DimensionError):
        event_forward(np.ones(3), EventParams(np.ones(2)))


@given(st.lists(st.booleans(), min_size=1, max_size=8), st.integers(0, 1000))
def test_event_linear_on_disjoint_support(mask, seed):
    a = np.random.default_rng(seed).normal(size=len(mask))
    b1 = np.array(mask, dtype=float)
    b2 = 1.0 - b1
    p = EventParams(a)
    total = event_forward(b1 + b2, p).data
    assert total == pytest.approx(event_forward(b1, p).data + event_forward(b2, p).data, rel=1e-12, abs=1e-12)
