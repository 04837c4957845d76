import datetime as dt
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepmstm.data import NormStats, SeriesFrame
from deepmstm.errors import ContractError, RangeError, UndefinedMetricError
from deepmstm.evaluation import (
    AblationTable,
    EvalResult,
    SeasonalNaive,
    baseline_mlstm,
    baseline_seasonal_naive,
    baseline_ulstm,
    rmse,
    rolling_one_step,
    rrmse,
    run_ablation,
)
from deepmstm.model import DeepMstm, DeepMstmParams, ModelConfig, param_shapes
from deepmstm.train import TrainSettings, train_model

D0 = dt.date(2019, 3, 1)


def frame_of(values, start=D0):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return SeriesFrame(
        tuple(f"s{i}" for i in range(values.shape[0])),
        tuple(start + dt.timedelta(days=i) for i in range(values.shape[1])),
        values,
    )


# -- metrics ---------------------------------------------------------------------


def test_metric_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([1.0, 1.0], [0.0, 0.0]) == 1.0
    assert rrmse([9.0, 11.0], [10.0, 10.0]) == pytest.approx(0.1, abs=1e-15)
    assert rrmse([3.0, 4.0], [3.0, 4.0]) == 0.0


def test_rmse_against_loop():
    rng = np.random.default_rng(0)
    p, y = rng.normal(size=37), rng.normal(size=37)
    acc = 0.0
    for a, b in zip(p, y):
        acc += (a - b) ** 2
    assert rmse(p, y) == pytest.approx(math.sqrt(acc / 37), rel=1e-14)


def test_metric_errors():
    with pytest.raises(ContractError):
        rmse([], [])
    with pytest.raises(ContractError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(UndefinedMetricError):
        rrmse([1.0, 2.0], [-1.0, 1.0])


def test_negative_mean_is_signed_and_flagged():
    res = EvalResult.from_forecasts("x", [D0, D0], [-9.0, -11.0], [-10.0, -10.0])
    assert res.rrmse == pytest.approx(-0.1, abs=1e-15)
    assert res.negative_mean


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(0.5, 1e3)), min_size=1, max_size=50))
def test_rrmse_times_mean_is_rmse(pairs):
    p = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    assert abs(rrmse(p, y) * np.mean(y) - rmse(p, y)) <= 1e-12 * max(1.0, rmse(p, y))


# -- rolling evaluation ----------------------------------------------------------


class Oracle:
    """Test double that peeks at the frame to return the truth."""

    lag = 3

    def __init__(self, frame):
        self.frame = frame

    def forecast_batch(self, windows, dates):
        return np.array([self.frame.values[0, self.frame.index_of(d)] for d in dates])


class ConstantZero:
    lag = 2

    def forecast_batch(self, windows, dates):
        return np.zeros(len(windows))


def test_oracle_model_scores_zero():
    frame = frame_of(np.random.default_rng(1).normal(size=40) + 5)
    res = rolling_one_step(Oracle(frame), frame, 10)
    assert res.rmse == 0.0 and res.rrmse == 0.0
    assert len(res.residuals) == 30 and res.dates[0] == frame.dates[10]


def test_constant_zero_model_closed_form():
    mu, sigma = 3.0, 2.0
    values = np.random.default_rng(2).normal(mu, sigma, size=20002)
    frame = frame_of(values)
    res = rolling_one_step(ConstantZero(), frame, 2)
    y = values[2:]
    # exact identity with the sample moments, and close to the population ones
    assert res.rmse == pytest.approx(math.sqrt(np.mean(y) ** 2 + np.var(y)), rel=1e-12)
    assert res.rmse == pytest.approx(math.sqrt(mu**2 + sigma**2), rel=0.02)


def test_insufficient_history_and_empty_range():
    frame = frame_of(np.arange(1.0, 11.0))
    with pytest.raises(RangeError):
        rolling_one_step(ConstantZero(), frame, 1)
    with pytest.raises(RangeError):
        rolling_one_step(ConstantZero(), frame, 5, 5)
    with pytest.raises(RangeError):
        rolling_one_step(ConstantZero(), frame, 5, 11)


def _small_model(M=2, seed=0):
    cfg = ModelConfig(M=M, N=4, H=3, K1=2, K2=2)
    rng = np.random.default_rng(seed)
    params = DeepMstmParams({k: rng.normal(size=s) for k, s in param_shapes(cfg).items()})
    return DeepMstm(cfg, params, NormStats(np.full(M, 1.0), np.full(M, 2.0)), D0)


def test_forecast_at_t_ignores_values_from_t_on():
    model = _small_model()
    values = np.random.default_rng(3).normal(size=(2, 30))
    base = rolling_one_step(model, frame_of(values), 10, 30)
    for t in (10, 17, 29):
        bumped = values.copy()
        bumped[:, t:] += 100.0
        res = rolling_one_step(model, frame_of(bumped), 10, 30)
        np.testing.assert_array_equal(res.forecasts[: t - 10 + 1], base.forecasts[: t - 10 + 1])


def test_recursive_mode():
    cfg = baseline_ulstm(ModelConfig(M=1, N=3, H=2))
    rng = np.random.default_rng(4)
    params = DeepMstmParams({k: rng.normal(size=s) for k, s in param_shapes(cfg).items()})
    model = DeepMstm(cfg, params, NormStats.identity(1), D0)
    frame = frame_of(rng.normal(size=20))
    rec = rolling_one_step(model, frame, 5, 10, mode="recursive")
    one = rolling_one_step(model, frame, 5, 10)
    assert rec.mode == "recursive"
    assert rec.forecasts[0] == one.forecasts[0]
    # second step reads the first forecast in place of the observed value
    window = np.array([[frame.values[0, 3], frame.values[0, 4], rec.forecasts[0]]])
    assert rec.forecasts[1] == model.forecast(window, frame.dates[6])
    with pytest.raises(ContractError):
        rolling_one_step(_small_model(), frame_of(rng.normal(size=(2, 20))), 5, mode="recursive")


@settings(max_examples=10, deadline=None)
@given(c=st.floats(0.01, 1e4))
def test_scaling_invariance_end_to_end(c):
    # scale the series and the normalization stats together: rmse scales, rrmse doesn't
    model = _small_model(seed=5)
    values = np.random.default_rng(6).normal(size=(2, 40)) + 4.0
    res = rolling_one_step(model, frame_of(values), 8)
    scaled = DeepMstm(model.config, model.params, NormStats(model.stats.mean * c, model.stats.std * c), D0)
    res_c = rolling_one_step(scaled, frame_of(values * c), 8)
    assert res_c.rmse == pytest.approx(c * res.rmse, rel=1e-10)
    assert res_c.rrmse == pytest.approx(res.rrmse, rel=1e-10)


# -- baselines -------------------------------------------------------------------


def test_lstm_baselines_shapes_and_zero_params():
    base = ModelConfig(M=3, L=1)
    u, m = baseline_ulstm(base), baseline_mlstm(base)
    assert (u.lstm_features, m.lstm_features) == (1, 3)
    for cfg in (u, m):
        names = set(param_shapes(cfg))
        assert names == {"lstm.wx", "lstm.wh", "lstm.b", "dense.w", "dense.b"}
    model = DeepMstm(u, DeepMstmParams.zeros(u), NormStats.identity(3), D0)
    res = rolling_one_step(model, frame_of(np.random.default_rng(0).normal(size=(3, 30)) + 2), 14)
    assert np.all(res.forecasts == 0.0)


def test_mlstm_equals_ulstm_for_one_series():
    base = ModelConfig(M=1, N=5, H=3)
    assert param_shapes(baseline_ulstm(base)) == param_shapes(baseline_mlstm(base))
    rng = np.random.default_rng(7)
    params = DeepMstmParams({k: rng.normal(size=s) for k, s in param_shapes(baseline_ulstm(base)).items()})
    frame = frame_of(rng.normal(size=30))
    a = rolling_one_step(DeepMstm(baseline_ulstm(base), params, NormStats.identity(1), D0), frame, 5)
    b = rolling_one_step(DeepMstm(baseline_mlstm(base), params, NormStats.identity(1), D0), frame, 5)
    np.testing.assert_array_equal(a.forecasts, b.forecasts)


@pytest.mark.parametrize("make", [baseline_ulstm, baseline_mlstm])
def test_lstm_baselines_fit_noiseless_line(make):
    values = np.vstack([np.linspace(0, 10, 200), np.linspace(5, -3, 200)])
    cfg = make(ModelConfig(M=2, N=7, H=8))
    _, report = train_model(frame_of(values), cfg, 200, TrainSettings(epochs=400, lr=0.01))
    assert report.epoch_mae[-1] < 0.05


def test_seasonal_naive_cases():
    t = np.arange(60.0)
    periodic = frame_of(np.tile(np.random.default_rng(9).normal(size=7), 9)[:60])
    assert rolling_one_step(SeasonalNaive(7), periodic, 7).rmse == 0.0
    np.testing.assert_array_equal(baseline_seasonal_naive(periodic, 7), periodic.values[0, 7:])
    constant = frame_of(np.full(30, 4.2))
    assert rolling_one_step(SeasonalNaive(7), constant, 7).rmse == 0.0
    a = 0.5
    line = frame_of(a * t)
    residuals = line.values[0, 7:] - baseline_seasonal_naive(line, 7)
    np.testing.assert_array_equal(residuals, a * 7)
    with pytest.raises(RangeError):
        baseline_seasonal_naive(line, 7, start=3)


# -- ablation --------------------------------------------------------------------


def _ablation_frame():
    t = np.arange(80.0)
    rng = np.random.default_rng(8)
    a = 10 + 0.05 * t + np.sin(2 * np.pi * t / 7) + 0.1 * rng.normal(size=80)
    b = 5 + 0.05 * t + 0.1 * rng.normal(size=80)
    return frame_of(np.vstack([a, b]))


def test_ablation_three_arms_consistent(tmp_path):
    frame = _ablation_frame()
    base = ModelConfig(M=2, N=5, H=3, K1=2, K2=2)
    arms = [(f"Model {k}", base.variant(k)) for k in (1, 2, 3)]
    table = run_ablation(frame, arms, [0], 60, settings=TrainSettings(epochs=5), data_label="toy")
    assert [r.label for r in table.rows] == ["Model 1", "Model 2", "Model 3"]
    for r in table.rows:
        assert r.rrmse * np.mean(r.result.truth) == pytest.approx(r.rmse, rel=1e-12)
        assert len(r.result.truth) == 20
    table.write_csv(tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "data,label,seed,rmse,rrmse" and len(lines) == 4
    table.write_json(tmp_path / "a.json")
    summary = json.loads((tmp_path / "a.json").read_text())
    assert set(summary["arms"]) == {"Model 1", "Model 2", "Model 3"}


def test_identical_arms_identical_results():
    frame = _ablation_frame()
    cfg = ModelConfig(M=2, N=5, H=3, K1=2, K2=2)
    table = run_ablation(frame, [("x", cfg), ("y", cfg)], [0, 1], 60, settings=TrainSettings(epochs=5))
    assert table.metric("x") == table.metric("y")
    assert table.metric("x")[0] != table.metric("x")[1]


def test_ablation_parallel_matches_serial():
    frame = _ablation_frame()
    cfg = ModelConfig(M=2, N=5, H=3, K1=2, K2=2)
    arms = [("a", cfg.variant(1)), ("b", cfg.variant(3))]
    serial = run_ablation(frame, arms, [0, 1], 60, settings=TrainSettings(epochs=3))
    parallel = run_ablation(frame, arms, [0, 1], 60, settings=TrainSettings(epochs=3), n_jobs=2)
    assert [(r.label, r.seed, r.rmse) for r in serial.rows] == [(r.label, r.seed, r.rmse) for r in parallel.rows]


def test_median_aggregation():
    frame = _ablation_frame()
    cfg = ModelConfig(M=2, N=5, H=3, K1=2, K2=2)
    table = run_ablation(frame, [("a", cfg)], [0, 1, 2], 60, settings=TrainSettings(epochs=3))
    assert isinstance(table, AblationTable)
    assert table.median("a") == float(np.median(list(table.metric("a").values())))
