"""Metrics, rolling one-step evaluation, baselines and the ablation harness."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import EventCalendar, SeriesFrame, format_real
from .errors import ContractError, RangeError, UndefinedMetricError
from .model import ModelConfig
from .train import TrainSettings, train_model

logger = logging.getLogger(__name__)


def _pair(preds, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ContractError(f"predictions ({p.size}) and truth ({y.size}) differ in length")
    if p.size == 0:
        raise ContractError("metric of empty inputs")
    return p, y


def rmse(preds, truth) -> float:
    p, y = _pair(preds, truth)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def rrmse(preds, truth) -> float:
    """RMSE divided by the (signed) mean of the ground truth."""
    p, y = _pair(preds, truth)
    mu = float(np.mean(y))
    if mu == 0.0:
        raise UndefinedMetricError("relative RMSE is undefined for a zero-mean truth series")
    return rmse(p, y) / mu


@dataclass(frozen=True)
class EvalResult:
    label: str
    rmse: float
    rrmse: float
    dates: tuple[dt.date, ...]
    forecasts: np.ndarray
    truth: np.ndarray
    negative_mean: bool = False
    mode: str = "one-step"

    @property
    def residuals(self) -> np.ndarray:
        return self.forecasts - self.truth

    @classmethod
    def from_forecasts(cls, label, dates, forecasts, truth, mode="one-step") -> "EvalResult":
        forecasts = np.asarray(forecasts, dtype=np.float64)
        truth = np.asarray(truth, dtype=np.float64)
        mu = float(np.mean(truth))
        return cls(
            label=label,
            rmse=rmse(forecasts, truth),
            rrmse=rrmse(forecasts, truth),
            dates=tuple(dates),
            forecasts=forecasts,
            truth=truth,
            negative_mean=mu < 0,
            mode=mode,
        )


class Forecaster(Protocol):
    """Anything that maps actual ``(B, M, lag)`` history windows to forecasts in original units."""

    lag: int

    def forecast_batch(self, windows: np.ndarray, dates: Sequence[dt.date]) -> np.ndarray: ...


def _check_range(frame: SeriesFrame, lag: int, start: int, stop: int) -> None:
    if start < lag:
        raise RangeError(f"test start index {start} leaves fewer than {lag} steps of history")
    if stop > frame.T or start > stop:
        raise RangeError(f"test range [{start}, {stop}) outside frame of length {frame.T}")


def rolling_one_step(
    model: Forecaster,
    frame: SeriesFrame,
    start: int,
    stop: int | None = None,
    target: int = 0,
    label: str = "model",
    mode: str = "one-step",
) -> EvalResult:
    """Forecast each test index from observed history.

    In ``one-step`` mode the window for index ``t`` holds the actual values at
    ``t-lag .. t-1``. ``recursive`` mode instead feeds earlier forecasts back in
    for the target row from ``start`` on; it needs a model whose only input is
    the target series (``model.config.multivariate`` false or ``M == 1``).
    """
    stop = frame.T if stop is None else stop
    lag = model.lag
    _check_range(frame, lag, start, stop)
    if start == stop:
        raise RangeError("empty test range")
    idx = np.arange(start, stop)
    dates = [frame.dates[i] for i in idx]
    truth = frame.values[target, idx].copy()
    if mode == "one-step":
        windows = np.empty((len(idx), frame.M, lag))
        for b, t in enumerate(idx):
            history = frame.values[:, :t]  # causality: nothing at or after t
            windows[b] = history[:, t - lag :]
        forecasts = model.forecast_batch(windows, dates)
    elif mode == "recursive":
        config = getattr(model, "config", None)
        if frame.M > 1 and (config is None or config.multivariate):
            raise ContractError("recursive mode needs a model that reads only the target series")
        values = frame.values[:, :start].copy()
        forecasts = np.empty(len(idx))
        for b, t in enumerate(idx):
            window = values[:, t - lag : t]
            forecasts[b] = model.forecast_batch(window[None], [dates[b]])[0]
            nxt = frame.values[:, t : t + 1].copy()
            nxt[target] = forecasts[b]
            values = np.concatenate([values, nxt], axis=1)
    else:
        raise ContractError(f"unknown evaluation mode {mode!r}")
    return EvalResult.from_forecasts(label, dates, forecasts, truth, mode)


# -- baselines -----------------------------------------------------------------


def baseline_ulstm(config: ModelConfig) -> ModelConfig:
    """One LSTM layer plus a linear dense readout on the target series alone."""
    return replace(config, bypass_conv=True, multivariate=False, use_seasonal=False, use_events=False)


def baseline_mlstm(config: ModelConfig) -> ModelConfig:
    """The same LSTM + dense network fed every input series."""
    return replace(config, bypass_conv=True, multivariate=True, use_seasonal=False, use_events=False)


@dataclass
class SeasonalNaive:
    """Forecast ``value(t - P)`` for the target series."""

    period: int
    target: int = 0

    @property
    def lag(self) -> int:
        return self.period

    def forecast_batch(self, windows, dates=None) -> np.ndarray:
        return np.asarray(windows)[:, self.target, 0].copy()


def baseline_seasonal_naive(frame: SeriesFrame, P: int, target: int = 0, start: int | None = None, stop: int | None = None) -> np.ndarray:
    """Seasonal-naive forecasts for indices ``[start, stop)`` (default ``[P, T)``)."""
    if P < 1:
        raise ContractError("season length must be >= 1")
    start = P if start is None else start
    stop = frame.T if stop is None else stop
    _check_range(frame, P, start, stop)
    return frame.values[target, start - P : stop - P].copy()


# -- ablation ------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    data: str
    label: str
    seed: int
    result: EvalResult

    @property
    def rmse(self) -> float:
        return self.result.rmse

    @property
    def rrmse(self) -> float:
        return self.result.rrmse


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def labels(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def metric(self, label: str, name: str = "rmse") -> dict[int, float]:
        return {r.seed: getattr(r, name) for r in self.rows if r.label == label}

    def median(self, label: str, name: str = "rmse") -> float:
        return float(np.median(list(self.metric(label, name).values())))

    def summary(self) -> dict:
        return {
            "arms": {
                label: {
                    "median_rmse": self.median(label, "rmse"),
                    "median_rrmse": self.median(label, "rrmse"),
                    "seeds": sorted(self.metric(label)),
                    # rrmse divides by a signed mean; flag arms where that mean is negative
                    "negative_mean": any(r.result.negative_mean for r in self.rows if r.label == label),
                }
                for label in self.labels()
            },
            "data": sorted({r.data for r in self.rows}),
        }

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["data", "label", "seed", "rmse", "rrmse"])
            for r in self.rows:
                w.writerow([r.data, r.label, r.seed, format_real(r.rmse), format_real(r.rrmse)])

    def write_json(self, path: str | Path, extra: dict | None = None) -> None:
        record = self.summary()
        if extra:
            record.update(extra)
        Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def default_arms(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    return [(f"Model {k}", base.variant(k)) for k in (1, 2, 3)]


def _run_arm(frame, label, config, seed, train_stop, test_stop, settings, calendar, data_label):
    model, _ = train_model(frame, config, train_stop, settings, calendar, seed=seed)
    result = rolling_one_step(model, frame, train_stop, test_stop, config.target, label)
    logger.info("%s seed %d: rmse %.6g rrmse %.6g", label, seed, result.rmse, result.rrmse)
    return AblationRow(data_label, label, seed, result)


def run_ablation(
    frame: SeriesFrame,
    arms: Sequence[tuple[str, ModelConfig]],
    seeds: Sequence[int],
    train_stop: int,
    test_stop: int | None = None,
    settings: TrainSettings = TrainSettings(),
    calendar: EventCalendar | None = None,
    data_label: str = "data",
    n_jobs: int = 1,
) -> AblationTable:
    """Train and evaluate every ``(arm, seed)`` pair; rows come out in arm-major order."""
    jobs = [(label, cfg, seed) for label, cfg in arms for seed in seeds]
    args = (train_stop, test_stop, settings, calendar, data_label)
    if n_jobs == 1:
        rows = [_run_arm(frame, label, cfg, seed, *args) for label, cfg, seed in jobs]
    else:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=n_jobs)(delayed(_run_arm)(frame, label, cfg, seed, *args) for label, cfg, seed in jobs)
    return AblationTable(list(rows))
