"""DeepMSTM composition: forecast = trend + seasonality + event.

The trend head runs the lag window through the series-axis convolution and the
two-step temporal convolution, stacks both feature maps (the shorter one padded
with a trailing zero column), feeds them to an LSTM and reads the last hidden
state out through a linear layer. The seasonal head is a small MLP on Fourier
terms of the forecast day, and the event head is linear in the day's event
indicators.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensorcore as tc
from .data import EventCalendar, NormStats, SeriesFrame
from .errors import ConfigError, ContractError, DimensionError, IncompatibleParamsError, RangeError
from .layers import (
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

PARAMS_FORMAT = "deepmstm-params"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and switches of one DeepMSTM variant.

    ``target`` is the 0-based row of the forecast series. The ablation switches
    reproduce the three variants: ``multivariate=False, use_1d=False`` (2D only
    on the target), ``use_2d=False`` (1D only on all series) and both on.
    ``bypass_conv`` feeds the raw window straight into the LSTM, which together
    with disabled seasonal/event heads gives the plain LSTM baselines.
    """

    M: int
    target: int = 0
    N: int = 14
    K1: int = 4
    K2: int = 4
    H: int = 8
    fourier: FourierSpec = field(default_factory=lambda: FourierSpec(((7.0, 3),)))
    L: int = 0
    seasonal_hidden: int = 8
    use_1d: bool = True
    use_2d: bool = True
    multivariate: bool = True
    use_seasonal: bool = True
    use_events: bool = True
    bypass_conv: bool = False

    def __post_init__(self):
        if not isinstance(self.fourier, FourierSpec):
            object.__setattr__(self, "fourier", FourierSpec(tuple(tuple(c) for c in self.fourier)))
        problems = []
        if self.M < 1:
            problems.append("M must be >= 1")
        if not 0 <= self.target < max(self.M, 1):
            problems.append(f"target {self.target} outside 0..{self.M - 1}")
        if self.N < 1:
            problems.append("N must be >= 1")
        if self.H < 1:
            problems.append("H must be >= 1")
        if self.L < 0:
            problems.append("L must be >= 0")
        if self.seasonal_hidden < 1:
            problems.append("seasonal_hidden must be >= 1")
        if not self.bypass_conv:
            if not (self.use_1d or self.use_2d):
                problems.append("at least one of use_1d/use_2d must be enabled")
            if self.use_1d and self.K1 < 1:
                problems.append("K1 must be >= 1 when use_1d")
            if self.use_2d and self.K2 < 1:
                problems.append("K2 must be >= 1 when use_2d")
            if self.use_2d and self.N < 2:
                problems.append("N must be >= 2 when use_2d")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def input_rows(self) -> int:
        return self.M if self.multivariate else 1

    @property
    def lstm_features(self) -> int:
        if self.bypass_conv:
            return self.input_rows
        return (self.K1 if self.use_1d else 0) + (self.K2 if self.use_2d else 0)

    @property
    def has_seasonal(self) -> bool:
        return self.use_seasonal and bool(self.fourier.cycles)

    @property
    def has_events(self) -> bool:
        return self.use_events and self.L > 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["fourier"] = [list(c) for c in self.fourier.cycles]
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ModelConfig":
        raw = dict(raw)
        if "fourier" in raw:
            raw["fourier"] = FourierSpec(tuple(tuple(c) for c in raw["fourier"]))
        unknown = set(raw) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        return cls(**raw)

    def variant(self, model: int) -> "ModelConfig":
        """The ablation arms: 1 = univariate + 2D, 2 = multivariate + 1D, 3 = both."""
        arms = {
            1: dict(multivariate=False, use_1d=False, use_2d=True),
            2: dict(multivariate=True, use_1d=True, use_2d=False),
            3: dict(multivariate=True, use_1d=True, use_2d=True),
        }
        if model not in arms:
            raise ConfigError(f"ablation model must be 1, 2 or 3, got {model}")
        return replace(self, bypass_conv=False, **arms[model])


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every learnable array, in canonical order."""
    rows, F, H = config.input_rows, config.lstm_features, config.H
    shapes: dict[str, tuple[int, ...]] = {}
    if not config.bypass_conv:
        if config.use_1d:
            shapes["conv1d.w"] = (config.K1, rows)
            shapes["conv1d.b"] = (config.K1,)
        if config.use_2d:
            shapes["conv2d.w"] = (config.K2, rows, 2)
            shapes["conv2d.b"] = (config.K2,)
    shapes["lstm.wx"] = (4 * H, F)
    shapes["lstm.wh"] = (4 * H, H)
    shapes["lstm.b"] = (4 * H,)
    shapes["dense.w"] = (1, H)
    shapes["dense.b"] = (1,)
    if config.has_seasonal:
        S, D = config.seasonal_hidden, config.fourier.dim
        shapes["season.w1"] = (S, D)
        shapes["season.b1"] = (S,)
        shapes["season.w2"] = (1, S)
        shapes["season.b2"] = (1,)
    if config.has_events:
        shapes["event.a"] = (config.L,)
    return shapes


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name == "conv2d.w":
        k2, rows, width = shape
        return rows * width, k2 * rows * width
    if name == "event.a":
        return shape[0], 1
    out, inp = shape
    return inp, out


@dataclass
class DeepMstmParams:
    """Every learnable array of the model, keyed by canonical name."""

    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "DeepMstmParams":
        return DeepMstmParams({k: v.copy() for k, v in self.arrays.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def check(self, config: ModelConfig) -> None:
        expected = param_shapes(config)
        got = {k: tuple(v.shape) for k, v in self.arrays.items()}
        if got != expected:
            raise IncompatibleParamsError(f"parameter shapes {got} do not match config {expected}")
        for k, v in self.arrays.items():
            if not np.all(np.isfinite(v)):
                raise IncompatibleParamsError(f"parameter {k} has non-finite values")

    @classmethod
    def zeros(cls, config: ModelConfig) -> "DeepMstmParams":
        return cls({k: np.zeros(s) for k, s in param_shapes(config).items()})

    def equal(self, other: "DeepMstmParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )


def init_params(config: ModelConfig, seed: int) -> DeepMstmParams:
    """Glorot-uniform weights, zero biases, forget-gate biases at 1."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            arr = np.zeros(shape)
            if name == "lstm.b":
                arr[config.H : 2 * config.H] = 1.0
        else:
            fan_in, fan_out = _fans(name, shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        arrays[name] = arr
    return DeepMstmParams(arrays)


def forward_components(params: Mapping, config: ModelConfig, windows, t_indices, events=None):
    """Batched forward pass.

    ``params`` maps names to arrays or tensors, ``windows`` is ``(B, M, N)``,
    ``t_indices`` ``(B,)`` and ``events`` ``(B, L)``. Returns tensors
    ``(forecast, trend, seasonal, event)``, each of shape ``(B,)``.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1:] != (config.M, config.N):
        raise DimensionError(f"windows must be (B, {config.M}, {config.N}), got {windows.shape}")
    batch = windows.shape[0]
    if not config.multivariate:
        windows = windows[:, config.target : config.target + 1, :]
    x = tc.Tensor(windows)

    if config.bypass_conv:
        features = x
    else:
        maps = []
        if config.use_1d:
            maps.append(tc.conv_feature_1d(x, params["conv1d.w"], params["conv1d.b"]))
        if config.use_2d:
            c2 = tc.conv_temporal_2d(x, params["conv2d.w"], params["conv2d.b"])
            if config.use_1d:
                features = tc.concat_time_pad(maps[0], c2)
            else:
                empty = tc.Tensor(np.zeros((batch, 0, config.N)))
                features = tc.concat_time_pad(empty, c2)
        else:
            features = maps[0]
    lstm = LstmParams(params["lstm.wx"], params["lstm.wh"], params["lstm.b"])
    h_last = lstm_forward(features, lstm, return_sequence=False)
    trend = dense_forward(h_last, params["dense.w"], params["dense.b"])[..., 0]

    zero = tc.Tensor(np.zeros(batch))
    if config.has_seasonal:
        feats = fourier_features(np.asarray(t_indices), config.fourier)
        seasonal = seasonal_forward(
            feats,
            SeasonalParams(params["season.w1"], params["season.b1"], params["season.w2"], params["season.b2"]),
        )
    else:
        seasonal = zero
    if config.has_events:
        ev = np.asarray(events, dtype=np.float64).reshape(batch, -1)
        event = event_forward(ev, EventParams(params["event.a"]))
    else:
        event = zero
    forecast = tc.add(tc.add(trend, seasonal), event)
    return forecast, trend, seasonal, event


def forward(window, t: int, b_t, params: DeepMstmParams, config: ModelConfig) -> tuple[float, float, float, float]:
    """One forecast from an ``M x N`` window; returns ``(forecast, trend, seasonal, event)``."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (config.M, config.N):
        raise DimensionError(f"window must be {(config.M, config.N)}, got {window.shape}")
    b = np.zeros((1, config.L)) if b_t is None else np.asarray(b_t, dtype=np.float64).reshape(1, -1)
    with tc.no_grad():
        outs = forward_components(params.arrays, config, window[None], np.array([t]), b)
    return tuple(float(o.data[0]) for o in outs)


@dataclass(frozen=True)
class Decomposition:
    """Per-step components; ``forecast`` is exactly ``d + s + e``."""

    dates: tuple[dt.date, ...]
    d: np.ndarray
    s: np.ndarray
    e: np.ndarray
    forecast: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.dates)
        arrays = [self.d, self.s, self.e, self.forecast] + ([self.truth] if self.truth is not None else [])
        if any(len(a) != n for a in arrays):
            raise DimensionError("decomposition series lengths differ")
        if not np.array_equal(self.forecast, self.d + self.s + self.e):
            raise ContractError("forecast must equal d + s + e")

    @classmethod
    def from_components(cls, dates, d, s, e, truth=None) -> "Decomposition":
        d, s, e = (np.asarray(a, dtype=np.float64) for a in (d, s, e))
        return cls(tuple(dates), d, s, e, d + s + e, truth)


def day_indices(dates, origin: dt.date) -> np.ndarray:
    idx = np.array([(d - origin).days for d in dates], dtype=np.int64)
    if np.any(idx < 0):
        raise RangeError(f"dates precede the day-index origin {origin}")
    return idx


@dataclass
class DeepMstm:
    """A parameterized model bound to its normalization and calendar.

    Windows and outputs are in original units; the network itself runs on
    z-scored inputs. Day indices count from ``origin``.
    """

    config: ModelConfig
    params: DeepMstmParams
    stats: NormStats
    origin: dt.date
    calendar: EventCalendar = field(default_factory=EventCalendar)

    def __post_init__(self):
        self.params.check(self.config)
        if self.stats.mean.shape != (self.config.M,):
            raise DimensionError(f"normalization stats cover {self.stats.mean.shape[0]} series, model expects {self.config.M}")
        if self.config.has_events and self.calendar.L != self.config.L:
            raise DimensionError(f"calendar has {self.calendar.L} event types, model expects {self.config.L}")

    @property
    def lag(self) -> int:
        return self.config.N

    def components(self, windows, dates) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Trend, seasonal and event parts in original units for ``(B, M, N)`` windows."""
        windows = np.asarray(windows, dtype=np.float64)
        z = (windows - self.stats.mean[None, :, None]) / self.stats.std[None, :, None]
        events = self.calendar.matrix(dates) if self.config.has_events else None
        with tc.using_tape(), tc.no_grad():
            _, d, s, e = forward_components(self.params.arrays, self.config, z, day_indices(dates, self.origin), events)
        m = self.config.target
        std, mean = self.stats.std[m], self.stats.mean[m]
        return d.data * std + mean, s.data * std, e.data * std

    def forecast_batch(self, windows, dates) -> np.ndarray:
        d, s, e = self.components(windows, dates)
        return d + s + e

    def forecast(self, window, date: dt.date) -> float:
        return float(self.forecast_batch(np.asarray(window)[None], [date])[0])

    def decompose(self, frame: SeriesFrame, start: int | None = None, stop: int | None = None) -> Decomposition:
        return decompose(frame, self, start, stop)


def decompose(frame: SeriesFrame, model: DeepMstm, start: int | None = None, stop: int | None = None) -> Decomposition:
    """One-step decomposition for target indices ``[start, stop)`` from actual history."""
    N = model.config.N
    start = N if start is None else start
    stop = frame.T if stop is None else stop
    if start < N:
        raise RangeError(f"decomposition from index {start} needs {N} steps of history")
    if stop > frame.T or start > stop:
        raise RangeError(f"range [{start}, {stop}) outside frame of length {frame.T}")
    if frame.M != model.config.M:
        raise DimensionError(f"frame has {frame.M} series, model expects {model.config.M}")
    idx = np.arange(start, stop)
    dates = [frame.dates[i] for i in idx]
    if len(idx) == 0:
        empty = np.zeros(0)
        return Decomposition.from_components((), empty, empty, empty, empty)
    windows = np.stack([frame.values[:, i - N : i] for i in idx])
    d, s, e = model.components(windows, dates)
    return Decomposition.from_components(dates, d, s, e, frame.values[model.config.target, idx].copy())


# -- serialization --------------------------------------------------------------


def params_to_dict(params: DeepMstmParams, config: ModelConfig) -> dict:
    return {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "config": config.to_dict(),
        "arrays": {
            k: {"shape": list(v.shape), "data": [float(x) for x in v.reshape(-1)]} for k, v in params.arrays.items()
        },
    }


def save_params(params: DeepMstmParams, config: ModelConfig, path: str | Path, extra: Mapping | None = None) -> None:
    """Write a deterministic JSON record; floats use shortest round-trip repr."""
    record = params_to_dict(params, config)
    if extra:
        record["extra"] = dict(extra)
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=False) + "\n")


def load_params(path: str | Path, config: ModelConfig | None = None) -> tuple[DeepMstmParams, ModelConfig, dict]:
    """Read a parameter file; with ``config`` given, shapes must match it."""
    try:
        record = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise IncompatibleParamsError(f"{path}: not a parameter file ({exc})") from None
    if record.get("format") != PARAMS_FORMAT:
        raise IncompatibleParamsError(f"{path}: unknown format {record.get('format')!r}")
    if record.get("version") != PARAMS_VERSION:
        raise IncompatibleParamsError(
            f"{path}: parameter format version {record.get('version')} is not supported (expected {PARAMS_VERSION})"
        )
    arrays = {
        k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in record["arrays"].items()
    }
    params = DeepMstmParams(arrays)
    stored = ModelConfig.from_dict(record["config"])
    target = config if config is not None else stored
    params.check(target)
    return params, target, record.get("extra", {})
