"""Joint training of all heads: MAE objective, full-batch Adam, gradient checks."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensorcore as tc
from .data import EventCalendar, NormStats, SeriesFrame, WindowBatch, build_windows, normalize
from .errors import ContractError, DimensionError, NumericalError
from .model import DeepMstm, DeepMstmParams, ModelConfig, forward_components, init_params

logger = logging.getLogger(__name__)


def mae_loss(predictions, targets) -> tc.Tensor:
    """Mean absolute error; differentiable in ``predictions``."""
    p, y = tc.as_tensor(predictions), tc.as_tensor(targets)
    if p.shape != y.shape:
        raise DimensionError(f"predictions {p.shape} and targets {y.shape} differ in shape")
    if p.data.size == 0:
        raise ContractError("mae_loss of empty inputs")
    return tc.mean_abs(tc.sub(p, y))


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and the advanced state."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    updated = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / c1
        v_hat = v / c2
        updated[name] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, state


@dataclass
class TrainReport:
    epoch_mae: list[float]
    params: DeepMstmParams
    seed: int
    config: ModelConfig
    wall_clock: float = 0.0
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.epoch_mae)

    def epoch_lines(self) -> list[str]:
        return [json.dumps({"epoch": i + 1, "mae": mae}) for i, mae in enumerate(self.epoch_mae)]

    def write(self, path: str | Path) -> None:
        """One JSON object per epoch, nothing else."""
        Path(path).write_text("".join(line + "\n" for line in self.epoch_lines()))

    def same_result(self, other: "TrainReport") -> bool:
        """Equality of everything except wall-clock time."""
        return (
            self.epoch_mae == other.epoch_mae
            and self.seed == other.seed
            and self.config == other.config
            and self.stopped_early == other.stopped_early
            and self.params.equal(other.params)
        )


def batch_loss(params: Mapping, config: ModelConfig, batch: WindowBatch) -> tuple[tc.Tensor, tc.Tensor]:
    preds = forward_components(params, config, batch.inputs, batch.t_indices, batch.event_vectors)[0]
    return mae_loss(preds, batch.targets), preds


def fit(
    batch: WindowBatch,
    config: ModelConfig,
    seed: int = 0,
    epochs: int = 500,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    patience: int | None = None,
    min_delta: float = 0.0,
    init: DeepMstmParams | None = None,
) -> TrainReport:
    """Full-batch Adam on the MAE of the forecasts against ``batch.targets``.

    The epoch MAE is measured before that epoch's update. With ``patience``
    set, training stops after that many epochs without an improvement larger
    than ``min_delta``.
    """
    if len(batch) == 0:
        raise ContractError("cannot fit on an empty batch")
    if batch.inputs.shape[1:] != (config.M, config.N):
        raise DimensionError(f"batch windows {batch.inputs.shape[1:]} do not match config {(config.M, config.N)}")
    if config.has_events and batch.event_vectors.shape[1] != config.L:
        raise DimensionError(f"batch has {batch.event_vectors.shape[1]} event types, config expects {config.L}")
    params = (init or init_params(config, seed)).copy()
    params.check(config)
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    arrays = params.arrays
    history: list[float] = []
    best, since_best, stopped = np.inf, 0, False
    started = time.perf_counter()
    for epoch in range(1, epochs + 1):
        with tc.using_tape():
            leaves = {k: tc.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
            loss, preds = batch_loss(leaves, config, batch)
            value = float(loss.data)
            if not np.isfinite(value):
                bad = np.flatnonzero(~np.isfinite(preds.data))
                where = int(bad[0]) if bad.size else -1
                raise NumericalError(f"non-finite loss at epoch {epoch}, window index {where}")
            tc.backward(loss)
        grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
        arrays, state = adam_step(arrays, grads, state)
        history.append(value)
        if patience is not None:
            if value < best - min_delta:
                best, since_best = value, 0
            else:
                since_best += 1
                if since_best >= patience:
                    stopped = True
                    break
    elapsed = time.perf_counter() - started
    logger.debug("fit: %d epochs in %.2fs, final MAE %.6g", len(history), elapsed, history[-1])
    return TrainReport(history, DeepMstmParams(arrays), seed, config, elapsed, stopped)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 500
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int | None = None
    normalize: bool = True


def train_model(
    frame: SeriesFrame,
    config: ModelConfig,
    train_stop: int,
    settings: TrainSettings = TrainSettings(),
    calendar: EventCalendar | None = None,
    seed: int | None = None,
) -> tuple[DeepMstm, TrainReport]:
    """Normalize with training statistics, window the training split and fit.

    Targets in ``[N, train_stop)`` are used for training; day indices count
    from the frame's first date.
    """
    calendar = calendar or EventCalendar()
    seed = settings.seed if seed is None else seed
    stats = NormStats.fit(frame, train_stop) if settings.normalize else NormStats.identity(frame.M)
    batch = build_windows(normalize(frame, stats), config.N, config.target, calendar, stop=train_stop)
    report = fit(
        batch,
        config,
        seed=seed,
        epochs=settings.epochs,
        lr=settings.lr,
        beta1=settings.beta1,
        beta2=settings.beta2,
        eps=settings.eps,
        patience=settings.patience,
    )
    model = DeepMstm(config, report.params, stats, frame.start, calendar)
    return model, report


@dataclass(frozen=True)
class GradientVerification:
    passed: bool
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    n_params: int


def random_batch(config: ModelConfig, seed: int, size: int = 4) -> WindowBatch:
    """A small random batch with at least one active event per type."""
    rng = np.random.default_rng(seed)
    events = (rng.random((size, config.L)) < 0.5).astype(np.float64)
    if config.L:
        events[0] = 1.0
    return WindowBatch(
        inputs=rng.normal(size=(size, config.M, config.N)),
        targets=rng.normal(size=size),
        t_indices=rng.integers(0, 400, size=size),
        event_vectors=events,
        dates=(),
    )


def verify_gradients(
    config: ModelConfig,
    seed: int = 0,
    tol: float = 1e-4,
    h: float = 1e-5,
    batch: WindowBatch | None = None,
    params: DeepMstmParams | None = None,
) -> GradientVerification:
    """Check tape gradients of the full MAE loss against central differences for every parameter."""
    batch = batch or random_batch(config, seed)
    if params is None:
        # move biases off their init values so every gate path is exercised
        rng = np.random.default_rng(seed + 1)
        params = init_params(config, seed)
        params = DeepMstmParams({k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.arrays.items()})
    check = tc.gradient_check(lambda p: batch_loss(p, config, batch)[0], params.arrays, h)
    return GradientVerification(check.passed(tol), check.max_error, check.worst_param, check.worst_index, params.count())
