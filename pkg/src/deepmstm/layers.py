"""Differentiable layers built on the tensor tape.

All layers are pure functions of ``(input, params)``. Parameters may be plain
arrays or :class:`~deepmstm.tensorcore.Tensor` leaves; the latter is how the
trainer obtains gradients. Inputs may carry leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import tensorcore as tc
from .errors import ContractError, DimensionError
from .tensorcore import Tensor

__all__ = [
    "LstmParams",
    "FourierSpec",
    "EventParams",
    "SeasonalParams",
    "lstm_forward",
    "dense_forward",
    "fourier_features",
    "seasonal_forward",
    "event_forward",
]


@dataclass
class LstmParams:
    """Gate rows are stacked in the order input, forget, cell, output."""

    input_weights: Any  # (4H, F)
    recurrent_weights: Any  # (4H, H)
    biases: Any  # (4H,)

    def __post_init__(self):
        four_h, f = np.shape(_raw(self.input_weights))
        if four_h % 4:
            raise DimensionError(f"input_weights has {four_h} rows, not a multiple of 4")
        h = four_h // 4
        if np.shape(_raw(self.recurrent_weights)) != (four_h, h):
            raise DimensionError(f"recurrent_weights must be {(four_h, h)}")
        if np.shape(_raw(self.biases)) != (four_h,):
            raise DimensionError(f"biases must be ({four_h},)")

    @property
    def hidden_size(self) -> int:
        return np.shape(_raw(self.recurrent_weights))[1]

    @property
    def feature_size(self) -> int:
        return np.shape(_raw(self.input_weights))[1]


@dataclass(frozen=True)
class FourierSpec:
    """Seasonal cycles as ``(period_in_days, n_terms)`` pairs."""

    cycles: tuple[tuple[float, int], ...]

    def __post_init__(self):
        cycles = tuple((float(p), int(g)) for p, g in self.cycles)
        for p, g in cycles:
            if p <= 0 or g < 1:
                raise ContractError(f"invalid Fourier cycle (P={p}, g={g})")
        object.__setattr__(self, "cycles", cycles)

    @property
    def dim(self) -> int:
        return sum(2 * g for _, g in self.cycles)


@dataclass
class EventParams:
    a: Any  # (L,)

    @property
    def n_types(self) -> int:
        return np.shape(_raw(self.a))[0]


@dataclass
class SeasonalParams:
    """One tanh hidden layer followed by a linear scalar readout."""

    hidden_weights: Any  # (S, D)
    hidden_bias: Any  # (S,)
    out_weights: Any  # (1, S)
    out_bias: Any  # (1,)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def lstm_forward(seq, params: LstmParams, h0=None, c0=None, return_sequence: bool = True) -> Tensor:
    """Run the standard LSTM recurrence over the columns of ``seq``.

    ``seq`` is ``(..., F, N)``. Returns hidden states ``(..., H, N)``, or only
    the last one ``(..., H)`` when ``return_sequence`` is false.
    """
    seq = tc.as_tensor(seq)
    H, F = params.hidden_size, params.feature_size
    if seq.ndim < 2 or seq.shape[-2] != F:
        raise DimensionError(f"LSTM expects {F} features, got input of shape {seq.shape}")
    n_steps = seq.shape[-1]
    if n_steps < 1:
        raise ContractError("LSTM needs at least one time step")
    batch = seq.shape[:-2]
    h = tc.Tensor(np.zeros(batch + (H,))) if h0 is None else tc.as_tensor(h0)
    c = tc.Tensor(np.zeros(batch + (H,))) if c0 is None else tc.as_tensor(c0)
    if h.shape[-1] != H or c.shape[-1] != H:
        raise DimensionError(f"initial state must have size {H}")

    # input projections for every step at once: (..., N, 4H)
    projected = tc.add(tc.matmul(tc.transpose(seq), tc.transpose(params.input_weights)), params.biases)
    states = tc.lstm_recurrence(projected, params.recurrent_weights, h, c)  # (..., N, H)
    if not return_sequence:
        return states[..., n_steps - 1, :]
    return tc.transpose(states)


def dense_forward(x, weights, bias) -> Tensor:
    """Linear layer ``weights @ x + bias`` on the last axis of ``x``."""
    x, w, b = tc.as_tensor(x), tc.as_tensor(weights), tc.as_tensor(bias)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"dense: x {x.shape}, weights {w.shape}, bias {b.shape} do not conform")
    return tc.add(tc.matmul(x, tc.transpose(w)), b)


def fourier_features(t, spec: FourierSpec) -> np.ndarray:
    """Fourier terms for day index ``t`` (scalar or array).

    Each cycle contributes ``cos(2*pi*k*t/P)`` for ``k = 1..g`` followed by the
    matching sines; cycles are concatenated in the order given. The phase is
    reduced modulo ``P`` first so that features are exactly periodic.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 0):
        raise ContractError("day index must be non-negative")
    t_arr = t_arr.astype(np.float64)
    blocks = []
    for period, n_terms in spec.cycles:
        k = np.arange(1, n_terms + 1, dtype=np.float64)
        phase = np.mod(np.multiply.outer(t_arr, k), period)
        lam = 2.0 * np.pi * phase / period
        blocks.append(np.cos(lam))
        blocks.append(np.sin(lam))
    return np.concatenate(blocks, axis=-1)


def seasonal_forward(features, params: SeasonalParams) -> Tensor:
    """Seasonal value from Fourier features ``(..., D)``; returns shape ``(...)``."""
    features = tc.as_tensor(features)
    w1 = tc.as_tensor(params.hidden_weights)
    if features.shape[-1] != w1.shape[1]:
        raise DimensionError(f"seasonal MLP expects {w1.shape[1]} features, got {features.shape[-1]}")
    hidden = tc.tanh(dense_forward(features, w1, params.hidden_bias))
    out = dense_forward(hidden, params.out_weights, params.out_bias)
    return out[..., 0]


def event_forward(b, params: EventParams) -> Tensor:
    """Linear event effect ``a . b`` for binary indicators ``b`` of shape ``(..., L)``."""
    b = tc.as_tensor(b)
    a = tc.as_tensor(params.a)
    if b.shape[-1:] != a.shape:
        raise DimensionError(f"event vector length {b.shape[-1:]} != number of event types {a.shape}")
    if not np.all((b.data == 0) | (b.data == 1)):
        raise ContractError("event indicators must be 0 or 1")
    return tc.matmul(b, a)

