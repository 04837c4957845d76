"""Synthetic multivariate series with known trend, seasonal, event and noise parts.

Series ``i`` is built as::

    d_i(t) = level_i + rho * latent(t + lead_i) + (1 - rho) * own_i(t)
    s_i(t) = sum over cycles of amplitude * sin(2*pi*t/P + phase)
    e_i(t) = sum over event types of amplitude * indicator(t)
    x_i(t) = d_i(t) + s_i(t) + e_i(t) + noise_i(t)

where ``latent`` and ``own_i`` are piecewise-linear curves, either from explicit
knots or drawn at random from the seed. A positive ``lead`` makes a series show
the shared trend ``lead`` days early.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .data import EventCalendar, SeriesFrame
from .errors import ConfigError


@dataclass(frozen=True)
class TrendSpec:
    """Piecewise-linear curve.

    Either explicit ``knots``, or random knots every ``spacing`` days: with
    ``knot_sd`` the knot values are iid normal (a bounded, wandering trend),
    otherwise segment slopes are iid normal with ``slope_sd`` (a random walk
    in slope space).
    """

    knots: tuple[tuple[float, float], ...] | None = None
    spacing: int = 30
    slope_sd: float = 0.0
    knot_sd: float = 0.0

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any] | None) -> "TrendSpec":
        raw = dict(raw or {})
        if "slope" in raw or "intercept" in raw:
            # shorthand for a straight line through (0, intercept)
            b, a = float(raw.pop("intercept", 0.0)), float(raw.pop("slope", 0.0))
            raw["knots"] = [[0.0, b], [1.0, b + a]]
        knots = raw.pop("knots", None)
        spec = cls(
            knots=None if knots is None else tuple((float(x), float(y)) for x, y in knots),
            spacing=int(raw.pop("spacing", 30)),
            slope_sd=float(raw.pop("slope_sd", 0.0)),
            knot_sd=float(raw.pop("knot_sd", 0.0)),
        )
        if raw:
            raise ConfigError(f"unknown trend fields: {sorted(raw)}")
        if spec.knots is not None and len(spec.knots) < 2:
            raise ConfigError("trend needs at least two knots")
        if spec.spacing < 1 or spec.slope_sd < 0 or spec.knot_sd < 0:
            raise ConfigError("trend spacing must be >= 1, slope_sd and knot_sd >= 0")
        return spec

    def evaluate(self, n: int, rng: np.random.Generator) -> np.ndarray:
        t = np.arange(n, dtype=np.float64)
        if self.knots is not None:
            xs = np.array([k[0] for k in self.knots])
            ys = np.array([k[1] for k in self.knots])
            if np.any(np.diff(xs) <= 0):
                raise ConfigError("trend knots must have increasing positions")
            # linear extrapolation beyond the outer knots
            out = np.interp(t, xs, ys)
            lo_slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
            hi_slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
            out = np.where(t < xs[0], ys[0] + (t - xs[0]) * lo_slope, out)
            out = np.where(t > xs[-1], ys[-1] + (t - xs[-1]) * hi_slope, out)
            return out
        n_seg = -(-n // self.spacing)
        if self.knot_sd > 0:
            xs = np.arange(n_seg + 1, dtype=np.float64) * self.spacing
            return np.interp(t, xs, rng.normal(0.0, self.knot_sd, size=n_seg + 1))
        slopes = rng.normal(0.0, self.slope_sd, size=n_seg) if self.slope_sd > 0 else np.zeros(n_seg)
        return np.concatenate([[0.0], np.cumsum(np.repeat(slopes, self.spacing))])[:n]


@dataclass(frozen=True)
class SeasonSpec:
    period: float
    amplitude: float
    phase: float = 0.0


@dataclass(frozen=True)
class SeriesSpec:
    id: str
    level: float = 0.0
    lead: int = 0
    trend: TrendSpec = field(default_factory=TrendSpec)
    seasons: tuple[SeasonSpec, ...] = ()
    events: tuple[tuple[str, float], ...] = ()
    noise_sigma: float = 0.0
    noise_frac: float = 0.0


@dataclass(frozen=True)
class EventRule:
    name: str
    rule: str = "month_start"
    dates: tuple[dt.date, ...] = ()

    def active(self, day: dt.date) -> bool:
        if self.rule == "month_start":
            return day.day == 1
        return day in self.dates


@dataclass(frozen=True)
class SynthSpec:
    T: int
    start: dt.date
    series: tuple[SeriesSpec, ...]
    coupling: float = 0.0
    latent: TrendSpec = field(default_factory=TrendSpec)
    event_rules: tuple[EventRule, ...] = ()

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SynthSpec":
        """Build from a parsed config mapping; unknown keys are errors."""
        raw = dict(raw)
        try:
            T = int(raw.pop("T"))
            start = raw.pop("start", "2018-01-01")
            start = start if isinstance(start, dt.date) else dt.date.fromisoformat(str(start))
            coupling = float(raw.pop("coupling", 0.0))
            latent = TrendSpec.from_dict(raw.pop("latent_trend", None))
            rules = []
            for ev in raw.pop("events", []) or []:
                ev = dict(ev)
                dates = tuple(
                    d if isinstance(d, dt.date) else dt.date.fromisoformat(str(d)) for d in ev.pop("dates", [])
                )
                rule = EventRule(str(ev.pop("type")), str(ev.pop("rule", "dates" if dates else "month_start")), dates)
                if ev:
                    raise ConfigError(f"unknown event fields: {sorted(ev)}")
                if rule.rule not in ("month_start", "dates"):
                    raise ConfigError(f"unknown event rule {rule.rule!r}")
                rules.append(rule)
            series = []
            for s in raw.pop("series"):
                s = dict(s)
                seasons = tuple(
                    SeasonSpec(float(c["period"]), float(c.get("amplitude", 1.0)), float(c.get("phase", 0.0)))
                    for c in s.pop("seasons", []) or []
                )
                spec = SeriesSpec(
                    id=str(s.pop("id")),
                    level=float(s.pop("level", 0.0)),
                    lead=int(s.pop("lead", 0)),
                    trend=TrendSpec.from_dict(s.pop("trend", None)),
                    seasons=seasons,
                    events=tuple((str(k), float(v)) for k, v in (s.pop("events", {}) or {}).items()),
                    noise_sigma=float(s.pop("noise_sigma", 0.0)),
                    noise_frac=float(s.pop("noise_frac", 0.0)),
                )
                if s:
                    raise ConfigError(f"unknown series fields: {sorted(s)}")
                series.append(spec)
        except KeyError as exc:
            raise ConfigError(f"synthetic spec is missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synthetic spec: {exc}") from None
        raw.pop("seed", None)
        if raw:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(raw)}")
        spec = cls(T, start, tuple(series), coupling, latent, tuple(rules))
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        if not self.series:
            raise ConfigError("at least one series is required")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("coupling must lie in [0, 1]")
        names = {r.name for r in self.event_rules}
        for s in self.series:
            if s.lead < 0:
                raise ConfigError(f"series {s.id}: lead must be >= 0")
            if s.noise_sigma < 0 or s.noise_frac < 0:
                raise ConfigError(f"series {s.id}: noise must be >= 0")
            for p in s.seasons:
                if p.period <= 0:
                    raise ConfigError(f"series {s.id}: season period must be > 0")
            for name, _ in s.events:
                if name not in names:
                    raise ConfigError(f"series {s.id}: event type {name!r} is not declared")


@dataclass(frozen=True)
class SynthTruth:
    """Stored components, each ``(M, T)``; ``value == d + s + e + noise`` exactly."""

    d: np.ndarray
    s: np.ndarray
    e: np.ndarray
    noise: np.ndarray

    @property
    def signal(self) -> np.ndarray:
        return self.d + self.s + self.e


def synth_generate(spec: SynthSpec, seed: int) -> tuple[SeriesFrame, SynthTruth, EventCalendar]:
    """Draw a frame and its ground-truth components; deterministic per seed."""
    rng = np.random.default_rng(seed)
    T, M = spec.T, len(spec.series)
    dates = tuple(spec.start + dt.timedelta(days=i) for i in range(T))
    t = np.arange(T, dtype=np.float64)
    max_lead = max(s.lead for s in spec.series)
    latent = spec.latent.evaluate(T + max_lead, rng)

    calendar = EventCalendar.from_pairs(
        ((day, r.name) for day in dates for r in spec.event_rules if r.active(day)),
        [r.name for r in spec.event_rules],
    )
    indicators = {r.name: calendar.matrix(dates)[:, k] for k, r in enumerate(spec.event_rules)}

    d = np.zeros((M, T))
    s = np.zeros((M, T))
    e = np.zeros((M, T))
    noise = np.zeros((M, T))
    for i, ser in enumerate(spec.series):
        own = ser.trend.evaluate(T, rng)
        d[i] = ser.level + spec.coupling * latent[ser.lead : ser.lead + T] + (1.0 - spec.coupling) * own
        for c in ser.seasons:
            s[i] += c.amplitude * np.sin(2.0 * np.pi * np.mod(t, c.period) / c.period + c.phase)
        for name, amp in ser.events:
            e[i] += amp * indicators[name]
        signal = d[i] + s[i] + e[i]
        sigma = ser.noise_sigma + ser.noise_frac * float(np.ptp(signal))
        if sigma > 0:
            noise[i] = rng.normal(0.0, sigma, size=T)
    values = d + s + e + noise
    frame = SeriesFrame(tuple(x.id for x in spec.series), dates, values)
    return frame, SynthTruth(d, s, e, noise), calendar
