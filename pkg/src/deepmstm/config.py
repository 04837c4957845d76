"""YAML run configuration shared by every CLI command.

Relative paths resolve against the directory of the config file. Every
schema problem is reported with the dotted path of the offending field.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .train import TrainSettings

_MODEL_KEYS = {
    "target", "N", "K1", "K2", "H", "fourier", "seasonal_hidden",
    "use_1d", "use_2d", "multivariate", "use_seasonal", "use_events", "bypass_conv",
}  # fmt: skip


def _get(section: Mapping, key: str, kind, where: str, default=None, required: bool = False):
    if key not in section or section[key] is None:
        if required:
            raise ConfigError(f"field '{where}.{key}' is required")
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is dt.date and isinstance(value, str):
        try:
            value = dt.date.fromisoformat(value)
        except ValueError:
            raise ConfigError(f"field '{where}.{key}': {value!r} is not an ISO date") from None
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"field '{where}.{key}': expected int, got {value!r}")
    if not isinstance(value, kind):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(f"field '{where}.{key}': expected {name}, got {value!r}")
    return value


def _section(raw: Mapping, key: str, allowed: set[str], required: bool = False) -> dict:
    sec = raw.get(key)
    if sec is None:
        if required:
            raise ConfigError(f"section '{key}' is required")
        return {}
    if not isinstance(sec, Mapping):
        raise ConfigError(f"section '{key}' must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown fields in '{key}': {sorted(unknown)}")
    return dict(sec)


@dataclass(frozen=True)
class RunConfig:
    path: Path
    raw: dict
    series_path: Path | None
    events_path: Path | None
    columns: tuple[str, ...] | None
    data_label: str
    model: dict
    train: TrainSettings
    split_date: dt.date | None
    test_end: dt.date | None
    seeds: tuple[int, ...]
    arms: tuple[dict, ...]
    n_jobs: int
    output: Path
    synth: dict | None = field(default=None)

    @property
    def base_dir(self) -> Path:
        return self.path.parent


def load_config(path: str | Path, require_data: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: invalid YAML{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - {"data", "model", "train", "eval", "synth", "output"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    base = path.parent

    data = _section(raw, "data", {"series", "events", "columns", "label", "normalize"})
    series = _get(data, "series", str, "data", required=require_data)
    events = _get(data, "events", str, "data")
    series_path = (base / series) if series else None
    events_path = (base / events) if events else None
    if require_data:
        for key, p in (("series", series_path), ("events", events_path)):
            if p is not None and not p.is_file():
                raise ConfigError(f"field 'data.{key}': file not found: {p}")
    columns = _get(data, "columns", list, "data")

    model = _section(raw, "model", _MODEL_KEYS)
    if "fourier" in model:
        cycles = model["fourier"]
        if not isinstance(cycles, list) or not all(isinstance(c, list) and len(c) == 2 for c in cycles):
            raise ConfigError("field 'model.fourier': expected a list of [period, terms] pairs")
    for key in ("N", "K1", "K2", "H", "seasonal_hidden"):
        _get(model, key, int, "model")
    for key in ("use_1d", "use_2d", "multivariate", "use_seasonal", "use_events", "bypass_conv"):
        _get(model, key, bool, "model")
    _get(model, "target", (str, int), "model")

    tr = _section(raw, "train", {"lr", "epochs", "seed", "split_date", "patience", "beta1", "beta2", "eps"})
    settings = TrainSettings(
        epochs=_get(tr, "epochs", int, "train", 500),
        lr=_get(tr, "lr", float, "train", 0.01),
        beta1=_get(tr, "beta1", float, "train", 0.9),
        beta2=_get(tr, "beta2", float, "train", 0.999),
        eps=_get(tr, "eps", float, "train", 1e-8),
        seed=_get(tr, "seed", int, "train", 0),
        patience=_get(tr, "patience", int, "train"),
        normalize=_get(data, "normalize", bool, "data", True),
    )
    if settings.epochs < 0 or settings.lr < 0:
        raise ConfigError("fields 'train.epochs' and 'train.lr' must be non-negative")

    ev = _section(raw, "eval", {"test_end", "seeds", "arms", "n_jobs"})
    seeds = _get(ev, "seeds", list, "eval", [settings.seed])
    if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds) or not seeds:
        raise ConfigError("field 'eval.seeds': expected a non-empty list of integers")
    arms = _get(ev, "arms", list, "eval", [1, 2, 3])
    parsed_arms = []
    for i, arm in enumerate(arms):
        if isinstance(arm, int) and not isinstance(arm, bool):
            arm = {"model": arm}
        if not isinstance(arm, dict):
            raise ConfigError(f"field 'eval.arms[{i}]': expected an int or mapping")
        extra = set(arm) - {"label", "model", "overrides"}
        if extra:
            raise ConfigError(f"field 'eval.arms[{i}]': unknown keys {sorted(extra)}")
        overrides = arm.get("overrides") or {}
        if set(overrides) - _MODEL_KEYS:
            raise ConfigError(f"field 'eval.arms[{i}].overrides': unknown keys {sorted(set(overrides) - _MODEL_KEYS)}")
        parsed_arms.append(arm)

    synth = raw.get("synth")
    if synth is not None and not isinstance(synth, dict):
        raise ConfigError("section 'synth' must be a mapping")

    return RunConfig(
        path=path,
        raw=raw,
        series_path=series_path,
        events_path=events_path,
        columns=tuple(columns) if columns else None,
        data_label=_get(data, "label", str, "data", path.stem),
        model=model,
        train=settings,
        split_date=_get(tr, "split_date", dt.date, "train"),
        test_end=_get(ev, "test_end", dt.date, "eval"),
        seeds=tuple(seeds),
        arms=tuple(parsed_arms),
        n_jobs=_get(ev, "n_jobs", int, "eval", 1),
        output=base / _get(raw, "output", str, "<root>", "out"),
        synth=synth,
    )


def echo(raw: Any) -> Any:
    """The raw config made JSON-safe (dates become ISO strings)."""
    if isinstance(raw, dict):
        return {str(k): echo(v) for k, v in raw.items()}
    if isinstance(raw, list):
        return [echo(v) for v in raw]
    if isinstance(raw, (dt.date, dt.datetime)):
        return raw.isoformat()
    return raw
