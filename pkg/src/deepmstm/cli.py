"""Command-line entry point: ``deepmstm <command> CONFIG [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import RunConfig, echo, load_config
from .data import (
    EventCalendar,
    NormStats,
    SeriesFrame,
    format_real,
    ingest_csv,
    read_events_csv,
    write_events_csv,
    write_series_csv,
)
from .errors import (
    ConfigError,
    DataError,
    DeepMstmError,
    IncompatibleParamsError,
    NumericalError,
    RangeError,
)
from .evaluation import rolling_one_step, run_ablation
from .model import DeepMstm, ModelConfig, load_params, save_params
from .synth import SynthSpec, synth_generate
from .train import train_model, verify_gradients

logger = logging.getLogger("deepmstm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class GradientCheckFailed(Exception):
    pass


# -- helpers ---------------------------------------------------------------------


def _load_data(rc: RunConfig) -> tuple[SeriesFrame, EventCalendar]:
    frame = ingest_csv(rc.series_path, rc.columns)
    calendar = read_events_csv(rc.events_path) if rc.events_path else EventCalendar()
    return frame, calendar


def _model_config(rc: RunConfig, frame: SeriesFrame, calendar: EventCalendar, overrides=None) -> ModelConfig:
    fields = dict(rc.model)
    fields.update(overrides or {})
    try:
        fields["target"] = frame.series_index(fields.get("target", 0))
    except DeepMstmError as exc:
        raise ConfigError(f"field 'model.target': {exc}") from None
    return ModelConfig.from_dict({"M": frame.M, "L": calendar.L, **fields})


def _split(rc: RunConfig, frame: SeriesFrame, N: int, required: bool) -> tuple[int, int]:
    """Training stop index (first test index) and test stop index."""
    if rc.split_date is None:
        if required:
            raise ConfigError("field 'train.split_date' is required for this command")
        return frame.T, frame.T
    if not frame.start < rc.split_date <= frame.dates[-1]:
        raise ConfigError(f"field 'train.split_date': {rc.split_date} is not inside {frame.start}..{frame.dates[-1]}")
    split = frame.index_of(rc.split_date)
    if split <= N:
        raise ConfigError(f"field 'train.split_date': leaves no training windows for N={N}")
    stop = frame.T if rc.test_end is None else frame.index_of(rc.test_end) + 1
    if stop < split:
        raise ConfigError("field 'eval.test_end' precedes the split date")
    return split, stop


def _params_path(rc: RunConfig, given: str | None) -> Path:
    return Path(given) if given else rc.output / "params.json"


def _load_model(rc: RunConfig, frame, calendar, params_path: Path) -> DeepMstm:
    config = _model_config(rc, frame, calendar)
    if not params_path.is_file():
        raise ConfigError(f"parameter file not found: {params_path}")
    params, config, extra = load_params(params_path, config)
    try:
        stats = NormStats(np.array(extra["norm_mean"], dtype=float), np.array(extra["norm_std"], dtype=float))
        origin = frame.start if "origin" not in extra else type(frame.start).fromisoformat(extra["origin"])
    except KeyError as exc:
        raise IncompatibleParamsError(f"{params_path}: missing field {exc.args[0]!r}") from None
    if tuple(extra.get("series_ids", frame.series_ids)) != frame.series_ids:
        raise IncompatibleParamsError(f"{params_path}: trained on series {extra['series_ids']}, data has {list(frame.series_ids)}")
    return DeepMstm(config, params, stats, origin, calendar)


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands --------------------------------------------------------------------


def cmd_fit(args) -> int:
    rc = load_config(args.config)
    frame, calendar = _load_data(rc)
    config = _model_config(rc, frame, calendar)
    split, _ = _split(rc, frame, config.N, required=False)
    model, report = train_model(frame, config, split, rc.train, calendar)
    rc.output.mkdir(parents=True, exist_ok=True)
    extra = {
        "series_ids": list(frame.series_ids),
        "norm_mean": [float(x) for x in model.stats.mean],
        "norm_std": [float(x) for x in model.stats.std],
        "origin": model.origin.isoformat(),
        "event_types": list(calendar.event_types),
        "seed": rc.train.seed,
        "run_config": echo(rc.raw),
    }
    save_params(model.params, config, rc.output / "params.json", extra)
    report.write(rc.output / "report.jsonl")
    summary = {
        "epochs": report.epochs_run,
        "final_mae": report.epoch_mae[-1] if report.epoch_mae else None,
        "stopped_early": report.stopped_early,
        "wall_clock_s": report.wall_clock,
        "seed": report.seed,
        "model": config.to_dict(),
        "train": asdict(rc.train),
        "run_config": echo(rc.raw),
    }
    (rc.output / "report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"trained {report.epochs_run} epochs, final MAE {summary['final_mae']}; wrote {rc.output / 'params.json'}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    rc = load_config(args.config)
    frame, calendar = _load_data(rc)
    model = _load_model(rc, frame, calendar, _params_path(rc, args.params))
    split, stop = _split(rc, frame, model.config.N, required=True)
    if args.horizon is not None:
        if args.horizon < 0:
            raise ConfigError("--horizon must be >= 0")
        if split + args.horizon > frame.T:
            raise RangeError(f"horizon {args.horizon} runs past the end of the data")
        stop = split + args.horizon
    out = Path(args.out) if args.out else rc.output / "forecast.csv"
    rows = []
    if stop > split:
        result = rolling_one_step(model, frame, split, stop, model.config.target, mode=args.mode)
        rows = [
            (d.isoformat(), format_real(f), format_real(y))
            for d, f, y in zip(result.dates, result.forecasts, result.truth)
        ]
        print(f"{args.mode}: rmse {result.rmse:.6g} rrmse {result.rrmse:.6g} over {len(rows)} steps")
    _write_rows(out, ["date", "forecast", "truth"], rows)
    return EXIT_OK


def cmd_decompose(args) -> int:
    rc = load_config(args.config)
    frame, calendar = _load_data(rc)
    model = _load_model(rc, frame, calendar, _params_path(rc, args.params))
    N = model.config.N
    if args.start or args.end:
        start = frame.index_of(type(frame.start).fromisoformat(args.start)) if args.start else N
        stop = frame.index_of(type(frame.start).fromisoformat(args.end)) + 1 if args.end else frame.T
    elif rc.split_date is not None:
        start, stop = _split(rc, frame, N, required=True)
    else:
        start, stop = N, frame.T
    dec = model.decompose(frame, start, stop)
    out = Path(args.out) if args.out else rc.output / "decomposition.csv"
    _write_rows(
        out,
        ["date", "truth", "d", "s", "e", "forecast"],
        (
            (d.isoformat(), *(format_real(v) for v in (y, dd, ss, ee, ff)))
            for d, y, dd, ss, ee, ff in zip(dec.dates, dec.truth, dec.d, dec.s, dec.e, dec.forecast)
        ),
    )
    print(f"wrote {len(dec.dates)} rows to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = load_config(args.config)
    frame, calendar = _load_data(rc)
    base = _model_config(rc, frame, calendar)
    arms = []
    for arm in rc.arms:
        cfg = base.variant(arm["model"]) if "model" in arm else base
        overrides = arm.get("overrides") or {}
        if overrides:
            cfg = _model_config(rc, frame, calendar, {**cfg.to_dict(), **overrides})
        arms.append((arm.get("label", f"Model {arm.get('model', '')}".strip()), cfg))
    split, stop = _split(rc, frame, base.N, required=True)
    table = run_ablation(frame, arms, rc.seeds, split, stop, rc.train, calendar, rc.data_label, rc.n_jobs)
    rc.output.mkdir(parents=True, exist_ok=True)
    table.write_csv(rc.output / "ablation.csv")
    table.write_json(rc.output / "ablation.json", {"run_config": echo(rc.raw)})
    for label in table.labels():
        print(f"{label}: median rmse {table.median(label):.6g}, median rrmse {table.median(label, 'rrmse'):.6g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    rc = load_config(args.config, require_data=False)
    if rc.synth is None:
        raise ConfigError("section 'synth' is required for the synth command")
    seed = args.seed if args.seed is not None else int(rc.synth.get("seed", rc.train.seed))
    spec = SynthSpec.from_dict(rc.synth)
    frame, truth, calendar = synth_generate(spec, seed)
    out = Path(args.out) if args.out else rc.output
    out.mkdir(parents=True, exist_ok=True)
    write_series_csv(frame, out / "series.csv")
    write_events_csv(calendar, out / "events.csv")
    header = ["date"]
    for sid in frame.series_ids:
        header += [f"{sid}:value", f"{sid}:d", f"{sid}:s", f"{sid}:e", f"{sid}:noise"]
    rows = []
    for j, day in enumerate(frame.dates):
        row = [day.isoformat()]
        for i in range(frame.M):
            parts = (frame.values[i, j], truth.d[i, j], truth.s[i, j], truth.e[i, j], truth.noise[i, j])
            row += [format_real(v) for v in parts]
        rows.append(row)
    _write_rows(out / "truth.csv", header, rows)
    print(f"wrote {frame.M} series x {frame.T} days to {out}")
    return EXIT_OK


def cmd_verify_grad(args) -> int:
    if args.config:
        rc = load_config(args.config)
        frame, calendar = _load_data(rc)
        config = _model_config(rc, frame, calendar)
    else:
        config = ModelConfig(
            M=args.M, N=args.N, K1=args.K1, K2=args.K2, H=args.H, fourier=((7, args.g),), L=args.L
        )
    result = verify_gradients(config, seed=args.seed, tol=args.tol, h=args.h)
    print(json.dumps({k: v for k, v in asdict(result).items()}, default=list))
    if not result.passed:
        raise GradientCheckFailed(
            f"max relative error {result.max_rel_error:.3g} at {result.worst_param}{list(result.worst_index or [])}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepmstm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train and write params + report")
    p.add_argument("config")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("forecast", help="forecast the test range")
    p.add_argument("config")
    p.add_argument("--params")
    p.add_argument("--horizon", type=int)
    p.add_argument("--mode", choices=["one-step", "recursive"], default="one-step")
    p.add_argument("--out")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("decompose", help="write trend/seasonal/event components")
    p.add_argument("config")
    p.add_argument("--params")
    p.add_argument("--start", help="first date (ISO)")
    p.add_argument("--end", help="last date (ISO, inclusive)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("ablate", help="run the ablation arms over seeds")
    p.add_argument("config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="generate synthetic series with ground truth")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify-grad", help="check analytic gradients against central differences")
    p.add_argument("config", nargs="?")
    for name, default in (("M", 2), ("N", 5), ("K1", 2), ("K2", 2), ("H", 3), ("g", 2), ("L", 1), ("seed", 0)):
        p.add_argument(f"--{name}", type=int, default=default)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_verify_grad)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IncompatibleParamsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RangeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, GradientCheckFailed) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DeepMstmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
