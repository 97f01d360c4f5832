"""Command-line entry point.

Pipeline subcommands run every stage up to and including the named one;
``run`` executes the stages listed in the config.  Exit codes: 0 ok,
2 config error, 3 stage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import env
from . import io as aio
from .pipeline import STAGES, ConfigError, StageError, load_config, run

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _pipeline_parser(sub, name: str, help_: str):
    p = sub.add_parser(name, help=help_)
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--workers", type=int, help="parallel windows in the feature stage")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isacsense", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for s in STAGES:
        _pipeline_parser(sub, s, f"run the pipeline through the {s} stage")
    _pipeline_parser(sub, "run", "run the stages listed in the config")

    e = sub.add_parser("env", help="link-level environmental tools")
    es = e.add_subparsers(dest="env_command", required=True)
    r = es.add_parser("rain", help="A = a R^b forward or inverse")
    r.add_argument("--a", type=float, required=True)
    r.add_argument("--b", type=float, required=True)
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--rate", type=float, help="rain rate, mm/h")
    g.add_argument("--attenuation", type=float, help="specific attenuation, dB/km")
    r.add_argument("--out", help="directory for rain.json")

    wf = es.add_parser("water-fit", help="fit the water-level regression")
    wf.add_argument("--log", required=True, help="LinkLog CSV with level_cm")
    wf.add_argument("--train-hours", type=float, default=12.0)
    wf.add_argument("--standardize", action="store_true")
    wf.add_argument("--out", required=True)

    wp = es.add_parser("water-predict", help="predict water level from a LinkLog CSV")
    wp.add_argument("--model", required=True)
    wp.add_argument("--log", required=True)
    wp.add_argument("--impute", choices=["ffill"], default=None)
    wp.add_argument("--out", required=True)

    rs = es.add_parser("rssi-shift", help="per-cell RSSI displacement between two snapshots")
    rs.add_argument("--a", required=True, help="CSV with columns cell, rssi_dbm")
    rs.add_argument("--b", required=True)
    rs.add_argument("--out", help="directory for shift_report.json")
    return ap


def _emit(obj, out: Optional[str], name: str):
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text + "\n")


def read_snapshot(path) -> dict:
    """Cell -> list of RSSI samples from a ``cell, rssi_dbm`` CSV."""
    snap: dict = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or not {"cell", "rssi_dbm"} <= set(rd.fieldnames):
            raise env.EnvError(f"{path}: need columns 'cell' and 'rssi_dbm'")
        for i, row in enumerate(rd, start=2):
            try:
                snap.setdefault(row["cell"], []).append(float(row["rssi_dbm"]))
            except (TypeError, ValueError):
                raise env.EnvError(f"{path}: row {i} column 'rssi_dbm': not a number") from None
    return snap


def _env(args) -> int:
    if args.env_command == "rain":
        model = env.RainModel(args.a, args.b)
        if args.rate is not None:
            res = {"rate_mm_h": args.rate, "attenuation_db_km": env.rain_attenuation(args.rate, model)}
        else:
            res = {"attenuation_db_km": args.attenuation, "rate_mm_h": env.rain_rate(args.attenuation, model)}
        _emit({"a": args.a, "b": args.b, **res}, args.out, "rain.json")
        return EXIT_OK
    if args.env_command == "water-fit":
        lg = env.read_link_log(args.log)
        t0 = lg.timestamps[0]
        span = (t0, t0 + args.train_hours * 3600)
        model = env.fit_water_level(lg, span, args.standardize)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "water_model.json").write_text(model.to_json() + "\n")
        report = {"training_rmse_cm": model.training_rmse, "training_rows": int(np.sum(lg.timestamps < span[1]))}
        test = lg.subset(lg.timestamps >= span[1])
        if len(test) and test.level_cm is not None:
            ok = ~test.mask.any(axis=1) & np.isfinite(test.level_cm)
            if ok.any():
                pred = env.predict_water_level(model, test.features[ok])
                report["test_rmse_cm"] = env.rmse(pred, test.level_cm[ok])
                report["test_rows"] = int(ok.sum())
        _emit(report, args.out, "fit_report.json")
        return EXIT_OK
    if args.env_command == "water-predict":
        model = env.WaterModel.from_json(Path(args.model).read_text())
        lg = env.read_link_log(args.log)
        pred = env.predict_water_level(model, lg, impute=args.impute)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        rows = [(env._iso(t), v) for t, v in zip(lg.timestamps, pred)]
        aio.write_csv(Path(args.out) / "predictions.csv", ["timestamp", "level_cm"], rows)
        print(f"wrote {len(rows)} predictions to {Path(args.out) / 'predictions.csv'}")
        return EXIT_OK
    if args.env_command == "rssi-shift":
        rep = env.rssi_shift(read_snapshot(args.a), read_snapshot(args.b))
        _emit(json.loads(rep.to_json()), args.out, "shift_report.json")
        return EXIT_OK
    raise AssertionError(args.env_command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "env":
        try:
            return _env(args)
        except (env.EnvError, OSError, json.JSONDecodeError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    overrides = {"seed": args.seed, "out": args.out, "workers": args.workers}
    if args.command != "run":
        overrides["stages"] = [args.command]
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(f"{len(manifest.files)} files written to {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
