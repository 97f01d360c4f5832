"""Breathing and heart-rate error against CFR SNR for the bundled vitals scene.

    python scripts/vitals_snr_sweep.py --seeds 5 --snr 0 5 10 20
"""

import argparse
import json
import tempfile
from pathlib import Path

import numpy as np

from isacsense.pipeline import load_config, run

ap = argparse.ArgumentParser()
ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "vitals.json"))
ap.add_argument("--seeds", type=int, default=5)
ap.add_argument("--snr", type=float, nargs="+", default=[-5.0, 0.0, 5.0, 10.0, 20.0])
args = ap.parse_args()

raw = json.loads(Path(args.config).read_text())
truth = raw["scenario"]["scene"]["targets"][0]["vital"]
print(f"{'snr dB':>7s} {'resp err':>9s} {'heart err':>10s} {'heart conf dB':>14s}")
with tempfile.TemporaryDirectory() as tmp:
    for snr in args.snr:
        raw["scenario"]["snr_db"] = snr
        errs = []
        for seed in range(args.seeds):
            cfg = load_config(data=raw, overrides={"seed": seed, "out": tmp,
                                                   "export": {"binaries": False, "pgm": False}})
            run(cfg)
            row = (Path(tmp) / "vitals.csv").read_text().splitlines()[1].split(",")
            errs.append((float(row[1]) - truth["resp_per_min"], float(row[2]) - truth["heart_per_min"], float(row[4])))
        e = np.array(errs)
        print(f"{snr:7.1f} {np.abs(e[:, 0]).max():9.2f} {np.abs(e[:, 1]).max():10.2f} {e[:, 2].mean():14.1f}")
