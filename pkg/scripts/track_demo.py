"""Run the rectangle scenario end to end and summarise the tracks it produced.

    python scripts/track_demo.py --out out/rectangle
"""

import argparse
import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from isacsense.pipeline import load_config, run

ap = argparse.ArgumentParser()
ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "rectangle.json"))
ap.add_argument("--out", default="out/rectangle")
args = ap.parse_args()

cfg = load_config(args.config, {"out": args.out})
run(cfg)
out = Path(args.out)
truth = {}
with open(out / "ground_truth.csv") as fh:
    for r in csv.DictReader(fh):
        truth[round(float(r["time_s"]), 1)] = (float(r["x"]), float(r["y"]))
err = defaultdict(list)
with open(out / "tracks.csv") as fh:
    for r in csv.DictReader(fh):
        t = round(float(r["timestamp"]), 1)
        if r["status"] == "confirmed" and t in truth:
            err[r["id"]].append(np.hypot(float(r["x"]) - truth[t][0], float(r["y"]) - truth[t][1]))
pres = json.loads((out / "motion_presence.json").read_text())
print(f"tracks created {pres['tracks_created']}, confirmed {len(pres['confirmed_ids'])}")
for tid, e in sorted(err.items(), key=lambda kv: -len(kv[1])):
    print(f"  id {tid:>3s}: {len(e):4d} confirmed frames, RMSE {np.sqrt(np.mean(np.square(e))):.2f} m")
