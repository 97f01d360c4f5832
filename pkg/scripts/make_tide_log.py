"""Write the bundled synthetic tide log used by the ``env water-*`` examples.

    python scripts/make_tide_log.py configs/tide_log.csv
"""

import argparse

from isacsense.env import synthetic_tide_log, write_link_log

ap = argparse.ArgumentParser()
ap.add_argument("out")
ap.add_argument("--hours", type=float, default=24.0)
ap.add_argument("--noise-db", type=float, default=1.0)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

# 2023-04-13 00:00 UTC, so the timestamps read like a field log
log, sens = synthetic_tide_log(hours=args.hours, noise_db=args.noise_db, seed=args.seed, start=1681344000.0)
write_link_log(log, args.out)
print(f"{len(log)} rows, sensitivities (dB/cm): " + " ".join(f"{c}={m:+.3f}" for c, m in zip(log.carriers, sens)))
