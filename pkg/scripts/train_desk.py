"""Train the desk-scale matcher and the outlier network into runs/cache.

Usage: python scripts/train_desk.py [--seed 0] [--matcher-steps 2000] [--outlier-steps 10000]
"""

import argparse
from pathlib import Path

from noisematch.cli import main as cli

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--matcher-steps", type=int, default=2000)
ap.add_argument("--outlier-steps", type=int, default=10000)
ap.add_argument("--cache", default="runs/cache")
args = ap.parse_args()

cache = Path(args.cache)
cache.mkdir(parents=True, exist_ok=True)
for kind, steps in (("outlier", args.outlier_steps), ("matcher", args.matcher_steps)):
    stem = cache / f"{kind}_s{args.seed}"
    rc = cli(["-v", f"train-{kind}", "--seed", str(args.seed), "--steps", str(steps),
              "--out", f"{stem}.nmw", "--log", f"{stem}_log.csv"])
    if rc:
        raise SystemExit(rc)
