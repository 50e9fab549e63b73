"""Gaussian and stripe sweeps over held-out synthetic pairs; prints ACR curves.

Usage: python scripts/noise_sweep.py [--pairs 20] [--seed 0] [--out runs/sweep.csv]
"""

import argparse
from pathlib import Path

import torch

from noisematch.bench import DEFAULT_SWEEPS, acr_curve, run_bench, summarize, summary_path, synthetic_pairs, write_report, write_summary
from noisematch.pipeline import Pipeline, PipelineConfig

ap = argparse.ArgumentParser()
ap.add_argument("--pairs", type=int, default=20)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--cache", default="runs/cache")
ap.add_argument("--out", default="runs/sweep.csv")
args = ap.parse_args()

torch.set_num_threads(1)
cache = Path(args.cache)
pipe = Pipeline.from_files(PipelineConfig(seed=args.seed), [cache / "matcher_s0.nmw", cache / "outlier_s0.nmw"])
rows = run_bench(pipe, synthetic_pairs(args.pairs, args.seed), DEFAULT_SWEEPS, seed=args.seed)
summary = summarize(rows)
Path(args.out).parent.mkdir(parents=True, exist_ok=True)
write_report(rows, args.out)
write_summary(summary, summary_path(args.out))

for kind, _ in DEFAULT_SWEEPS:
    curve = acr_curve(summary, kind)
    print(kind.ljust(9) + "  ".join(f"{lvl:g}:{'-' if a is None else f'{a:.3f}'}" for lvl, a in curve))
