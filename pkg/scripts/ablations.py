"""Run the benchmark once per ablation variant on identical pairs and tabulate mean NCM.

Variants: full model, FPM disabled, absolute positional encoding, and classical
consensus in place of the outlier network. All reuse the same trained weights.
"""

import argparse
from pathlib import Path

import torch

from noisematch.bench import DEFAULT_SWEEPS, run_bench, summarize, summary_path, synthetic_pairs, write_report, write_summary
from noisematch.pipeline import Pipeline, PipelineConfig

VARIANTS = {
    "full": {},
    "fpm_off": {"use_fpm": False},
    "absolute_pe": {"pe_mode": "absolute"},
    "consensus": {"outlier": "consensus"},
}

ap = argparse.ArgumentParser()
ap.add_argument("--pairs", type=int, default=10)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--cache", default="runs/cache")
ap.add_argument("--out-dir", default="runs/ablations")
args = ap.parse_args()

torch.set_num_threads(1)
cache, out_dir = Path(args.cache), Path(args.out_dir)
out_dir.mkdir(parents=True, exist_ok=True)
pairs = synthetic_pairs(args.pairs, args.seed)
weights = [cache / "matcher_s0.nmw", cache / "outlier_s0.nmw"]

table = {}
for name, changes in VARIANTS.items():
    pipe = Pipeline.from_files(PipelineConfig(seed=args.seed, **changes), weights)
    rows = run_bench(pipe, pairs, DEFAULT_SWEEPS, seed=args.seed)
    summary = summarize(rows)
    write_report(rows, out_dir / f"{name}.csv")
    write_summary(summary, summary_path(out_dir / f"{name}.csv"))
    table[name] = {(s.noise_type, s.noise_level): s.mean_ncm for s in summary}

levels = list(table["full"])
print("level".ljust(16) + "".join(n.rjust(13) for n in VARIANTS))
for key in levels:
    print(f"{key[0]}:{key[1]:g}".ljust(16) + "".join(f"{table[n][key]:13.1f}" for n in VARIANTS))
