"""Command-line entry point: ``noisematch <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from .bench import parse_sweep, run_bench, summarize, summary_path, synthetic_pairs, load_pair_dir, write_report, write_summary
from .errors import LoadError, ParameterError, TrainingDiverged
from .noise import NoiseSpec
from .pipeline import Pipeline, PipelineConfig, count_parameters, load_config, parse_config_text
from .selftest import run_selftest
from .synth import read_pgm, write_pgm
from .train import MatcherTrainConfig, OutlierTrainConfig, train_matcher_desk, train_outlier_network

log = logging.getLogger("noisematch")


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "profile", None):
        cfg = cfg.replace(profile=args.profile)
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if getattr(args, "set", None):
        cfg = parse_config_text("\n".join(args.set), cfg)
    return cfg


def _build_pipeline(cfg: PipelineConfig, weights, random_init: bool = False) -> Pipeline:
    if random_init or not weights:
        if not random_init:
            raise ParameterError("--weights is required (or pass --random-init)")
        return Pipeline.random_init(cfg)
    return Pipeline.from_files(cfg, weights)


def cmd_match(args) -> int:
    cfg = _pipeline_config(args)
    pipe = _build_pipeline(cfg, args.weights, args.random_init)
    a, b = read_pgm(args.left), read_pgm(args.right)
    _, raw, w = pipe.run(a, b)
    if cfg.outlier == "none":
        raw.write_csv(args.out)
    else:
        raw.write_csv(args.out, weights=w)
    print(f"{len(raw)} matches, {int((w >= cfg.inlier_threshold).sum())} kept -> {args.out}")
    return 0


def cmd_noise(args) -> int:
    image = read_pgm(args.input)
    write_pgm(args.out, NoiseSpec(args.kind, args.level, args.seed).apply(image))
    return 0


def _write_meta(out: str, **fields) -> None:
    Path(str(out) + ".json").write_text(json.dumps(fields, indent=2, sort_keys=True) + "\n")


def cmd_train_outlier(args) -> int:
    cfg = OutlierTrainConfig(seed=args.seed, steps=args.steps)
    t0 = time.perf_counter()
    train_outlier_network(cfg, args.out, args.log)
    _write_meta(args.out, kind="outlier", seed=args.seed, steps=args.steps, seconds=time.perf_counter() - t0)
    return 0


def cmd_train_matcher(args) -> int:
    cfg = MatcherTrainConfig(seed=args.seed, steps=args.steps, pipeline=_pipeline_config(args))
    t0 = time.perf_counter()
    train_matcher_desk(cfg, args.out, args.log)
    _write_meta(args.out, kind="matcher", seed=args.seed, steps=args.steps, seconds=time.perf_counter() - t0)
    return 0


def cmd_bench(args) -> int:
    cfg = _pipeline_config(args)
    pipe = _build_pipeline(cfg, args.weights, args.random_init)
    pairs = load_pair_dir(args.pairs) if args.pairs else synthetic_pairs(args.synthetic, args.seed, args.size)
    sweeps = [parse_sweep(s) for s in args.sweep] if args.sweep else []
    rows = run_bench(pipe, pairs, sweeps, seed=args.seed, timing=args.timing, workers=args.workers)
    write_report(rows, args.out)
    summary = summarize(rows)
    write_summary(summary, summary_path(args.out))
    for s in summary:
        acr = "-" if s.acr is None else f"{s.acr:.3f}"
        print(f"{s.noise_type:>8} {s.noise_level:>6g}  ncm {s.mean_ncm:8.2f}  sr {s.sr:.2f}  rmse {s.mean_rmse:6.3f}  acr {acr}")
    return 0


def cmd_params(args) -> int:
    cfg = _pipeline_config(args)
    pipe = Pipeline(cfg)
    n_match = count_parameters(pipe.model)
    n_out = count_parameters(pipe.outlier_net) if pipe.outlier_net is not None else 0
    print(f"matcher {n_match}\noutlier {n_out}\ntotal {n_match + n_out}")
    return 0


def cmd_selftest(args) -> int:
    return 0 if run_selftest() else 1


def _add_pipeline_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--config", help="flat key = value file overriding pipeline settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="single override, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisematch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match two PGM images and write a correspondence CSV")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--weights", action="append", default=[])
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--out", required=True)
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("noise", help="corrupt a PGM image")
    p.add_argument("--input", required=True)
    p.add_argument("--kind", choices=["gaussian", "stripe"], required=True)
    p.add_argument("--level", type=float, required=True, help="SNR in dB (gaussian) or variance (stripe)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("train-outlier", help="train the outlier network on synthetic two-view data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-step loss CSV")
    p.set_defaults(func=cmd_train_outlier)

    p = sub.add_parser("train-matcher", help="train the desk matcher on synthetic homography pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2_000)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-step loss CSV")
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_train_matcher)

    p = sub.add_parser("bench", help="noise-sweep benchmark")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pairs", help="directory of <id>_a.pgm, <id>_b.pgm, <id>_h.txt")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N held-out synthetic pairs")
    p.add_argument("--size", type=int, default=128, help="synthetic pair size")
    p.add_argument("--sweep", action="append", help="e.g. gaussian:5,2,0,-2,-5 (repeatable)")
    p.add_argument("--weights", action="append", default=[])
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", action="store_true", help="record wall-clock runtime (otherwise rt_s is nan)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("params", help="print parameter counts")
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("selftest", help="run invariant checks; exit 0 iff all pass")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ParameterError, LoadError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
