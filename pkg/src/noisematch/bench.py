"""Noise-sweep benchmark: inject noise into the query, match, filter, score."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import LoadError, ParameterError
from .geometry import EvalReport, acr, evaluate_pair
from .noise import GAUSSIAN_SWEEP, STRIPE_SWEEP, NoiseSpec
from .synth import generate_pair, read_pgm
from .tensor import Rng

log = logging.getLogger(__name__)

REPORT_HEADER = ["pair_id", "noise_type", "noise_level", "ncm", "sr", "rmse", "rt_s"]
SUMMARY_HEADER = ["noise_type", "noise_level", "pairs", "mean_ncm", "sr", "mean_rmse", "mean_rt_s", "acr", "borderline"]
DEFAULT_SWEEPS = (("gaussian", GAUSSIAN_SWEEP), ("stripe", STRIPE_SWEEP))


@dataclass
class BenchPair:
    pair_id: str
    image_a: np.ndarray  # query, receives the noise
    image_b: np.ndarray  # reference, never modified
    h_gt: np.ndarray


@dataclass
class BenchRow:
    pair_id: str
    noise_type: str
    noise_level: float
    report: EvalReport


@dataclass
class LevelSummary:
    noise_type: str
    noise_level: float
    pairs: int
    mean_ncm: float
    sr: float
    mean_rmse: float
    mean_rt_s: float
    acr: float | None
    borderline: int


def parse_sweep(text: str) -> tuple[str, tuple[float, ...]]:
    """``"gaussian:5,2,0"`` -> ("gaussian", (5.0, 2.0, 0.0))."""
    kind, sep, levels = text.partition(":")
    kind = kind.strip()
    if not sep or kind not in ("gaussian", "stripe"):
        raise ParameterError(f"sweep must look like gaussian:5,2 or stripe:0.05,0.1 (got {text!r})")
    try:
        values = tuple(float(v) for v in levels.split(",") if v.strip())
    except ValueError as exc:
        raise ParameterError(f"bad sweep level in {text!r}") from exc
    if not values:
        raise ParameterError(f"sweep {text!r} has no levels")
    return kind, values


def synthetic_pairs(n: int, seed: int = 0, size: int = 128) -> list[BenchPair]:
    """Held-out pairs; the seed stream is disjoint from the one used in training."""
    seeds = Rng(seed, "bench/pairs").next_u64(n) >> np.uint64(2)
    out = []
    for k, s in enumerate(seeds):
        pair = generate_pair(int(s), size)
        out.append(BenchPair(f"syn{k:04d}", pair.image_a, pair.image_b, pair.h_gt))
    return out


def load_pair_dir(path: str | Path) -> list[BenchPair]:
    """Pairs stored as ``<id>_a.pgm``, ``<id>_b.pgm`` and ``<id>_h.txt`` (3x3, whitespace separated)."""
    root = Path(path)
    if not root.is_dir():
        raise ParameterError(f"{root} is not a directory")
    pairs = []
    for fa in sorted(root.glob("*_a.pgm")):
        pid = fa.name[: -len("_a.pgm")]
        try:
            image_a = read_pgm(fa)
            image_b = read_pgm(root / f"{pid}_b.pgm")
            h = np.loadtxt(root / f"{pid}_h.txt", dtype=np.float64).reshape(3, 3)
        except (OSError, ValueError, LoadError) as exc:
            log.warning("skipping pair %s: %s", pid, exc)
            continue
        pairs.append(BenchPair(pid, image_a, image_b, h))
    return pairs


def _derived_seed(seed: int, label: str) -> int:
    return int(Rng(seed, label).next_u64(1)[0] >> np.uint64(2))


def _bench_one(pipeline, pair: BenchPair, sweeps, seed: int, timing: bool) -> list[BenchRow]:
    rows = []
    eval_seed = _derived_seed(seed, f"bench/{pair.pair_id}/consensus")
    levels = [("none", 0.0)] + [(kind, float(v)) for kind, values in sweeps for v in values]
    for kind, level in levels:
        if kind == "none":
            query = pair.image_a
        else:
            noise_seed = _derived_seed(seed, f"bench/{pair.pair_id}/{kind}/{level!r}")
            query = NoiseSpec(kind, level, noise_seed).apply(pair.image_a)
        t0 = time.perf_counter()
        kept, _, _ = pipeline.run(query, pair.image_b)
        runtime = time.perf_counter() - t0 if timing else float("nan")
        report = evaluate_pair(kept, pair.h_gt, runtime, seed=eval_seed)
        rows.append(BenchRow(pair.pair_id, kind, level, report))
    return rows


def run_bench(pipeline, pairs: Sequence[BenchPair], sweeps=DEFAULT_SWEEPS, seed: int = 0,
              timing: bool = False, workers: int = 1) -> list[BenchRow]:
    """Rows come out pair-major then level order (clean first) regardless of ``workers``."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(lambda p: _bench_one(pipeline, p, sweeps, seed, timing), pairs))
    else:
        chunks = [_bench_one(pipeline, p, sweeps, seed, timing) for p in pairs]
    return [row for chunk in chunks for row in chunk]


def summarize(rows: Sequence[BenchRow]) -> list[LevelSummary]:
    order: list[tuple[str, float]] = []
    groups: dict[tuple[str, float], list[EvalReport]] = {}
    for r in rows:
        key = (r.noise_type, r.noise_level)
        if key not in groups:
            order.append(key)
            groups[key] = []
        groups[key].append(r.report)
    clean = groups.get(("none", 0.0), [])
    clean_ncm = float(np.mean([g.ncm for g in clean])) if clean else 0.0
    out = []
    for key in order:
        g = groups[key]
        mean_ncm = float(np.mean([r.ncm for r in g]))
        out.append(LevelSummary(
            noise_type=key[0], noise_level=key[1], pairs=len(g), mean_ncm=mean_ncm,
            sr=float(np.mean([r.success for r in g])),
            mean_rmse=float(np.mean([r.rmse for r in g])),
            mean_rt_s=float(np.mean([r.runtime for r in g])),
            acr=acr(mean_ncm, clean_ncm) if clean else None,
            borderline=sum(r.borderline for r in g),
        ))
    return out


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def write_report(rows: Sequence[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(REPORT_HEADER)
        for r in rows:
            out.writerow([r.pair_id, r.noise_type, f"{r.noise_level:g}", r.report.ncm, int(r.report.success),
                          _fmt(r.report.rmse), _fmt(r.report.runtime)])


def write_summary(summary: Sequence[LevelSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(SUMMARY_HEADER)
        for s in summary:
            out.writerow([s.noise_type, f"{s.noise_level:g}", s.pairs, _fmt(s.mean_ncm), _fmt(s.sr),
                          _fmt(s.mean_rmse), _fmt(s.mean_rt_s), "" if s.acr is None else _fmt(s.acr),
                          s.borderline])


def summary_path(report: str | Path) -> Path:
    p = Path(report)
    return p.with_name(p.stem + "_summary" + p.suffix)


def acr_curve(summary: Sequence[LevelSummary], kind: str) -> list[tuple[float, float | None]]:
    return [(s.noise_level, s.acr) for s in summary if s.noise_type == kind]


def monotone_within(values: Sequence[float], inversions: int = 1) -> bool:
    """Nonincreasing apart from at most ``inversions`` adjacent rises."""
    rises = sum(1 for a, b in zip(values, values[1:]) if b > a)
    return rises <= inversions
