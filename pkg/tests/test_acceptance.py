"""Acceptance gate. Each criterion prints one PASS/FAIL line (also shown in the terminal summary).

Trained weights are cached under ``runs/cache`` (override with ``NOISEMATCH_CACHE``); when
missing they are produced with the CLI training commands, which is slow (tens of minutes).
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from noisematch.bench import monotone_within, run_bench, summarize, synthetic_pairs, write_report, write_summary
from noisematch.cli import main as cli_main
from noisematch.geometry import acr
from noisematch.losses import classification_loss, coarse_loss, essential_loss, fine_loss, reprojection_error, total_loss
from noisematch.matcher import CoarseMatchSet, dual_softmax, fine_match, heatmap_offset, heatmap_variance, select_coarse, spatial_expectation
from noisematch.noise import GAUSSIAN_SWEEP, STRIPE_SWEEP
from noisematch.outlier import CorrespondenceBatch, OutlierNet, classify, normalize_essential, weighted_eight_point
from noisematch.pipeline import Pipeline, PipelineConfig
from noisematch.synth import two_view_sample
from noisematch.tensor import Rng, grad_check, load_into, load_weights
from noisematch.train import outlier_accuracy
from conftest import report_criterion, t

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("NOISEMATCH_CACHE", ROOT / "runs" / "cache"))
SEED = 0
HELD_OUT_PAIRS = 20
SWEEPS = [("gaussian", GAUSSIAN_SWEEP), ("stripe", STRIPE_SWEEP)]


# --------------------------------------------------------------------------
# shared artefacts
# --------------------------------------------------------------------------

def _cached(name: str, command: list[str]) -> tuple[Path, dict]:
    out = CACHE / f"{name}.nmw"
    meta = Path(str(out) + ".json")
    if not out.exists() or not meta.exists():
        CACHE.mkdir(parents=True, exist_ok=True)
        rc = cli_main(command + ["--out", str(out), "--log", str(CACHE / f"{name}_log.csv")])
        assert rc == 0, f"training command failed: {command}"
    return out, json.loads(meta.read_text())


@pytest.fixture(scope="session")
def outlier_weights():
    return _cached(f"outlier_s{SEED}", ["train-outlier", "--seed", str(SEED), "--steps", "10000"])


@pytest.fixture(scope="session")
def matcher_weights():
    return _cached(f"matcher_s{SEED}", ["train-matcher", "--seed", str(SEED), "--steps", "2000"])


@pytest.fixture(scope="session")
def held_out_pairs():
    return synthetic_pairs(HELD_OUT_PAIRS, seed=SEED)


@pytest.fixture(scope="session")
def trained_pipeline(matcher_weights, outlier_weights):
    torch.set_num_threads(1)
    return Pipeline.from_files(PipelineConfig(seed=SEED), [matcher_weights[0], outlier_weights[0]])


@pytest.fixture(scope="session")
def sweep_rows(trained_pipeline, held_out_pairs):
    return run_bench(trained_pipeline, held_out_pairs, SWEEPS, seed=SEED)


# --------------------------------------------------------------------------
# 1. closed-form examples
# --------------------------------------------------------------------------

def _one_hot(i, j, n=5):
    z = torch.zeros(1, n, n, dtype=torch.float64)
    z[0, i, j] = 1.0
    return z


def _exact_views(seed, n):
    s = two_view_sample(Rng(seed, "acceptance/views"), n, 1.0, jitter_px=0.0)
    return s, t(s.coords), t(s.e_gt)


def _closed_form_examples():
    close = lambda a, b: abs(float(a) - float(b)) <= 1e-9
    uniform = torch.full((1, 5, 5), 1 / 25, dtype=torch.float64)
    tokens = np.random.default_rng(0).normal(size=(16, 16, 64))
    centre_fine = t(tokens / np.linalg.norm(tokens, axis=-1, keepdims=True) * 100)
    centre = fine_match(CoarseMatchSet(np.array([5]), np.array([5]), np.array([1.0]), (4, 4), (4, 4)),
                        centre_fine, centre_fine, 5, None)
    _, coords, e_gt = _exact_views(1, 20)
    sel = select_coarse(t([[0.9, 0.1], [0.2, 0.8]]), 0.2)
    tie = select_coarse(t([[0.1, 0.4, 0.4], [0.0, 0.1, 0.1]]), 0.2)
    sig = 1 / (1 + math.exp(-10))
    ds = dual_softmax(t([[10.0, 0.0], [0.0, 10.0]]))
    return {
        "dual_softmax 1x1": close(dual_softmax(t([[2.0]])).item(), 1.0),
        "dual_softmax 2x2 equal": bool(torch.all(dual_softmax(t(np.zeros((2, 2)))) == 0.25)),
        "dual_softmax diag 10": close(ds[0, 0], sig ** 2) and close(ds[0, 1], (1 - sig) ** 2),
        "select_coarse diagonal": list(zip(sel.idx_a.tolist(), sel.idx_b.tolist())) == [(0, 0), (1, 1)],
        "select_coarse below threshold": len(select_coarse(t([[0.15]]), 0.2)) == 0,
        "select_coarse tie": list(zip(tie.idx_a.tolist(), tie.idx_b.tolist())) == [(0, 1)],
        "expectation centre one-hot": bool(torch.all(heatmap_offset(_one_hot(2, 2)) == 0))
        and np.allclose(centre.coords, [[8, 8, 8, 8]], atol=1e-9),
        "expectation grid cell (1,1)": np.allclose(spatial_expectation(_one_hot(0, 0)).numpy(), -0.6, atol=1e-9),
        "expectation uniform offset": np.allclose(heatmap_offset(uniform).numpy(), 0, atol=1e-9),
        "uniform heatmap maximal variance": _uniform_is_variance_max(),
        "coarse loss single cell": close(coarse_loss(t([[0.5]]), t([[1.0]])), math.log(2)),
        "coarse loss perfect": coarse_loss(t(np.eye(3)), t(np.eye(3))).item() <= 1e-5,
        "reprojection identity": np.all(reprojection_error([[3.0, 4.0]], [[3.0, 4.0]], np.eye(3)) == 0),
        "reprojection translation": np.allclose(
            reprojection_error([[1.0, 1.0]], [[2.0, 5.0]], np.array([[1, 0, 3.0], [0, 1, 0], [0, 0, 1]])),
            [[2.0, -4.0]], atol=1e-9),
        "fine loss on target": fine_loss(uniform, heatmap_offset(uniform)).item() == 0.0,
        "fine loss variance floor": close(fine_loss(_one_hot(2, 2), t([[0.1, 0.0]])) * 1e-6, 0.1),
        "classification loss w=0.5": close(classification_loss(t([0.5]), t([1.0])), math.log(2)),
        "classification loss perfect": classification_loss(t([0.0, 1.0]), t([0.0, 1.0])).item() <= 1e-5,
        "essential loss exact": essential_loss(normalize_essential(e_gt), e_gt, coords).item() < 1e-12,
        "total loss zero": total_loss(0.0, 0.0, 0.0, 0.0) == 0.0,
        "total loss 2.6": close(total_loss(1.0, 1.0, 1.0, 1.0, 0.5, 0.1), 2.6),
        "total loss beta linear": close(total_loss(0, 0, 0, 3.0, 0.5, 0.2) - total_loss(0, 0, 0, 3.0, 0.5, 0.1), 0.3),
        "acr 434/993": round(acr(434, 993), 3) == 0.437,
        "acr equal": acr(7, 7) == 1.0,
        "acr zero noisy": acr(0, 7) == 0.0,
    }


def _uniform_is_variance_max() -> bool:
    uniform = heatmap_variance(torch.full((1, 5, 5), 1 / 25, dtype=torch.float64)).item()
    corners = torch.zeros(1, 5, 5, dtype=torch.float64)
    corners[0, 0, 0] = corners[0, 4, 4] = 0.5
    return uniform >= heatmap_variance(corners).item()


DEFECTIVE_EXAMPLES = {"uniform heatmap maximal variance"}


def test_criterion_1_equation_fidelity():
    t0 = time.perf_counter()
    results = _closed_form_examples()
    elapsed = time.perf_counter() - t0
    failed = sorted(k for k, ok in results.items() if not ok)
    sound = [k for k in failed if k not in DEFECTIVE_EXAMPLES]
    detail = f"{len(results) - len(failed)}/{len(results)} examples in {elapsed:.2f}s"
    if failed:
        detail += f"; failing: {', '.join(failed)}"
    if set(failed) == DEFECTIVE_EXAMPLES:
        detail += " (false as stated: uniform variance 0.64 < 1.28 for a two-corner split)"
    report_criterion(1, not failed and elapsed < 5.0, detail)
    # everything except the mathematically false example must hold
    assert not sound and elapsed < 5.0


@pytest.mark.xfail(strict=True, reason="uniform 5x5 heatmap is not the variance maximizer")
def test_criterion_1_defective_example():
    assert _uniform_is_variance_max()


# --------------------------------------------------------------------------
# 2. gradients
# --------------------------------------------------------------------------

def test_criterion_2_gradients():
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    worst = {"coarse": 0.0, "fine": 0.0, "classification": 0.0, "essential": 0.0}
    for k in range(50):
        n, m = r.integers(2, 6, size=2)
        gt = t((r.uniform(size=(n, m)) < 0.3) * 1.0)
        worst["coarse"] = max(worst["coarse"], grad_check(lambda p: coarse_loss(p, gt),
                                                          t(r.uniform(0.05, 0.95, size=(n, m)))))
        b = int(r.integers(1, 4))
        xi = t(r.uniform(-0.6, 0.6, size=(b, 2)))
        f = lambda z: fine_loss(torch.softmax(z.reshape(b, 25), -1).reshape(b, 5, 5), xi)
        worst["fine"] = max(worst["fine"], grad_check(f, t(r.normal(size=(b, 5, 5)))))
        lab = t((r.uniform(size=8) < 0.5) * 1.0)
        worst["classification"] = max(worst["classification"],
                                      grad_check(lambda w: classification_loss(w, lab), t(r.uniform(0.05, 0.95, size=8))))
        _, coords, e_gt = _exact_views(100 + k, 12)
        e_hat = normalize_essential(e_gt) + t(r.normal(size=(3, 3))) * 0.2
        worst["essential"] = max(worst["essential"], grad_check(lambda e: essential_loss(e, e_gt, coords), e_hat))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    report_criterion(2, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                     + f" over 50 instances each, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 3. weighted 8-point
# --------------------------------------------------------------------------

def test_criterion_3_geometry_oracle():
    t0 = time.perf_counter()
    worst_err, worst_mask = 0.0, 0.0
    for k in range(100):
        s = two_view_sample(Rng(k, "acceptance/poses"), 40, 0.5, jitter_px=0.0)
        coords = t(s.coords)
        inl = torch.from_numpy(s.generated_inlier)
        w = inl.to(torch.float64)
        ref = normalize_essential(t(s.e_gt))
        e_in = weighted_eight_point(coords[inl], w[inl])
        worst_err = max(worst_err, min((e_in - ref).norm().item(), (e_in + ref).norm().item()))
        e_all = weighted_eight_point(coords, w)
        worst_mask = max(worst_mask, (e_all - e_in).norm().item())
    elapsed = time.perf_counter() - t0
    ok = worst_err < 1e-6 and worst_mask < 1e-10 and elapsed < 30
    report_criterion(3, ok, f"max |E-Egt| {worst_err:.1e}, zero-weight outlier effect {worst_mask:.1e}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 4. outlier network
# --------------------------------------------------------------------------

def test_criterion_4_outlier_network(outlier_weights):
    path, meta = outlier_weights
    net = OutlierNet()
    load_into(net, "outlier", load_weights(path))
    acc = outlier_accuracy(net, seed=SEED + 1, total=10_000, batch=500, inlier_ratio=0.5)
    r = np.random.default_rng(4)
    bitwise = True
    for _ in range(100):
        n = int(r.integers(8, 200))
        coords = r.normal(size=(n, 4)) * 0.5
        perm = r.permutation(n)
        w = classify(CorrespondenceBatch(t(coords)), net).w.numpy()
        bitwise &= np.array_equal(w[perm], classify(CorrespondenceBatch(t(coords[perm])), net).w.numpy())
    log = np.loadtxt(CACHE / f"outlier_s{SEED}_log.csv", delimiter=",", skiprows=1)
    curve = log[-100:, 1].mean() / log[:100, 1].mean()
    ok = acc >= 0.90 and bitwise and meta["seconds"] < 20 * 60 and curve < 0.5
    report_criterion(4, ok, f"held-out accuracy {acc:.4f} at 50% outliers, equivariance bitwise={bitwise}, "
                            f"final/initial loss {curve:.3f}, training {meta['seconds'] / 60:.1f} min")
    assert ok


# --------------------------------------------------------------------------
# 5. desk matcher
# --------------------------------------------------------------------------

def test_criterion_5_desk_matcher(matcher_weights, sweep_rows, held_out_pairs):
    _, meta = matcher_weights
    clean = [r.report for r in sweep_rows if r.noise_type == "none"]
    trained_ncm = float(np.mean([r.ncm for r in clean]))
    sr = float(np.mean([r.success for r in clean]))
    baseline = Pipeline.random_init(PipelineConfig(seed=SEED))
    base_rows = run_bench(baseline, held_out_pairs, [], seed=SEED)
    base_ncm = float(np.mean([r.report.ncm for r in base_rows]))
    log = np.loadtxt(CACHE / f"matcher_s{SEED}_log.csv", delimiter=",", skiprows=1)
    coarse_drop = log[-100:, 2].mean() < log[:100, 2].mean()
    ok = trained_ncm >= 3 * base_ncm and sr >= 0.8 and meta["seconds"] < 60 * 60 and coarse_drop
    ratio = "inf" if base_ncm == 0 else f"{trained_ncm / base_ncm:.1f}x"
    report_criterion(5, ok, f"mean NCM trained {trained_ncm:.1f} vs random-init {base_ncm:.1f} ({ratio}), "
                            f"SR {sr:.2f}, coarse loss falls={coarse_drop}, training {meta['seconds'] / 60:.1f} min")
    assert ok


# --------------------------------------------------------------------------
# 6. noise-robustness trend
# --------------------------------------------------------------------------

def test_criterion_6_noise_trend(sweep_rows, tmp_path):
    summary = summarize(sweep_rows)
    write_report(sweep_rows, tmp_path / "sweep.csv")
    write_summary(summary, tmp_path / "sweep_summary.csv")
    parts = []
    ok = True
    for kind, levels in SWEEPS:
        curve = [s.acr for s in summary if s.noise_type == kind]
        if any(a is None for a in curve):
            ok = False
            parts.append(f"{kind}: clean NCM is zero")
            continue
        mono = monotone_within(curve, 1)
        gap = curve[0] - curve[-1]
        ok &= mono and gap >= 0.1
        parts.append(f"{kind} ACR " + "/".join(f"{a:.2f}" for a in curve) + f" (monotone={mono}, gap {gap:.2f})")
    report_criterion(6, ok, "; ".join(parts))
    assert ok


# --------------------------------------------------------------------------
# 7. ablation hooks
# --------------------------------------------------------------------------

def test_criterion_7_ablations(matcher_weights, outlier_weights, tmp_path):
    variants = {
        "full": [],
        "fpm_off": ["--set", "use_fpm=false"],
        "absolute_pe": ["--set", "pe_mode=absolute"],
        "consensus": ["--set", "outlier=consensus"],
    }
    outputs = {}
    for name, extra in variants.items():
        out = tmp_path / f"{name}.csv"
        rc = cli_main(["bench", "--synthetic", "4", "--seed", str(SEED), "--sweep", "gaussian:5,-5",
                       "--sweep", "stripe:0.05,0.15", "--weights", str(matcher_weights[0]),
                       "--weights", str(outlier_weights[0]), "--out", str(out)] + extra)
        assert rc == 0, name
        outputs[name] = out.read_text().splitlines()
    keys = {name: [tuple(line.split(",")[:3]) for line in lines] for name, lines in outputs.items()}
    comparable = all(k == keys["full"] for k in keys.values())
    ncm = {name: np.mean([int(l.split(",")[3]) for l in lines[1:]]) for name, lines in outputs.items()}
    ok = comparable and len(outputs["fpm_off"]) == 1 + 4 * 5
    report_criterion(7, ok, "identical pair/level keys across variants; mean NCM "
                     + ", ".join(f"{k} {v:.1f}" for k, v in ncm.items()))
    assert ok


# --------------------------------------------------------------------------
# 8. determinism
# --------------------------------------------------------------------------

def test_criterion_8_determinism(matcher_weights, outlier_weights, tmp_path, capsys):
    outs = []
    for _ in range(2):
        assert cli_main(["selftest"]) == 0
        outs.append(capsys.readouterr().out)
    selftest_same = outs[0] == outs[1]
    files = []
    for k in range(2):
        out = tmp_path / f"r{k}.csv"
        assert cli_main(["bench", "--synthetic", "3", "--seed", str(SEED), "--sweep", "gaussian:5,0,-5",
                         "--sweep", "stripe:0.1", "--weights", str(matcher_weights[0]),
                         "--weights", str(outlier_weights[0]), "--out", str(out)]) == 0
        files.append(out.read_bytes() + (tmp_path / f"r{k}_summary.csv").read_bytes())
    capsys.readouterr()
    ok = selftest_same and files[0] == files[1]
    report_criterion(8, ok, f"selftest identical={selftest_same}, bench CSVs identical={files[0] == files[1]}")
    assert ok
