"""Invariant checks runnable without trained weights. Output is deterministic."""

from __future__ import annotations

import io
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .geometry import apply_homography, ransac_homography
from .losses import classification_loss, coarse_loss, essential_loss, fine_loss
from .matcher import dual_softmax, select_coarse, spatial_expectation
from .noise import add_gaussian_noise, add_stripe_noise
from .outlier import CorrespondenceBatch, OutlierNet, classify, normalize_essential, weighted_eight_point
from .pipeline import Pipeline, PipelineConfig
from .synth import generate_pair, two_view_sample
from .tensor import Rng, conv2d, grad_check, init_parameters, load_weights, matmul, save_weights, state_of


def _rng_known_value() -> bool:
    return int(Rng(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF


def _matmul_oracle() -> bool:
    r = Rng(1, "selftest/matmul")
    a = r.normal(12).reshape(3, 4)
    b = r.normal(20).reshape(4, 5)
    ref = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    return np.allclose(matmul(torch.from_numpy(a), torch.from_numpy(b)).numpy(), ref, atol=1e-12)


def _conv_oracle() -> bool:
    r = Rng(2, "selftest/conv")
    x = r.normal(6 * 6 * 2).reshape(6, 6, 2)
    k = r.normal(3 * 3 * 2 * 3).reshape(3, 3, 2, 3)
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((6, 6, 3))
    for i in range(6):
        for j in range(6):
            ref[i, j] = np.einsum("abc,abcd->d", pad[i:i + 3, j:j + 3], k)
    out = conv2d(torch.from_numpy(x), torch.from_numpy(k)).numpy()
    return np.allclose(out, ref, atol=1e-12)


def _dual_softmax_bounds() -> bool:
    s = torch.from_numpy(Rng(3, "selftest/ds").normal(30).reshape(5, 6))
    p = dual_softmax(s)
    return bool((p >= 0).all() and (p.sum(1) <= 1 + 1e-12).all() and (p.sum(0) <= 1 + 1e-12).all())


def _mnn_oracle() -> bool:
    p = torch.from_numpy(Rng(4, "selftest/mnn").uniform(48).reshape(6, 8) * 0.5)
    got = select_coarse(p, 0.2, (2, 3), (2, 4))
    pn = p.numpy()
    want = [(i, j) for i in range(6) for j in range(8)
            if pn[i, j] >= 0.2 and pn[i].argmax() == j and pn[:, j].argmax() == i]
    return sorted(zip(got.idx_a.tolist(), got.idx_b.tolist())) == want


def _expectation_one_hot() -> bool:
    z = torch.zeros(1, 5, 5, dtype=torch.float64)
    z[0, 0, 0] = 1.0
    return bool(torch.allclose(spatial_expectation(z), torch.tensor([[-0.6, -0.6]], dtype=torch.float64), atol=1e-12))


def _loss_gradients() -> bool:
    r = Rng(5, "selftest/grad")
    gt = torch.from_numpy((r.uniform(12) < 0.3).astype(np.float64).reshape(3, 4))
    x = torch.from_numpy(r.uniform(12, 0.1, 0.9).reshape(3, 4))
    ok = grad_check(lambda p: coarse_loss(p, gt), x) < 1e-4
    z = torch.from_numpy(r.normal(50).reshape(2, 5, 5))
    xi = torch.from_numpy(r.uniform(4, -0.5, 0.5).reshape(2, 2))
    ok &= grad_check(lambda t: fine_loss(torch.softmax(t.reshape(2, 25), -1).reshape(2, 5, 5), xi), z) < 1e-4
    labels = torch.from_numpy((r.uniform(10) < 0.5).astype(np.float64))
    w = torch.from_numpy(r.uniform(10, 0.1, 0.9))
    ok &= grad_check(lambda t: classification_loss(t, labels), w) < 1e-4
    coords = torch.from_numpy(r.normal(40).reshape(10, 4))
    e_gt = torch.from_numpy(r.normal(9).reshape(3, 3))
    e_hat = torch.from_numpy(r.normal(9).reshape(3, 3))
    ok &= grad_check(lambda e: essential_loss(e, e_gt, coords), e_hat) < 1e-4
    return bool(ok)


def _eight_point_oracle() -> bool:
    sample = two_view_sample(Rng(6, "selftest/8pt"), 40, 0.5, jitter_px=0.0)
    coords = torch.from_numpy(sample.coords)
    w = torch.from_numpy(sample.generated_inlier.astype(np.float64))
    e = weighted_eight_point(coords, w)
    ref = normalize_essential(torch.from_numpy(sample.e_gt))
    err = min(float((e - ref).norm()), float((e + ref).norm()))
    return err < 1e-6


def _classify_equivariance() -> bool:
    net = OutlierNet(16, 2)
    init_parameters(net, 7, "outlier")
    r = Rng(7, "selftest/perm")
    coords = r.normal(64 * 4).reshape(64, 4)
    perm = r.permutation(64)
    w1 = classify(CorrespondenceBatch(torch.from_numpy(coords)), net).w.numpy()
    w2 = classify(CorrespondenceBatch(torch.from_numpy(coords[perm])), net).w.numpy()
    return bool(np.array_equal(w1[perm], w2)) and bool(((w1 >= 0) & (w1 < 1)).all())


def _noise_contracts() -> bool:
    pair = generate_pair(8, 64)
    ref = pair.image_b.copy()
    g = add_gaussian_noise(pair.image_a, -5.0, 1)
    s = add_stripe_noise(pair.image_a, 0.15, 1)
    flat = add_stripe_noise(np.full((8, 16), 0.5), 0.12, 3)
    column_constant = np.all(flat == flat[:1])
    return bool(g.min() >= 0 and g.max() <= 1 and s.min() >= 0 and s.max() <= 1
                and np.array_equal(ref, pair.image_b) and column_constant)


def _consensus_clean() -> bool:
    pair = generate_pair(9, 64)
    src = Rng(9, "selftest/ransac").uniform(100, 0, 64).reshape(50, 2)
    _, mask = ransac_homography(src, apply_homography(pair.h_gt, src), seed=0)
    return bool(mask.all())


def _weights_round_trip() -> bool:
    net = OutlierNet(8, 1)
    init_parameters(net, 10, "outlier")
    tensors = state_of([("outlier", net)])
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "w.nmw"
        save_weights(path, tensors)
        back = load_weights(path)
    return list(back) == list(tensors) and all(torch.equal(back[k], tensors[k]) for k in tensors)


def _pipeline_repeatable() -> bool:
    cfg = PipelineConfig(coarse_layers=1, fine_layers=1, outlier="none")
    pair = generate_pair(11, 64)
    runs = []
    for _ in range(2):
        pipe = Pipeline.random_init(cfg)
        kept, _, _ = pipe.run(pair.image_a, pair.image_b)
        buf = io.StringIO()
        np.savetxt(buf, kept.coords)
        runs.append(buf.getvalue())
    return runs[0] == runs[1]


CHECKS: list[tuple[str, Callable[[], bool]]] = [
    ("rng_known_value", _rng_known_value),
    ("matmul_oracle", _matmul_oracle),
    ("conv_oracle", _conv_oracle),
    ("dual_softmax_bounds", _dual_softmax_bounds),
    ("mnn_oracle", _mnn_oracle),
    ("expectation_one_hot", _expectation_one_hot),
    ("loss_gradients", _loss_gradients),
    ("eight_point_oracle", _eight_point_oracle),
    ("classify_equivariance", _classify_equivariance),
    ("noise_contracts", _noise_contracts),
    ("consensus_clean", _consensus_clean),
    ("weights_round_trip", _weights_round_trip),
    ("pipeline_repeatable", _pipeline_repeatable),
]


def run_selftest(write: Callable[[str], None] = print) -> bool:
    torch.set_num_threads(1)
    all_ok = True
    for name, check in CHECKS:
        try:
            ok = bool(check())
            detail = ""
        except Exception as exc:  # a crashing check is a failing check
            ok = False
            detail = f" ({type(exc).__name__}: {exc})"
        all_ok &= ok
        write(f"{'PASS' if ok else 'FAIL'} {name}{detail}")
    write(f"selftest: {'ok' if all_ok else 'failed'}")
    return all_ok
