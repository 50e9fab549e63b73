import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from noisematch.errors import ContractError, DegeneracyError
from noisematch.geometry import apply_homography
from noisematch.matcher import PixelMatchSet
from noisematch.outlier import (
    CorrespondenceBatch, OutlierNet, classify, consensus_baseline, context_norm, default_intrinsics,
    epipolar_rows, normalize_essential, weighted_eight_point, weights_from_logits,
)
from noisematch.synth import essential_from_pose, random_homography, random_pose, two_view_sample
from noisematch.tensor import Rng, init_parameters
from conftest import t


def _exact_views(seed, n_in, n_out=0):
    s = two_view_sample(Rng(seed, "test/views"), n_in + n_out, n_in / (n_in + n_out), jitter_px=0.0)
    return s, torch.from_numpy(s.coords), torch.from_numpy(s.generated_inlier.astype(np.float64))


# -- context normalization ----------------------------------------------------

def test_context_norm_constant_rows_vanish():
    out = context_norm(t(np.tile([[1.0, -2.0, 3.0]], (5, 1))))
    assert torch.count_nonzero(out) == 0


def test_context_norm_two_rows():
    out = context_norm(t([[0.0], [2.0]])).numpy().ravel()
    # mean 1, population std 1: (x - 1) / (1 + 1e-3)
    np.testing.assert_allclose(out, [-1 / 1.001, 1 / 1.001], atol=1e-15)
    assert abs(out[0] + 1) < 1e-2


def test_context_norm_equivariant(rng):
    x = rng.normal(size=(9, 4))
    perm = rng.permutation(9)
    np.testing.assert_allclose(context_norm(t(x[perm])).numpy(), context_norm(t(x)).numpy()[perm], atol=1e-14)


def test_context_norm_needs_two_rows():
    with pytest.raises(ContractError):
        context_norm(t([[1.0, 2.0]]))


# -- classification -----------------------------------------------------------

def test_weight_mapping():
    w = weights_from_logits(t([0.0, 10.0, -3.0])).numpy()
    assert w[0] == 0.0 and w[2] == 0.0
    assert w[1] == math.tanh(10.0)


@pytest.fixture(scope="module")
def small_net():
    net = OutlierNet(32, 3)
    init_parameters(net, 5, "outlier")
    return net


def test_classify_equivariance_bitwise(small_net):
    r = np.random.default_rng(2)
    for _ in range(100):
        n = int(r.integers(2, 60))
        coords = r.normal(size=(n, 4))
        perm = r.permutation(n)
        w = classify(CorrespondenceBatch(t(coords)), small_net).w.numpy()
        wp = classify(CorrespondenceBatch(t(coords[perm])), small_net).w.numpy()
        assert np.array_equal(w[perm], wp)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_weights_in_unit_range(n, seed):
    net = OutlierNet(16, 2)
    init_parameters(net, seed % 97, "outlier")
    coords = np.random.default_rng(seed).normal(size=(n, 4)) * 3
    w = classify(CorrespondenceBatch(t(coords)), net).w.numpy()
    assert np.all(w >= 0) and np.all(w < 1)


def test_default_intrinsics():
    k = default_intrinsics(640, 480)
    np.testing.assert_array_equal(k, [[320, 0, 320], [0, 320, 240], [0, 0, 1]])
    b = CorrespondenceBatch.from_pixels([[320, 240, 640, 240]], (640, 480))
    np.testing.assert_allclose(b.coords.numpy(), [[0, 0, 1, 0]])


# -- weighted 8-point ---------------------------------------------------------

def test_eight_point_recovers_pose():
    for seed in range(10):
        s, coords, w = _exact_views(seed, 20)
        e = weighted_eight_point(coords, w)
        ref = normalize_essential(torch.from_numpy(s.e_gt))
        assert min((e - ref).norm(), (e + ref).norm()) < 1e-6
        p = torch.cat([coords[:, :2], torch.ones(20, 1, dtype=torch.float64)], 1)
        q = torch.cat([coords[:, 2:], torch.ones(20, 1, dtype=torch.float64)], 1)
        assert ((q @ e) * p).sum(1).abs().max() < 1e-8


def test_zero_weights_are_inert():
    s, coords, w = _exact_views(3, 20, 20)
    inl = w > 0
    e_all = weighted_eight_point(coords, w)
    e_in = weighted_eight_point(coords[inl], w[inl])
    assert (e_all - e_in).abs().max() < 1e-10


def test_weight_scale_invariance():
    _, coords, w = _exact_views(4, 30)
    w = w * torch.from_numpy(np.random.default_rng(0).uniform(0.5, 2, size=30))
    e1 = weighted_eight_point(coords, w)
    e2 = weighted_eight_point(coords, 7.5 * w)
    assert (e1 - e2).abs().max() < 1e-12


def test_smallest_eigenvalue_vanishes_on_exact_data():
    _, coords, w = _exact_views(5, 25)
    z = epipolar_rows(coords)
    x = z.T @ (w[:, None] * z)
    vals = torch.linalg.eigvalsh(0.5 * (x + x.T))
    assert abs(vals[0].item()) < 1e-16 * torch.trace(x).item() or vals[0].item() < 1e-14


def test_eight_point_needs_eight():
    _, coords, w = _exact_views(6, 7, 3)
    with pytest.raises(DegeneracyError):
        weighted_eight_point(coords[:7], torch.ones(7, dtype=torch.float64))


def test_sign_convention():
    e = normalize_essential(t([[0.0, -2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    assert e[0, 1] > 0 and abs(e.norm().item() - 1) < 1e-15


def test_essential_from_pose_is_essential():
    r, tr = random_pose(Rng(1))
    sv = np.linalg.svd(essential_from_pose(r, tr), compute_uv=False)
    assert abs(sv[0] - sv[1]) < 1e-12 and sv[2] < 1e-12


# -- consensus baseline -------------------------------------------------------

def _homography_matches(seed, n_in, n_out):
    r = Rng(seed, "test/consensus")
    h = random_homography(r, 128)
    src = r.uniform(2 * n_in, 0, 128).reshape(n_in, 2)
    good = np.concatenate([src, apply_homography(h, src)], axis=1)
    bad = r.uniform(4 * n_out, 0, 128).reshape(n_out, 4)
    return np.concatenate([good, bad]), h


def test_consensus_clean_all_inliers():
    coords, _ = _homography_matches(0, 50, 0)
    mask, _ = consensus_baseline(PixelMatchSet.from_coords(coords))
    assert mask.all()


def test_consensus_with_outliers():
    coords, _ = _homography_matches(1, 50, 50)
    mask, _ = consensus_baseline(coords, iterations=1000, inlier_tol_px=3.0, seed=0)
    assert mask[:50].sum() >= 49 and mask[50:].sum() <= 2


def test_consensus_needs_four():
    with pytest.raises(DegeneracyError):
        consensus_baseline(np.zeros((3, 4)))


def test_classification_on_trained_style_input_is_deterministic(small_net):
    s = two_view_sample(Rng(9), 64, 0.5)
    b = CorrespondenceBatch(torch.from_numpy(s.coords))
    assert torch.equal(classify(b, small_net).w, classify(b, small_net).w)
