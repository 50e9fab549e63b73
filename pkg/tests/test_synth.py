import numpy as np
import pytest

from noisematch.errors import LoadError

from noisematch.geometry import apply_homography
from noisematch.synth import (
    bilinear_sample, epipolar_distance_px, generate_pair, read_pgm, two_view_sample, write_pgm,
)
from noisematch.tensor import Rng


def test_identity_warp():
    p = generate_pair(4, 64, warp_magnitude=0.0)
    np.testing.assert_array_equal(p.h_gt, np.eye(3))
    np.testing.assert_allclose(p.image_b[p.valid_b], p.image_a[p.valid_b], atol=1e-12)


def test_pair_deterministic():
    a, b = generate_pair(9, 64), generate_pair(9, 64)
    assert np.array_equal(a.image_a, b.image_a) and np.array_equal(a.image_b, b.image_b)
    assert np.array_equal(a.h_gt, b.h_gt)


def test_ground_truth_consistency():
    p = generate_pair(10, 128)
    pts = Rng(1).uniform(40, 0, 128).reshape(20, 2)
    there = apply_homography(p.h_gt, pts)
    back = apply_homography(np.linalg.inv(p.h_gt), there)
    assert np.abs(back - pts).max() < 1e-9


def test_warp_matches_sampling():
    # B at pixel x equals A's texture sampled at H^-1 x; check where H^-1 x lands on integer-free A support
    p = generate_pair(11, 64)
    assert p.image_a.shape == p.image_b.shape == (64, 64)
    assert 0.5 < p.valid_b.mean() <= 1.0
    assert p.image_a.min() >= 0 and p.image_a.max() <= 1


def test_size_must_be_multiple_of_eight():
    with pytest.raises(ValueError):
        generate_pair(0, 60)


def test_bilinear_sample_on_grid_points():
    img = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(bilinear_sample(img, np.array([1.0, 2.0]), np.array([0.0, 2.0])), [1.0, 10.0])
    assert bilinear_sample(img, np.array([0.5]), np.array([0.0]))[0] == 0.5


def test_pgm_round_trip(tmp_path):
    img = np.round(Rng(0).uniform(64).reshape(8, 8) * 255) / 255
    write_pgm(tmp_path / "x.pgm", img)
    np.testing.assert_allclose(read_pgm(tmp_path / "x.pgm"), img, atol=1e-12)


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(LoadError):
        read_pgm(tmp_path / "x.pgm")


def test_two_view_labels():
    s = two_view_sample(Rng(3), 200, 0.5)
    assert s.coords.shape == (200, 4)
    # generated inliers (jitter <= 1 px) always satisfy the 2 px epipolar rule
    assert np.all(s.labels[s.generated_inlier] == 1)
    assert abs(s.generated_inlier.mean() - 0.5) < 1e-12
    d = epipolar_distance_px(s.coords, s.e_gt, s.intrinsics[0, 0])
    assert np.array_equal(s.labels == 1, d < 2.0)


def test_two_view_planar_mode():
    s = two_view_sample(Rng(4), 50, 1.0, planar=True, jitter_px=0.0)
    assert np.all(s.labels == 1)
