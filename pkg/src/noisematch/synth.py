"""Synthetic data: textured image pairs related by a known homography, two-view
correspondence sets with known essential matrix, and 8-bit PGM I/O."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, LoadError, ParameterError
from .geometry import apply_homography
from .outlier import default_intrinsics, normalize_points
from .tensor import Rng


# --------------------------------------------------------------------------
# PGM
# --------------------------------------------------------------------------

def read_pgm(path: str | Path) -> np.ndarray:
    """Binary (P5) 8-bit PGM mapped linearly to [0, 1]."""
    blob = Path(path).read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s", blob)
    if not m:
        raise LoadError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise LoadError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=m.end())
    return data.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


# --------------------------------------------------------------------------
# Textures and warps
# --------------------------------------------------------------------------

def _value_noise(rng: Rng, size: int, cells: int) -> np.ndarray:
    lattice = rng.uniform((cells + 2) ** 2, -1.0, 1.0).reshape(cells + 2, cells + 2)
    t = np.arange(size) * (cells / size)
    i = np.floor(t).astype(np.int64)
    f = t - i
    f = f * f * (3.0 - 2.0 * f)
    rows = lattice[i] * (1 - f)[:, None] + lattice[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def texture(rng: Rng, size: int) -> np.ndarray:
    """Multi-octave value noise with step edges and Gaussian blobs, scaled to [0, 1]."""
    img = np.zeros((size, size))
    base = max(size // 64, 1)
    for octave, amp in enumerate((1.0, 0.8, 0.6, 0.5)):
        img += amp * _value_noise(rng, size, base * 2 ** (octave + 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(10):
        ang, off, amp = rng.uniform(3)
        nx, ny = math.cos(2 * math.pi * ang), math.sin(2 * math.pi * ang)
        img += (amp - 0.5) * 1.6 * ((nx * xx + ny * yy) > off * size * 1.4 - 0.2 * size)
    for _ in range(size // 8):
        cx, cy, r, amp = rng.uniform(4)
        r = 1.5 + 5.0 * r
        img += (amp - 0.5) * 3.0 * np.exp(-((xx - cx * size) ** 2 + (yy - cy * size) ** 2) / (2 * r * r))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample at continuous (u = column, v = row) positions, clamping to the border."""
    h, w = image.shape
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), w - 2)
    v0 = np.minimum(np.floor(v).astype(np.int64), h - 2)
    fu, fv = u - u0, v - v0
    top = image[v0, u0] * (1 - fu) + image[v0, u0 + 1] * fu
    bot = image[v0 + 1, u0] * (1 - fu) + image[v0 + 1, u0 + 1] * fu
    return top * (1 - fv) + bot * fv


def random_homography(rng: Rng, size: int, magnitude: float = 1.0) -> np.ndarray:
    """Rotation <= 15 deg, scale in [0.9, 1.1], shift <= 10% of size and mild
    projective terms, composed about the image centre."""
    ang, sc, tx, ty, p1, p2 = rng.uniform(6, -1.0, 1.0)
    theta = math.radians(15.0) * ang * magnitude
    s = 1.0 + 0.1 * sc * magnitude
    m = np.array([
        [s * math.cos(theta), -s * math.sin(theta), 0.1 * size * tx * magnitude],
        [s * math.sin(theta), s * math.cos(theta), 0.1 * size * ty * magnitude],
        [0.05 * p1 * magnitude / (size / 2), 0.05 * p2 * magnitude / (size / 2), 1.0],
    ])
    c = size / 2.0
    shift = np.array([[1.0, 0, c], [0, 1.0, c], [0, 0, 1.0]])
    unshift = np.array([[1.0, 0, -c], [0, 1.0, -c], [0, 0, 1.0]])
    return shift @ m @ unshift


@dataclass
class SyntheticPair:
    image_a: np.ndarray
    image_b: np.ndarray
    h_gt: np.ndarray  # maps A pixels (u, v) to B pixels
    valid_b: np.ndarray  # B pixels whose preimage lies inside A
    intrinsics: np.ndarray | None = None

    @property
    def size(self) -> tuple[int, int]:
        h, w = self.image_a.shape
        return w, h


def _warp_ok(h: np.ndarray, size: int) -> bool:
    corners = np.array([[0, 0], [size, 0], [0, size], [size, size]], dtype=np.float64)
    den = np.concatenate([corners, np.ones((4, 1))], axis=1) @ h[2]
    return bool(abs(np.linalg.det(h)) > 1e-6 and np.all(den > 0.2))


def generate_pair(seed: int, size: int = 128, warp_magnitude: float = 1.0) -> SyntheticPair:
    """Textured image A and its homography warp B, deterministic per seed.

    Texture is rendered on a canvas with a margin so B is textured everywhere.
    """
    if size % 8:
        raise DimensionError(f"size must be a multiple of 8, got {size}")
    if warp_magnitude < 0:
        raise ParameterError("warp magnitude must be non-negative")
    rng = Rng(seed, "pair")
    margin = size // 2
    canvas = texture(rng.child("texture"), size + 2 * margin)
    image_a = canvas[margin:margin + size, margin:margin + size].copy()
    attempt = 0
    while True:
        h = random_homography(rng.child(f"warp{attempt}"), size, warp_magnitude)
        if _warp_ok(h, size):
            break
        attempt += 1
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    pts_b = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    src = apply_homography(np.linalg.inv(h), pts_b)
    image_b = bilinear_sample(canvas, src[:, 0] + margin, src[:, 1] + margin).reshape(size, size)
    valid = ((src[:, 0] >= 0) & (src[:, 0] <= size - 1) & (src[:, 1] >= 0) & (src[:, 1] <= size - 1)).reshape(size, size)
    return SyntheticPair(image_a=image_a, image_b=image_b, h_gt=h, valid_b=valid)


# --------------------------------------------------------------------------
# Two-view correspondences for the outlier network
# --------------------------------------------------------------------------

def skew(t: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = skew(axis)
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def random_pose(rng: Rng, max_angle_deg: float = 20.0) -> tuple[np.ndarray, np.ndarray]:
    axis = rng.normal(3)
    angle = math.radians(max_angle_deg) * rng.uniform(1)[0]
    r = rotation_from_axis_angle(axis, angle)
    t = rng.normal(3)
    t = t / np.linalg.norm(t) * (0.3 + 0.7 * rng.uniform(1)[0])
    return r, t


def essential_from_pose(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    e = skew(t) @ r
    return e / np.linalg.norm(e)


def epipolar_distance_px(coords_n: np.ndarray, e: np.ndarray, focal: float) -> np.ndarray:
    """Max of the point-to-epipolar-line distances in both images, in pixels."""
    ones = np.ones((len(coords_n), 1))
    p = np.concatenate([coords_n[:, :2], ones], axis=1)
    q = np.concatenate([coords_n[:, 2:], ones], axis=1)
    lb = p @ e.T
    la = q @ e
    alg = np.abs((q * lb).sum(axis=1))
    db = alg / np.maximum(np.hypot(lb[:, 0], lb[:, 1]), 1e-300)
    da = alg / np.maximum(np.hypot(la[:, 0], la[:, 1]), 1e-300)
    return np.maximum(da, db) * focal


@dataclass
class TwoViewSample:
    coords_px: np.ndarray
    coords: np.ndarray  # intrinsics-normalized
    labels: np.ndarray
    e_gt: np.ndarray
    intrinsics: np.ndarray
    generated_inlier: np.ndarray


def two_view_sample(rng: Rng, n: int, inlier_ratio: float, width: int = 640, height: int = 480,
                    jitter_px: float = 1.0, label_tol_px: float = 2.0, planar: bool = False) -> TwoViewSample:
    """Random relative pose, visible inliers with bounded pixel jitter, uniform outliers.

    Labels come from the epipolar constraint: a match is an inlier when it lies within
    ``label_tol_px`` of its epipolar line in both images.
    """
    k = default_intrinsics(width, height)
    kinv = np.linalg.inv(k)
    n_in = int(round(n * inlier_ratio))
    while True:
        r, t = random_pose(rng)
        if planar:
            normal = rng.normal(3) * 0.3 + np.array([0.0, 0.0, -1.0])
            normal /= np.linalg.norm(normal)
            plane_d = 4.0 + 6.0 * rng.uniform(1)[0]
        pts_a, pts_b = [], []
        for _ in range(20):
            m = 4 * max(n_in, 1)
            uv = np.stack([rng.uniform(m, 0, width), rng.uniform(m, 0, height)], axis=1)
            rays = np.concatenate([uv, np.ones((m, 1))], axis=1) @ kinv.T
            if planar:
                depth = -plane_d / np.minimum(rays @ normal, -1e-3)
                depth = np.where((depth > 1.0) & (depth < 30.0), depth, -1.0)
            else:
                depth = 4.0 + 6.0 * rng.uniform(m)
            xa = rays * depth[:, None]
            xb = xa @ r.T + t
            proj = xb @ k.T
            with np.errstate(divide="ignore", invalid="ignore"):
                uvb = proj[:, :2] / proj[:, 2:3]
            ok = (depth > 0) & (xb[:, 2] > 0.1) & (uvb[:, 0] >= 0) & (uvb[:, 0] < width) & (uvb[:, 1] >= 0) & (uvb[:, 1] < height)
            pts_a.append(uv[ok])
            pts_b.append(uvb[ok])
            if sum(len(p) for p in pts_a) >= n_in:
                break
        pa = np.concatenate(pts_a)[:n_in]
        pb = np.concatenate(pts_b)[:n_in]
        if len(pa) == n_in:
            break
    jitter = np.clip(0.5 * jitter_px * rng.normal(2 * n_in).reshape(n_in, 2), -jitter_px, jitter_px)
    pb = pb + jitter
    n_out = n - n_in
    oa = np.stack([rng.uniform(n_out, 0, width), rng.uniform(n_out, 0, height)], axis=1)
    ob = np.stack([rng.uniform(n_out, 0, width), rng.uniform(n_out, 0, height)], axis=1)
    coords_px = np.concatenate([np.concatenate([pa, pb], axis=1), np.concatenate([oa, ob], axis=1)])
    gen = np.concatenate([np.ones(n_in, dtype=bool), np.zeros(n_out, dtype=bool)])
    order = rng.permutation(n)
    coords_px, gen = coords_px[order], gen[order]
    coords = np.concatenate([normalize_points(coords_px[:, :2], k), normalize_points(coords_px[:, 2:], k)], axis=1)
    e = essential_from_pose(r, t)
    labels = (epipolar_distance_px(coords, e, k[0, 0]) < label_tol_px).astype(np.float64)
    return TwoViewSample(coords_px, coords, labels, e, k, gen)
