"""Homography fitting and the evaluation metrics (NCM, SR, RMSE, ACR)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError
from .tensor import Rng

FAILED_RMSE = 20.0
SUCCESS_MIN_NCM = 10


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map ``N x 2`` points (u, v); also accepts a stack of homographies ``B x 3 x 3``."""
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)
    out = hom @ np.swapaxes(h, -1, -2)
    return out[..., :2] / out[..., 2:3]


def _hartley(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity moving the centroid to the origin with mean distance sqrt(2). ``pts``: ``B x k x 2``."""
    centroid = pts.mean(axis=-2, keepdims=True)
    dist = np.linalg.norm(pts - centroid, axis=-1).mean(axis=-1)
    scale = np.where(dist > 0, math.sqrt(2.0) / np.where(dist > 0, dist, 1.0), 1.0)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = scale
    t[..., 1, 1] = scale
    t[..., 0, 2] = -scale * centroid[..., 0, 0]
    t[..., 1, 2] = -scale * centroid[..., 0, 1]
    t[..., 2, 2] = 1.0
    return t, (pts - centroid) * scale[..., None, None]


def dlt_batch(src: np.ndarray, dst: np.ndarray, rank_tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Normalized DLT on ``B x k x 2`` point sets (k >= 4).

    Returns the homographies and a boolean mask of non-degenerate fits (the
    second-smallest singular value of the normalized design matrix must not vanish).
    """
    ts, s = _hartley(src)
    td, d = _hartley(dst)
    b, k, _ = s.shape
    zeros = np.zeros((b, k, 3))
    one = np.ones((b, k, 1))
    xs = np.concatenate([s, one], axis=-1)
    r1 = np.concatenate([-xs, zeros, d[..., 0:1] * xs], axis=-1)
    r2 = np.concatenate([zeros, -xs, d[..., 1:2] * xs], axis=-1)
    a = np.concatenate([r1, r2], axis=-2)
    _, sv, vt = np.linalg.svd(a)
    hn = vt[..., -1, :].reshape(b, 3, 3)
    ok = sv[..., 7] > rank_tol * sv[..., 0]
    h = np.linalg.inv(td) @ hn @ ts
    return h, ok


def fix_scale(h: np.ndarray) -> np.ndarray:
    if abs(h[2, 2]) > 1e-12:
        return h / h[2, 2]
    return h / np.linalg.norm(h)


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares normalized DLT over all given correspondences."""
    if len(src) < 4:
        raise EstimationError(f"need >= 4 correspondences, got {len(src)}")
    h, ok = dlt_batch(src[None], dst[None])
    if not ok[0] or not np.all(np.isfinite(h)):
        raise EstimationError("degenerate configuration")
    return fix_scale(h[0])


def transfer_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Max of forward and backward transfer distance; ``h`` may be a ``B x 3 x 3`` stack."""
    fwd = np.linalg.norm(apply_homography(h, src) - dst, axis=-1)
    bwd = np.linalg.norm(apply_homography(np.linalg.inv(h), dst) - src, axis=-1)
    err = np.maximum(fwd, bwd)
    return np.where(np.isfinite(err), err, np.inf)


def _sample_quads(rng: Rng, n: int, count: int) -> np.ndarray:
    idx = rng.integers(4 * count, n).reshape(count, 4)
    while True:
        srt = np.sort(idx, axis=1)
        dup = np.any(srt[:, 1:] == srt[:, :-1], axis=1)
        if not dup.any():
            return idx
        idx[dup] = rng.integers(4 * int(dup.sum()), n).reshape(-1, 4)


def ransac_homography(src: np.ndarray, dst: np.ndarray, tol: float = 3.0, iterations: int = 2000,
                      seed: int = 0, refits: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Seeded sample consensus over 4-point DLT fits, then least-squares refits on the inliers.

    Returns ``(H, inlier_mask)``; raises :class:`EstimationError` on failure.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 4:
        raise EstimationError(f"need >= 4 correspondences, got {n}")
    rng = Rng(seed, "consensus")
    idx = _sample_quads(rng, n, iterations)
    best_count, best_h = -1, None
    chunk = 500
    for start in range(0, iterations, chunk):
        sel = idx[start:start + chunk]
        hs, ok = dlt_batch(src[sel], dst[sel])
        dets = np.linalg.det(hs)
        ok &= np.all(np.isfinite(hs), axis=(1, 2)) & (np.abs(dets) > 1e-12)
        if not ok.any():
            continue
        hs = hs[ok]
        counts = (transfer_errors(hs, src[None], dst[None]) < tol).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_h = int(counts[k]), hs[k]
    if best_h is None or best_count < 4:
        raise EstimationError("no non-degenerate consensus model")
    h = fix_scale(best_h)
    mask = transfer_errors(h, src, dst) < tol
    for _ in range(refits):
        try:
            h_new = fit_homography(src[mask], dst[mask])
        except EstimationError:
            break
        mask_new = transfer_errors(h_new, src, dst) < tol
        if mask_new.sum() < mask.sum():
            break
        h = h_new
        if np.array_equal(mask_new, mask):
            break
        mask = mask_new
    return h, mask


def estimate_homography(matches, tol: float = 3.0, iterations: int = 2000, seed: int = 0) -> np.ndarray:
    """Consensus + refit homography from a PixelMatchSet (or ``N x 4`` array) mapping A to B."""
    coords = np.asarray(getattr(matches, "coords", matches), dtype=np.float64).reshape(-1, 4)
    h, _ = ransac_homography(coords[:, :2], coords[:, 2:], tol=tol, iterations=iterations, seed=seed)
    return h


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def correct_mask(matches, truth_map: np.ndarray, tol_px: float = 3.0) -> np.ndarray:
    coords = np.asarray(getattr(matches, "coords", matches), dtype=np.float64).reshape(-1, 4)
    if len(coords) == 0:
        return np.zeros(0, dtype=bool)
    err = np.abs(apply_homography(truth_map, coords[:, :2]) - coords[:, 2:])
    return (err[:, 0] < tol_px) & (err[:, 1] < tol_px)


def ncm(matches, truth_map: np.ndarray, tol_px: float = 3.0) -> int:
    """Matches whose horizontal and vertical errors are both below ``tol_px``."""
    return int(correct_mask(matches, truth_map, tol_px).sum())


def success(ncm_value: int) -> bool:
    return ncm_value > SUCCESS_MIN_NCM


def rmse(matches, h: np.ndarray) -> float:
    coords = np.asarray(getattr(matches, "coords", matches), dtype=np.float64).reshape(-1, 4)
    if len(coords) == 0:
        return FAILED_RMSE
    d = apply_homography(h, coords[:, :2]) - coords[:, 2:]
    return float(np.sqrt((d ** 2).sum() / len(coords)))


def acr(ncm_noise: float, ncm_clean: float) -> float | None:
    """Ratio of noisy to clean correct-match counts; ``None`` when the clean count is zero."""
    if ncm_clean == 0:
        return None
    return ncm_noise / ncm_clean


@dataclass
class EvalReport:
    ncm: int
    success: bool
    rmse: float
    runtime: float
    acr: float | None = None

    @property
    def borderline(self) -> bool:
        # NCM == 10 fails ">10" but is not "<10": flagged in reports
        return self.ncm == SUCCESS_MIN_NCM


def evaluate_pair(matches, truth_map: np.ndarray, runtime: float = float("nan"), seed: int = 0) -> EvalReport:
    mask = correct_mask(matches, truth_map)
    n = int(mask.sum())
    ok = success(n)
    err = FAILED_RMSE
    if ok:
        coords = np.asarray(getattr(matches, "coords", matches)).reshape(-1, 4)[mask]
        try:
            err = rmse(coords, estimate_homography(coords, seed=seed))
        except EstimationError:
            err = FAILED_RMSE
    return EvalReport(ncm=n, success=ok, rmse=err, runtime=runtime)
