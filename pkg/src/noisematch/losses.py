"""Training objectives: coarse cross-entropy, variance-weighted fine loss and the
outlier network's classification + essential-matrix terms."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError
from .geometry import apply_homography
from .matcher import COARSE_STRIDE, heatmap_offset, heatmap_variance

PROB_CLAMP = 1e-6
VARIANCE_FLOOR = 1e-6
ESS_FLOOR = 1e-12


class LossWarning(UserWarning):
    pass


@dataclass
class SupervisionPack:
    p_gt: torch.Tensor | None = None
    transform: np.ndarray | None = None
    labels: torch.Tensor | None = None
    e_gt: torch.Tensor | None = None
    alpha: float = 0.5
    beta: float = 0.1


def _bce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def coarse_loss(p: torch.Tensor, p_gt: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over every grid-pair cell."""
    if p.shape != p_gt.shape:
        raise DimensionError(f"confidence {tuple(p.shape)} vs ground truth {tuple(p_gt.shape)}")
    return _bce(p, p_gt.to(p.dtype)).mean()


def coarse_ground_truth(h_gt: np.ndarray, grid_a: tuple[int, int], grid_b: tuple[int, int]) -> np.ndarray:
    """0/1 matrix: cell A is paired with the cell of B containing its mapped position.

    A cell (i, j) sits at pixel (u, v) = (8j, 8i); the pair is positive when the mapped
    point is within half a cell (4 px) of the B cell on both axes.
    """
    ha, wa = grid_a
    hb, wb = grid_b
    ii, jj = np.meshgrid(np.arange(ha), np.arange(wa), indexing="ij")
    pts = np.stack([jj.ravel(), ii.ravel()], axis=-1).astype(np.float64) * COARSE_STRIDE
    mapped = apply_homography(h_gt, pts) / COARSE_STRIDE
    cj = np.floor(mapped[:, 0] + 0.5).astype(np.int64)
    ci = np.floor(mapped[:, 1] + 0.5).astype(np.int64)
    ok = np.isfinite(mapped).all(axis=1) & (ci >= 0) & (ci < hb) & (cj >= 0) & (cj < wb)
    gt = np.zeros((ha * wa, hb * wb))
    rows = np.nonzero(ok)[0]
    gt[rows, ci[ok] * wb + cj[ok]] = 1.0
    return gt


def reprojection_error(xa, xb, transform) -> np.ndarray:
    """``T(xA) - xB`` for a 3x3 homography or a callable point map."""
    xa = np.asarray(xa, dtype=np.float64).reshape(-1, 2)
    xb = np.asarray(xb, dtype=np.float64).reshape(-1, 2)
    mapped = transform(xa) if callable(transform) else apply_homography(np.asarray(transform), xa)
    return mapped - xb


def fine_loss(heatmaps: torch.Tensor, targets: torch.Tensor, detach_weight: bool = False) -> torch.Tensor:
    """Mean of ``||E(Z) - xi||_2 / sigma^2(Z)`` over matches, in grid units.

    ``detach_weight`` stops gradients through the variance weight (it then acts as a
    per-match confidence weight instead of a trainable term).
    """
    if heatmaps.shape[0] == 0:
        warnings.warn("fine loss over an empty match list", LossWarning, stacklevel=2)
        return heatmaps.sum() * 0.0
    if targets.shape != (heatmaps.shape[0], 2):
        raise DimensionError("one 2-vector target per heatmap expected")
    var = heatmap_variance(heatmaps).clamp_min(VARIANCE_FLOOR)
    if detach_weight:
        var = var.detach()
    dist = torch.linalg.vector_norm(heatmap_offset(heatmaps) - targets, dim=-1)
    return (dist / var).mean()


def classification_loss(w: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if w.shape != labels.shape:
        raise DimensionError("weights and labels differ in shape")
    return _bce(w, labels.to(w.dtype)).mean()


def essential_loss(e_hat: torch.Tensor, e_gt: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Squared algebraic epipolar residual of ``e_hat`` over the ground-truth epipolar line terms."""
    e_gt = e_gt / e_gt.norm()
    ones = torch.ones_like(coords[:, :1])
    p = torch.cat([coords[:, :2], ones], dim=1)
    q = torch.cat([coords[:, 2:], ones], dim=1)
    num = ((q @ e_hat) * p).sum(dim=1) ** 2
    ep = p @ e_gt.T  # rows: E_gt p
    etq = q @ e_gt  # rows: E_gt^T p'
    den = ep[:, 0] ** 2 + ep[:, 1] ** 2 + etq[:, 0] ** 2 + etq[:, 1] ** 2
    floored = den < ESS_FLOOR
    if floored.float().mean() > 0.1:
        warnings.warn("essential loss denominator floored on >10% of terms", LossWarning, stacklevel=2)
    return (num / den.clamp_min(ESS_FLOOR)).mean()


def total_loss(coarse, fine, cls, ess, alpha: float = 0.5, beta: float = 0.1):
    return coarse + fine + (alpha * cls + beta * ess)
