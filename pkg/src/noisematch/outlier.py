"""Learned inlier/outlier classification, weighted 8-point essential matrix and a
sample-consensus homography baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ContractError, DegeneracyError, DimensionError
from .geometry import ransac_homography
from .tensor import DTYPE, self_adjoint_eigen

INLIER_THRESHOLD = 0.5


@dataclass
class CorrespondenceBatch:
    coords: torch.Tensor  # N x 4 normalized [uA, vA, uB, vB]

    def __len__(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def from_pixels(cls, coords_px, size_a: tuple[int, int], size_b: tuple[int, int] | None = None,
                    k_a: np.ndarray | None = None, k_b: np.ndarray | None = None) -> "CorrespondenceBatch":
        """Normalize pixel correspondences; ``size_*`` is (width, height).

        Without intrinsics the principal point is the image centre and the focal
        length is half the larger extent.
        """
        coords_px = np.asarray(coords_px, dtype=np.float64).reshape(-1, 4)
        size_b = size_b or size_a
        k_a = default_intrinsics(*size_a) if k_a is None else k_a
        k_b = default_intrinsics(*size_b) if k_b is None else k_b
        out = np.concatenate([normalize_points(coords_px[:, :2], k_a), normalize_points(coords_px[:, 2:], k_b)], axis=1)
        return cls(torch.from_numpy(out))


@dataclass
class InlierWeights:
    w: torch.Tensor
    logits: torch.Tensor

    def mask(self, threshold: float = INLIER_THRESHOLD) -> np.ndarray:
        return (self.w >= threshold).detach().numpy()


def default_intrinsics(width: int, height: int) -> np.ndarray:
    f = max(width, height) / 2.0
    return np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])


def normalize_points(pts: np.ndarray, k: np.ndarray) -> np.ndarray:
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.linalg.inv(k).T
    return hom[:, :2] / hom[:, 2:3]


def context_norm(x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Per-channel standardization across the correspondence axis (rows)."""
    if x.shape[-2] < 2:
        raise ContractError("context normalization needs at least two correspondences")
    mean = x.mean(dim=-2, keepdim=True)
    std = torch.sqrt(((x - mean) ** 2).mean(dim=-2, keepdim=True))
    return (x - mean) / (std + eps)


class _Pointwise(nn.Module):
    def __init__(self, cin: int, cout: int, bias: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(cin, cout, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(cout, dtype=DTYPE)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.lin1 = _Pointwise(width, width)
        self.lin2 = _Pointwise(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(context_norm(self.lin1(x)))
        h = torch.relu(context_norm(self.lin2(h)))
        return x + h


class OutlierNet(nn.Module):
    """Pointwise lift, residual blocks with context normalization, scalar logit head."""

    def __init__(self, width: int = 128, blocks: int = 12):
        super().__init__()
        self.lift = _Pointwise(4, width, bias=True)
        self.blocks = nn.ModuleList(ResidualBlock(width) for _ in range(blocks))
        self.head = _Pointwise(width, 1, bias=True)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        if coords.shape[-1] != 4:
            raise DimensionError("correspondences must be N x 4")
        h = self.lift(coords)
        for block in self.blocks:
            h = block(h)
        return self.head(h).squeeze(-1)


def weights_from_logits(y: torch.Tensor) -> torch.Tensor:
    return torch.tanh(torch.relu(y))


def classify(batch: CorrespondenceBatch, net: OutlierNet) -> InlierWeights:
    """Inlier weights for a batch.

    Rows are evaluated in a canonical (lexicographic) order and scattered back,
    so permuting the input permutes the output bit for bit.
    """
    coords = batch.coords.to(DTYPE)
    if coords.shape[0] < 2:
        raise ContractError("classification needs at least two correspondences")
    arr = coords.detach().numpy()
    order = np.lexsort(arr.T[::-1])
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    with torch.no_grad():
        y = net(coords[torch.as_tensor(order)])[torch.as_tensor(inv)]
    return InlierWeights(w=weights_from_logits(y), logits=y)


# --------------------------------------------------------------------------
# Weighted 8-point
# --------------------------------------------------------------------------

def epipolar_rows(coords: torch.Tensor) -> torch.Tensor:
    """Rows z with z . vec(E) = p'^T E p for p = (uA, vA, 1), p' = (uB, vB, 1)."""
    p = torch.cat([coords[:, :2], torch.ones_like(coords[:, :1])], dim=1)
    q = torch.cat([coords[:, 2:], torch.ones_like(coords[:, :1])], dim=1)
    return (q[:, :, None] * p[:, None, :]).reshape(-1, 9)


def normalize_essential(e: torch.Tensor) -> torch.Tensor:
    """Unit Frobenius norm with the first clearly nonzero entry positive."""
    e = e / e.norm()
    flat = e.detach().reshape(-1)
    nz = torch.nonzero(flat.abs() > 1e-12)
    if len(nz) and flat[nz[0, 0]] < 0:
        e = -e
    return e


def weighted_eight_point(coords: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Essential matrix as the smallest-eigenvalue eigenvector of sum_i w_i z_i z_i^T."""
    coords = torch.as_tensor(coords, dtype=DTYPE)
    w = torch.as_tensor(w, dtype=DTYPE)
    if coords.shape[0] != w.shape[0]:
        raise DimensionError("one weight per correspondence expected")
    if int((w.detach() > 0).sum()) < 8:
        raise DegeneracyError("weighted 8-point needs at least 8 positively weighted correspondences")
    z = epipolar_rows(coords)
    x = z.T @ (w[:, None] * z)
    x = 0.5 * (x + x.T)
    _, vecs = self_adjoint_eigen(x)
    return normalize_essential(vecs[:, 0].reshape(3, 3))


# --------------------------------------------------------------------------
# Consensus baseline
# --------------------------------------------------------------------------

def consensus_baseline(matches, iterations: int = 1000, inlier_tol_px: float = 3.0,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Inlier mask and homography from seeded 4-point sample consensus plus refit."""
    coords = np.asarray(getattr(matches, "coords", matches), dtype=np.float64).reshape(-1, 4)
    if len(coords) < 4:
        raise DegeneracyError(f"consensus needs >= 4 matches, got {len(coords)}")
    h, mask = ransac_homography(coords[:, :2], coords[:, 2:], tol=inlier_tol_px, iterations=iterations, seed=seed)
    return mask, h
