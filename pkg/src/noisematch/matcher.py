"""Coarse matching (dual-softmax + mutual nearest neighbours) and fine refinement
by heatmap spatial expectation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .enhancer import FEFormer
from .errors import DimensionError, ParameterError
from .tensor import DTYPE, softmax

COARSE_STRIDE = 8
FINE_STRIDE = 2
UNMATCHED_SCORE = -1e9


@dataclass
class CoarseMatchSet:
    """One-to-one cell matches between two coarse grids (flat row-major indices)."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    confidence: np.ndarray
    grid_a: tuple[int, int]
    grid_b: tuple[int, int]

    def __len__(self) -> int:
        return len(self.idx_a)

    @property
    def cells_a(self) -> np.ndarray:
        return np.stack(np.divmod(self.idx_a, self.grid_a[1]), axis=-1)

    @property
    def cells_b(self) -> np.ndarray:
        return np.stack(np.divmod(self.idx_b, self.grid_b[1]), axis=-1)


@dataclass
class PixelMatchSet:
    """Pixel correspondences ``[uA, vA, uB, vB]`` (u = column, v = row) with per-match scores."""

    coords: np.ndarray  # N x 4
    conf_coarse: np.ndarray
    conf_fine: np.ndarray
    var_heatmap: np.ndarray
    skipped: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.coords)

    @classmethod
    def from_coords(cls, coords) -> "PixelMatchSet":
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 4)
        ones = np.ones(len(coords))
        return cls(coords, ones.copy(), ones.copy(), np.zeros(len(coords)))

    def subset(self, mask: np.ndarray) -> "PixelMatchSet":
        return PixelMatchSet(self.coords[mask], self.conf_coarse[mask], self.conf_fine[mask],
                             self.var_heatmap[mask], self.skipped)

    def write_csv(self, path: str | Path, weights: np.ndarray | None = None) -> None:
        header = ["uA", "vA", "uB", "vB", "conf_coarse", "conf_fine", "var_heatmap"]
        if weights is not None:
            header.append("w")
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(header)
            for k in range(len(self)):
                row = [f"{c:.6f}" for c in self.coords[k]]
                row += [f"{self.conf_coarse[k]:.6f}", f"{self.conf_fine[k]:.6f}", f"{self.var_heatmap[k]:.6f}"]
                if weights is not None:
                    row.append(f"{weights[k]:.6f}")
                out.writerow(row)


def read_matches_csv(path: str | Path) -> PixelMatchSet:
    """Reads either the full match CSV or a bare ``uA,vA,uB,vB`` correspondence file."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    coords = np.array([[float(r[k]) for k in ("uA", "vA", "uB", "vB")] for r in rows]).reshape(-1, 4)
    ms = PixelMatchSet.from_coords(coords)
    if rows and "conf_coarse" in rows[0]:
        ms.conf_coarse = np.array([float(r["conf_coarse"]) for r in rows])
        ms.conf_fine = np.array([float(r["conf_fine"]) for r in rows])
        ms.var_heatmap = np.array([float(r["var_heatmap"]) for r in rows])
    return ms


# --------------------------------------------------------------------------
# Coarse level
# --------------------------------------------------------------------------

def score_matrix(fa: torch.Tensor, fb: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Cosine similarity between rows of ``fa`` and ``fb`` divided by ``temperature``.

    Rows with zero norm cannot match; their scores are set to a large negative constant.
    """
    if fa.shape[-1] != fb.shape[-1]:
        raise DimensionError("feature widths differ")
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    na = fa.norm(dim=-1, keepdim=True)
    nb = fb.norm(dim=-1, keepdim=True)
    s = (fa / na.clamp_min(1e-300)) @ (fb / nb.clamp_min(1e-300)).transpose(-2, -1) / temperature
    dead = (na == 0) | (nb == 0).transpose(-2, -1)
    if bool(dead.any()):
        s = torch.where(dead, torch.full_like(s, UNMATCHED_SCORE), s)
    return s


def dual_softmax(s: torch.Tensor) -> torch.Tensor:
    return softmax(s, axis=-1) * softmax(s, axis=-2)


def select_coarse(p, tau_c: float = 0.2, grid_a: tuple[int, int] | None = None,
                  grid_b: tuple[int, int] | None = None) -> CoarseMatchSet:
    """Keep (i, j) when P[i, j] >= tau_c and it is the maximum of its row and column.

    Ties resolve to the smaller column, then the smaller row.
    """
    p = p.detach().cpu().numpy() if torch.is_tensor(p) else np.asarray(p, dtype=np.float64)
    n, m = p.shape
    grid_a = grid_a or (1, n)
    grid_b = grid_b or (1, m)
    empty = np.zeros(0, dtype=np.int64)
    if n == 0 or m == 0:
        return CoarseMatchSet(empty, empty, np.zeros(0), grid_a, grid_b)
    row_best = np.argmax(p, axis=1)
    col_best = np.argmax(p, axis=0)
    rows = np.arange(n)
    mutual = col_best[row_best] == rows
    keep = mutual & (p[rows, row_best] >= tau_c)
    ia = rows[keep]
    ib = row_best[keep]
    return CoarseMatchSet(ia.astype(np.int64), ib.astype(np.int64), p[ia, ib], grid_a, grid_b)


# --------------------------------------------------------------------------
# Fine level
# --------------------------------------------------------------------------

def normalized_grid(n: int) -> tuple[torch.Tensor, torch.Tensor]:
    """``X[i, j] = (2j - n)/n`` and ``Y[i, j] = (2i - n)/n`` with 1-based i (row), j (column)."""
    idx = torch.arange(1, n + 1, dtype=DTYPE)
    vals = (2.0 * idx - n) / n
    return vals[None, :].expand(n, n), vals[:, None].expand(n, n)


def spatial_expectation(z: torch.Tensor) -> torch.Tensor:
    """Expected (X, Y) of ``[..., n, n]`` heatmaps over the normalized grid."""
    n = z.shape[-1]
    gx, gy = normalized_grid(n)
    return torch.stack([(z * gx).sum(dim=(-2, -1)), (z * gy).sum(dim=(-2, -1))], dim=-1)


def heatmap_offset(z: torch.Tensor) -> torch.Tensor:
    """Expectation measured from the centre cell's grid value, in grid units (2/n per fine pixel)."""
    n = z.shape[-1]
    centre = (2.0 * ((n + 1) // 2) - n) / n
    return spatial_expectation(z) - centre


def heatmap_variance(z: torch.Tensor) -> torch.Tensor:
    """Total variance (sum of per-axis variances) of ``[..., n, n]`` heatmaps."""
    n = z.shape[-1]
    gx, gy = normalized_grid(n)
    mean = spatial_expectation(z)
    vx = (z * (gx - mean[..., 0, None, None]) ** 2).sum(dim=(-2, -1))
    vy = (z * (gy - mean[..., 1, None, None]) ** 2).sum(dim=(-2, -1))
    return vx + vy


def grid_to_pixels(offset, w_f: int):
    """Grid-unit offset to fine-map pixels."""
    return offset * (w_f / 2.0)


def pixels_to_grid(offset, w_f: int):
    return offset * (2.0 / w_f)


def fine_centres(cells: np.ndarray) -> np.ndarray:
    """Coarse (row, col) cells to fine-map (row, col) positions."""
    return cells * (COARSE_STRIDE // FINE_STRIDE)


def patch_valid(centres: np.ndarray, fine_shape: tuple[int, int], w_f: int) -> np.ndarray:
    r = w_f // 2
    h, w = fine_shape
    return ((centres[:, 0] - r >= 0) & (centres[:, 0] + r <= h - 1)
            & (centres[:, 1] - r >= 0) & (centres[:, 1] + r <= w - 1))


def crop_patches(fine: torch.Tensor, centres: np.ndarray, w_f: int) -> torch.Tensor:
    """Gather ``M x w_f^2 x C`` token patches around (row, col) centres of an ``H x W x C`` map."""
    r = w_f // 2
    d = np.arange(-r, r + 1)
    rows = centres[:, 0, None, None] + d[None, :, None]
    cols = centres[:, 1, None, None] + d[None, None, :]
    w = fine.shape[1]
    flat = torch.as_tensor((rows * w + cols).reshape(len(centres), -1), dtype=torch.long)
    return fine.reshape(-1, fine.shape[-1])[flat]


def fine_heatmaps(pa: torch.Tensor, pb: torch.Tensor, fine_former: FEFormer | None, w_f: int) -> torch.Tensor:
    """Enhance patch pairs and correlate A's centre token against all of B's tokens."""
    if fine_former is not None:
        pa, pb = fine_former(pa, pb)
    centre = pa[:, (w_f * w_f) // 2, :]
    corr = (pb @ centre.unsqueeze(-1)).squeeze(-1) / np.sqrt(pa.shape[-1])
    return softmax(corr, axis=-1).reshape(-1, w_f, w_f)


def fine_match(coarse: CoarseMatchSet, fine_a: torch.Tensor, fine_b: torch.Tensor, w_f: int = 5,
               fine_former: FEFormer | None = None) -> PixelMatchSet:
    """Refine coarse matches to sub-pixel precision in original-image pixels.

    Matches whose patch would leave either fine map are dropped and counted in ``skipped``.
    """
    if w_f % 2 == 0 or w_f < 1:
        raise ParameterError(f"fine window must be odd, got {w_f}")
    ca = fine_centres(coarse.cells_a)
    cb = fine_centres(coarse.cells_b)
    ok = patch_valid(ca, tuple(fine_a.shape[:2]), w_f) & patch_valid(cb, tuple(fine_b.shape[:2]), w_f)
    skipped = int((~ok).sum())
    ca, cb = ca[ok], cb[ok]
    conf_c = coarse.confidence[ok]
    if len(ca) == 0:
        empty = np.zeros(0)
        return PixelMatchSet(np.zeros((0, 4)), empty, empty.copy(), empty.copy(), skipped)
    with torch.no_grad():
        z = fine_heatmaps(crop_patches(fine_a, ca, w_f), crop_patches(fine_b, cb, w_f), fine_former, w_f)
        offset = grid_to_pixels(heatmap_offset(z), w_f).numpy()  # (dx, dy) in fine pixels
        var = heatmap_variance(z).numpy()
        conf_f = z.reshape(len(z), -1).amax(dim=-1).numpy()
    ua = ca[:, 1] * FINE_STRIDE
    va = ca[:, 0] * FINE_STRIDE
    ub = (cb[:, 1] + offset[:, 0]) * FINE_STRIDE
    vb = (cb[:, 0] + offset[:, 1]) * FINE_STRIDE
    coords = np.stack([ua, va, ub, vb], axis=-1).astype(np.float64)
    return PixelMatchSet(coords, conf_c, conf_f, var, skipped)
