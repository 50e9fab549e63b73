"""Desk-scale training drivers for the outlier network and the matcher."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DegeneracyError, TrainingDiverged
from .losses import classification_loss, coarse_ground_truth, coarse_loss, essential_loss, fine_loss, total_loss
from .matcher import crop_patches, fine_centres, fine_heatmaps, patch_valid, pixels_to_grid, FINE_STRIDE
from .geometry import apply_homography
from .noise import add_gaussian_noise, add_stripe_noise
from .outlier import OutlierNet, weighted_eight_point, weights_from_logits
from .pipeline import MatchingModel, PipelineConfig
from .synth import generate_pair, two_view_sample
from .tensor import AdamState, Rng, adam_step, init_parameters, save_weights, state_of

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "loss_total", "loss_coarse", "loss_fine", "loss_cls", "loss_ess"]


@dataclass
class OutlierTrainConfig:
    seed: int = 0
    steps: int = 10_000
    batch: int = 256
    lr: float = 1e-3
    alpha: float = 0.5
    beta: float = 0.1
    ess_warmup: int = 2_000
    width: int = 128
    blocks: int = 12
    inlier_ratio: tuple[float, float] = (0.3, 0.9)
    planar_fraction: float = 0.5  # benchmark pairs are homographies


@dataclass
class MatcherTrainConfig:
    seed: int = 0
    steps: int = 2_000
    size: int = 128
    lr: float = 1e-3
    noise_prob: float = 0.5
    aug_snr_db: tuple[float, float] = (8.0, 20.0)  # milder than any benchmark level
    aug_stripe_var: tuple[float, float] | None = None
    max_fine: int = 96
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)


def _check_finite(step: int, loss: torch.Tensor, params) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss.item()} at step {step}")
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient at step {step}")


def _write_log(path: str | Path | None, rows: list[list[float]]) -> None:
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(LOG_HEADER)
        for r in rows:
            out.writerow([int(r[0])] + [f"{v:.9g}" for v in r[1:]])


def outlier_step_loss(net: OutlierNet, coords: torch.Tensor, labels: torch.Tensor, e_gt: torch.Tensor,
                      alpha: float, beta: float, with_ess: bool):
    y = net(coords)
    w = weights_from_logits(y)
    l_cls = classification_loss(w, labels)
    l_ess = torch.zeros((), dtype=coords.dtype)
    if with_ess and int((labels > 0).sum()) >= 8:
        try:
            e_hat = weighted_eight_point(coords, w)
            l_ess = essential_loss(e_hat, e_gt, coords[labels > 0])
        except DegeneracyError:
            pass
    return total_loss(0.0, 0.0, l_cls, l_ess, alpha, beta), l_cls, l_ess


def train_outlier_network(cfg: OutlierTrainConfig, out: str | Path | None = None,
                          log_path: str | Path | None = None) -> tuple[OutlierNet, list[list[float]]]:
    """Trains on synthetic two-view correspondence sets; writes ``outlier.*`` tensors to ``out``."""
    torch.set_num_threads(1)
    net = OutlierNet(cfg.width, cfg.blocks)
    init_parameters(net, cfg.seed, "outlier")
    params = list(net.parameters())
    state = AdamState()
    rng = Rng(cfg.seed, "train-outlier/data")
    rows = []
    for step in range(cfg.steps):
        lo, hi = cfg.inlier_ratio
        ratio = lo + (hi - lo) * rng.uniform(1)[0]
        planar = rng.uniform(1)[0] < cfg.planar_fraction
        sample = two_view_sample(rng, cfg.batch, ratio, planar=planar)
        coords = torch.from_numpy(sample.coords)
        labels = torch.from_numpy(sample.labels)
        e_gt = torch.from_numpy(sample.e_gt)
        loss, l_cls, l_ess = outlier_step_loss(net, coords, labels, e_gt, cfg.alpha, cfg.beta,
                                               with_ess=step >= cfg.ess_warmup and not planar)
        for p in params:
            p.grad = None
        loss.backward()
        _check_finite(step, loss, params)
        adam_step(params, [p.grad for p in params], state, lr=cfg.lr)
        rows.append([step, loss.item(), 0.0, 0.0, l_cls.item(), l_ess.item()])
        if step % 500 == 0:
            log.info("outlier step %d loss %.4f cls %.4f ess %.4g", step, loss.item(), l_cls.item(), l_ess.item())
    if out is not None:
        save_weights(out, state_of([("outlier", net)]))
    _write_log(log_path, rows)
    return net, rows


def outlier_accuracy(net: OutlierNet, seed: int, total: int = 10_000, batch: int = 500,
                     inlier_ratio: float = 0.5, threshold: float = 0.5) -> float:
    """Held-out accuracy of the ``w >= threshold`` decision against epipolar labels."""
    rng = Rng(seed, "heldout-outlier")
    correct = 0
    count = 0
    with torch.no_grad():
        for _ in range(math.ceil(total / batch)):
            sample = two_view_sample(rng, batch, inlier_ratio)
            w = weights_from_logits(net(torch.from_numpy(sample.coords))).numpy()
            correct += int(((w >= threshold) == (sample.labels > 0)).sum())
            count += batch
    return correct / count


# --------------------------------------------------------------------------
# Matcher
# --------------------------------------------------------------------------

def augment_query(image: np.ndarray, rng: Rng, prob: float, snr_db: tuple[float, float] = (8.0, 20.0),
                  stripe_var: tuple[float, float] | None = None) -> np.ndarray:
    """With probability ``prob`` add Gaussian noise at an SNR drawn from ``snr_db``, or, when
    ``stripe_var`` is given, stripe noise half of the time."""
    draw = rng.uniform(3)
    if draw[0] >= prob:
        return image
    seed = int(rng.next_u64(1)[0] >> np.uint64(2))
    if stripe_var is not None and draw[1] >= 0.5:
        return add_stripe_noise(image, stripe_var[0] + (stripe_var[1] - stripe_var[0]) * draw[2], seed)
    return add_gaussian_noise(image, snr_db[0] + (snr_db[1] - snr_db[0]) * draw[2], seed)


def fine_targets(h_gt: np.ndarray, centres_a: np.ndarray, centres_b: np.ndarray, w_f: int):
    """Offsets of the mapped A centre from the B centre, in grid units, plus an in-window mask."""
    pa = centres_a[:, ::-1].astype(np.float64) * FINE_STRIDE  # (u, v) original pixels
    mapped = apply_homography(h_gt, pa) / FINE_STRIDE
    xi_px = mapped - centres_b[:, ::-1]
    radius = (w_f - 1) / 2.0
    inside = np.all(np.abs(xi_px) <= radius, axis=1)
    return pixels_to_grid(xi_px, w_f), inside


def matcher_step_loss(model: MatchingModel, image_a: np.ndarray, image_b: np.ndarray, h_gt: np.ndarray,
                      rng: Rng, max_fine: int):
    cfg = model.config
    ia = torch.from_numpy(image_a)
    ib = torch.from_numpy(image_b)
    p, grid_a, grid_b, fa, fb = model.coarse_confidence(ia, ib)
    p_gt = torch.from_numpy(coarse_ground_truth(h_gt, grid_a, grid_b))
    l_coarse = coarse_loss(p, p_gt)
    idx_a, idx_b = np.nonzero(p_gt.numpy())
    ca = fine_centres(np.stack(np.divmod(idx_a, grid_a[1]), axis=-1))
    cb = fine_centres(np.stack(np.divmod(idx_b, grid_b[1]), axis=-1))
    ok = patch_valid(ca, tuple(fa.shape[:2]), cfg.w_f) & patch_valid(cb, tuple(fb.shape[:2]), cfg.w_f)
    xi, inside = fine_targets(h_gt, ca, cb, cfg.w_f)
    keep = np.nonzero(ok & inside)[0]
    if len(keep) > max_fine:
        keep = np.sort(keep[rng.permutation(len(keep))[:max_fine]])
    if len(keep):
        z = fine_heatmaps(crop_patches(fa, ca[keep], cfg.w_f), crop_patches(fb, cb[keep], cfg.w_f),
                          model.feformer["fine"], cfg.w_f)
        l_fine = fine_loss(z, torch.from_numpy(xi[keep]), detach_weight=True)
    else:
        l_fine = torch.zeros((), dtype=p.dtype)
    return total_loss(l_coarse, l_fine, 0.0, 0.0), l_coarse, l_fine


def train_matcher_desk(cfg: MatcherTrainConfig, out: str | Path | None = None,
                       log_path: str | Path | None = None, init: dict | None = None):
    """Trains the matcher on synthetic homography pairs; writes ``backbone.*``/``feformer.*`` to ``out``."""
    torch.set_num_threads(1)
    model = MatchingModel(cfg.pipeline)
    init_parameters(model, cfg.seed, "matcher")
    params = list(model.parameters())
    state = AdamState()
    rng = Rng(cfg.seed, "train-matcher/data")
    rows = []
    for step in range(cfg.steps):
        pair_seed = int(rng.next_u64(1)[0] >> np.uint64(2))
        pair = generate_pair(pair_seed, cfg.size)
        image_a = augment_query(pair.image_a, rng, cfg.noise_prob, cfg.aug_snr_db, cfg.aug_stripe_var)
        loss, l_coarse, l_fine = matcher_step_loss(model, image_a, pair.image_b, pair.h_gt, rng, cfg.max_fine)
        for p in params:
            p.grad = None
        loss.backward()
        _check_finite(step, loss, params)
        adam_step(params, [p.grad for p in params], state, lr=cfg.lr)
        rows.append([step, loss.item(), l_coarse.item(), l_fine.item(), 0.0, 0.0])
        if step % 100 == 0:
            log.info("matcher step %d loss %.4f coarse %.5f fine %.4f", step, loss.item(), l_coarse.item(), l_fine.item())
    if out is not None:
        save_weights(out, state_of([("backbone", model.backbone), ("feformer", model.feformer)]))
    _write_log(log_path, rows)
    return model, rows
