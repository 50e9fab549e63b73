"""End-to-end matcher: backbone -> FPM -> positional encoding -> FEFormer ->
coarse selection -> fine refinement -> outlier removal."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, BackboneConfig
from .enhancer import FEFormer, PositionalEncodingSpec, npe
from .errors import ParameterError
from .matcher import PixelMatchSet, dual_softmax, fine_match, score_matrix, select_coarse
from .outlier import CorrespondenceBatch, OutlierNet, classify, consensus_baseline
from .tensor import DTYPE, init_parameters, load_into, load_weights

PROFILES = {"desk": BackboneConfig.desk(), "paper": BackboneConfig.paper()}
OUTLIER_MODES = ("network", "consensus", "none")
PE_MODES = ("normalized", "absolute")


@dataclass
class PipelineConfig:
    profile: str = "desk"
    coarse_layers: int = 4
    fine_layers: int = 2
    heads: int = 8
    use_fpm: bool = True
    pe_mode: str = "normalized"
    train_width: int = 128
    train_height: int = 128
    tau_c: float = 0.2
    temperature: float = 0.1
    w_f: int = 5
    outlier: str = "network"
    inlier_threshold: float = 0.5
    outlier_width: int = 128
    outlier_blocks: int = 12
    consensus_iterations: int = 1000
    consensus_tol: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ParameterError(f"unknown profile {self.profile!r}")
        if self.pe_mode not in PE_MODES:
            raise ParameterError(f"pe_mode must be one of {PE_MODES}")
        if self.outlier not in OUTLIER_MODES:
            raise ParameterError(f"outlier must be one of {OUTLIER_MODES}")
        if self.coarse_layers < 1 or self.fine_layers < 1:
            raise ParameterError("layer counts must be >= 1")
        if self.w_f % 2 == 0:
            raise ParameterError("w_f must be odd")

    @property
    def backbone(self) -> BackboneConfig:
        return PROFILES[self.profile]

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Flat ``key = value`` lines (``#`` comments); unknown keys are rejected."""
    base = base or PipelineConfig()
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ParameterError(f"line {lineno}: unknown key {key!r}")
        kind = type(getattr(base, key))
        if kind is bool:
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ParameterError(f"line {lineno}: {key} expects a boolean")
            changes[key] = value.lower() in ("true", "1", "yes")
        else:
            try:
                changes[key] = kind(value)
            except ValueError as exc:
                raise ParameterError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return dataclasses.replace(base, **changes)


def load_config(path: str | Path, base: PipelineConfig | None = None) -> PipelineConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


class MatchingModel(nn.Module):
    """Trainable part of the matcher (parameter names: ``backbone.*``, ``feformer.coarse.*``,
    ``feformer.fine.*``)."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.config = config
        bc = config.backbone
        self.backbone = Backbone(bc)
        self.feformer = nn.ModuleDict({
            "coarse": FEFormer(bc.coarse_dim, config.coarse_layers, config.heads),
            "fine": FEFormer(bc.fine_dim, config.fine_layers, config.heads),
        })

    def encode(self, images: torch.Tensor):
        """Backbone + FPM + encoding for a ``B x H x W`` stack. Returns (coarse tokens map, fine map)."""
        feats = self.backbone(images)
        coarse = self.backbone.fpm(feats.coarse) if self.config.use_fpm else feats.coarse
        h, w = images.shape[-2:]
        if self.config.pe_mode == "normalized":
            spec = PositionalEncodingSpec(coarse.shape[-1], self.config.train_width, self.config.train_height, w, h)
        else:
            spec = PositionalEncodingSpec(coarse.shape[-1])
        return npe(coarse, spec), feats.fine

    def coarse_confidence(self, image_a: torch.Tensor, image_b: torch.Tensor):
        """Dual-softmax confidence plus the maps needed for fine matching."""
        if image_a.shape == image_b.shape:
            coarse, fine = self.encode(torch.stack([image_a, image_b]))
            ca, cb, fa, fb = coarse[0], coarse[1], fine[0], fine[1]
        else:
            ca, fa = (t[0] for t in self.encode(image_a[None]))
            cb, fb = (t[0] for t in self.encode(image_b[None]))
        grid_a, grid_b = tuple(ca.shape[:2]), tuple(cb.shape[:2])
        ta, tb = self.feformer["coarse"](ca.reshape(-1, ca.shape[-1]), cb.reshape(-1, cb.shape[-1]))
        p = dual_softmax(score_matrix(ta, tb, self.config.temperature))
        return p, grid_a, grid_b, fa, fb

    @torch.no_grad()
    def match(self, image_a, image_b) -> PixelMatchSet:
        ia = torch.as_tensor(np.asarray(image_a, dtype=np.float64))
        ib = torch.as_tensor(np.asarray(image_b, dtype=np.float64))
        p, grid_a, grid_b, fa, fb = self.coarse_confidence(ia, ib)
        coarse = select_coarse(p, self.config.tau_c, grid_a, grid_b)
        return fine_match(coarse, fa, fb, self.config.w_f, self.feformer["fine"])


class Pipeline:
    """Matcher plus the configured outlier stage."""

    def __init__(self, config: PipelineConfig, model: MatchingModel | None = None, outlier_net: OutlierNet | None = None):
        self.config = config
        self.model = model or MatchingModel(config)
        self.outlier_net = outlier_net
        if config.outlier == "network" and outlier_net is None:
            self.outlier_net = OutlierNet(config.outlier_width, config.outlier_blocks)

    @classmethod
    def random_init(cls, config: PipelineConfig) -> "Pipeline":
        pipe = cls(config)
        init_parameters(pipe.model, config.seed, "matcher")
        if pipe.outlier_net is not None:
            init_parameters(pipe.outlier_net, config.seed, "outlier")
        return pipe

    @classmethod
    def from_weights(cls, config: PipelineConfig, tensors: Mapping[str, torch.Tensor]) -> "Pipeline":
        pipe = cls(config)
        load_into(pipe.model.backbone, "backbone", _without_fpm(tensors, pipe.model.backbone, config))
        load_into(pipe.model.feformer, "feformer", tensors)
        if config.outlier == "network":
            load_into(pipe.outlier_net, "outlier", tensors)
        return pipe

    @classmethod
    def from_files(cls, config: PipelineConfig, paths) -> "Pipeline":
        merged: dict[str, torch.Tensor] = {}
        for path in paths:
            merged.update(load_weights(path))
        return cls.from_weights(config, merged)

    def remove_outliers(self, matches: PixelMatchSet, size_a: tuple[int, int], size_b: tuple[int, int]):
        """Returns (kept matches, per-match weights for all input matches)."""
        n = len(matches)
        mode = self.config.outlier
        if mode == "none" or n == 0:
            return matches, np.ones(n)
        if mode == "consensus":
            if n < 4:
                return matches.subset(np.zeros(n, dtype=bool)), np.zeros(n)
            try:
                mask, _ = consensus_baseline(matches, self.config.consensus_iterations, self.config.consensus_tol,
                                             seed=self.config.seed)
            except ValueError:
                mask = np.zeros(n, dtype=bool)
            return matches.subset(mask), mask.astype(np.float64)
        if n < 2:
            return matches, np.ones(n)
        batch = CorrespondenceBatch.from_pixels(matches.coords, size_a, size_b)
        weights = classify(batch, self.outlier_net)
        w = weights.w.numpy()
        return matches.subset(w >= self.config.inlier_threshold), w

    def run(self, image_a, image_b):
        """Match two images; returns (final matches, raw matches, raw weights)."""
        image_a = np.asarray(image_a, dtype=np.float64)
        image_b = np.asarray(image_b, dtype=np.float64)
        raw = self.model.match(image_a, image_b)
        size_a = (image_a.shape[1], image_a.shape[0])
        size_b = (image_b.shape[1], image_b.shape[0])
        kept, w = self.remove_outliers(raw, size_a, size_b)
        return kept, raw, w


def _without_fpm(tensors: Mapping[str, torch.Tensor], backbone: Backbone, config: PipelineConfig):
    """With the FPM disabled its tensors are optional; fill gaps with the module's own values."""
    if config.use_fpm:
        return tensors
    out = dict(tensors)
    for name, p in backbone.fpm.named_parameters():
        out.setdefault(f"backbone.fpm.{name}", p.detach())
    return out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
