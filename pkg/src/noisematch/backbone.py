"""Three-level convolutional pyramid and the multiscale depthwise preprocessing module."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, ParameterError
from .tensor import DTYPE, conv2d


@dataclass(frozen=True)
class BackboneConfig:
    coarse_dim: int = 64
    fine_dim: int = 32

    @classmethod
    def paper(cls) -> "BackboneConfig":
        return cls(coarse_dim=256, fine_dim=128)

    @classmethod
    def desk(cls) -> "BackboneConfig":
        return cls(coarse_dim=64, fine_dim=32)


@dataclass
class PyramidFeatures:
    coarse: torch.Tensor  # [B?] x H/8 x W/8 x C_coarse
    fine: torch.Tensor  # [B?] x H/2 x W/2 x C_fine


class Conv(nn.Module):
    def __init__(self, k: int, cin: int, cout: int, stride: int = 1, depthwise: bool = False):
        super().__init__()
        shape = (k, k, 1, cin) if depthwise else (k, k, cin, cout)
        self.kernel = nn.Parameter(torch.zeros(shape, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(shape[3], dtype=DTYPE))
        self.stride = stride
        self.depthwise = depthwise

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.kernel, self.bias, stride=self.stride, depthwise=self.depthwise)


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel standardization over the spatial axes of a channels-last map."""
    mean = x.mean(dim=(-3, -2), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(-3, -2), keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x upsampling where source index k sits at target index 2k.

    Odd target rows/columns average their two neighbours; the trailing one
    replicates the last source sample.
    """

    def along(t: torch.Tensor, axis: int) -> torch.Tensor:
        nxt = torch.cat([t.narrow(axis, 1, t.shape[axis] - 1), t.narrow(axis, t.shape[axis] - 1, 1)], dim=axis)
        mid = 0.5 * (t + nxt)
        stacked = torch.stack([t, mid], dim=axis + 1)
        shape = list(t.shape)
        shape[axis] *= 2
        return stacked.reshape(shape)

    return along(along(x, x.dim() - 3), x.dim() - 2)


class FPM(nn.Module):
    """Four depthwise branches (kernels 1, 3, 5, 7), each squeezed to C/4 by a 1x1 conv, concatenated."""

    kernel_sizes = (1, 3, 5, 7)

    def __init__(self, channels: int):
        super().__init__()
        if channels % 4:
            raise ParameterError(f"FPM needs channels divisible by 4, got {channels}")
        self.channels = channels
        for k in self.kernel_sizes:
            self.add_module(f"dw{k}", Conv(k, channels, channels, depthwise=True))
            self.add_module(f"pw{k}", Conv(1, channels, channels // 4))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.channels:
            raise DimensionError(f"FPM built for {self.channels} channels, got {x.shape[-1]}")
        branches = [getattr(self, f"pw{k}")(getattr(self, f"dw{k}")(x)) for k in self.kernel_sizes]
        return torch.cat(branches, dim=-1)


class Backbone(nn.Module):
    """Pyramid network producing 1/8 coarse and 1/2 fine maps.

    level 1: two stride-1 3x3 convs at C/4; level 2: stride-2 conv to C/2;
    level 3: two stride-2 convs to C, then two stride-1 convs giving the coarse map.
    The fine map fuses the 2x-upsampled 1/4 feature (projected to C/2) with level 2.
    """

    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        c = config.coarse_dim
        if c % 8:
            raise ParameterError("coarse_dim must be divisible by 8")
        self.config = config
        self.conv1a = Conv(3, 1, c // 4)
        self.conv1b = Conv(3, c // 4, c // 4)
        self.conv2 = Conv(3, c // 4, c // 2, stride=2)
        self.conv3a = Conv(3, c // 2, c, stride=2)
        self.conv3b = Conv(3, c, c, stride=2)
        self.conv4a = Conv(3, c, c)
        self.conv4b = Conv(3, c, c)
        self.lateral = Conv(1, c, c // 2)
        self.fine_out = Conv(3, c // 2, config.fine_dim)
        self.fpm = FPM(c)

    def forward(self, images: torch.Tensor) -> PyramidFeatures:
        """``images`` is ``[B?] x H x W`` with H, W multiples of 8."""
        h, w = images.shape[-2:]
        if h % 8 or w % 8:
            raise DimensionError(f"image extents must be multiples of 8, got {h}x{w}")
        x = images.unsqueeze(-1)

        def block(conv: Conv, t: torch.Tensor) -> torch.Tensor:
            return torch.relu(instance_norm(conv(t)))

        l1 = block(self.conv1b, block(self.conv1a, x))
        l2 = block(self.conv2, l1)
        l3a = block(self.conv3a, l2)
        l3b = block(self.conv3b, l3a)
        coarse = self.conv4b(block(self.conv4a, l3b))
        fused = upsample2x(self.lateral(l3a)) + l2
        fine = self.fine_out(torch.relu(instance_norm(fused)))
        return PyramidFeatures(coarse=coarse, fine=fine)


def extract_features(image, backbone: Backbone) -> PyramidFeatures:
    """Coarse and fine maps for a single image (numpy array or tensor in [0, 1])."""
    img = torch.as_tensor(np.asarray(image, dtype=np.float64)) if not torch.is_tensor(image) else image.to(DTYPE)
    if img.dim() != 2:
        raise DimensionError("extract_features expects a single-channel H x W image")
    return backbone(img)


def fpm(coarse: torch.Tensor, module: FPM) -> torch.Tensor:
    return module(coarse)
