"""Sinusoidal (optionally resolution-normalized) positional encoding and the
alternating self/cross linear-attention stack."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContractError, DimensionError, ParameterError
from .tensor import DTYPE


@dataclass(frozen=True)
class PositionalEncodingSpec:
    d: int
    train_w: float = 1.0
    train_h: float = 1.0
    test_w: float = 1.0
    test_h: float = 1.0

    def __post_init__(self):
        if self.d % 4:
            raise ParameterError(f"encoding dimension must be divisible by 4, got {self.d}")
        if min(self.train_w, self.train_h, self.test_w, self.test_h) <= 0:
            raise ParameterError("train/test extents must be positive")

    @property
    def mu(self) -> float:
        return self.train_w / self.test_w

    @property
    def nu(self) -> float:
        return self.train_h / self.test_h


def _frequencies(d: int) -> torch.Tensor:
    k = torch.arange(d // 4, dtype=DTYPE)
    return 1.0 / (10000.0 ** (2.0 * k / d))


def positional_encoding(x: float, y: float, d: int) -> torch.Tensor:
    if d % 4:
        raise ParameterError(f"encoding dimension must be divisible by 4, got {d}")
    w = _frequencies(d)
    x = torch.as_tensor(x, dtype=DTYPE)
    y = torch.as_tensor(y, dtype=DTYPE)
    return torch.stack([torch.sin(w * x), torch.cos(w * x), torch.sin(w * y), torch.cos(w * y)], dim=-1).reshape(d)


def encoding_field(h: int, w: int, d: int, mu: float = 1.0, nu: float = 1.0) -> torch.Tensor:
    """``h x w x d`` encoding of grid positions (x = column * mu, y = row * nu)."""
    if d % 4:
        raise ParameterError(f"encoding dimension must be divisible by 4, got {d}")
    freq = _frequencies(d)
    xs = torch.arange(w, dtype=DTYPE) * mu
    ys = torch.arange(h, dtype=DTYPE) * nu
    ax = xs[None, :, None] * freq  # 1 x w x d/4
    ay = ys[:, None, None] * freq  # h x 1 x d/4
    ax, ay = ax.expand(h, w, -1), ay.expand(h, w, -1)
    return torch.stack([torch.sin(ax), torch.cos(ax), torch.sin(ay), torch.cos(ay)], dim=-1).reshape(h, w, d)


def npe(features: torch.Tensor, spec: PositionalEncodingSpec) -> torch.Tensor:
    """Add the encoding evaluated at rescaled positions to a ``[B?] x h x w x C`` map."""
    if features.shape[-1] != spec.d:
        raise DimensionError(f"feature channels {features.shape[-1]} != encoding dimension {spec.d}")
    h, w = features.shape[-3], features.shape[-2]
    return features + encoding_field(h, w, spec.d, spec.mu, spec.nu)


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Row-normalized kernel attention with feature map elu(x) + 1.

    Shapes ``[..., N, d]``, ``[..., M, d]``, ``[..., M, dv]``. The key/value product is
    formed first so the cost is linear in N and M.
    """
    if k.shape[-2] == 0:
        raise ContractError("linear attention needs at least one key")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError("query/key widths or key/value counts differ")
    phi_q = torch.nn.functional.elu(q) + 1.0
    phi_k = torch.nn.functional.elu(k) + 1.0
    kv = phi_k.transpose(-2, -1) @ v
    z = phi_q @ phi_k.sum(dim=-2).unsqueeze(-1)
    # clamp rather than add eps so the M=1 case returns v exactly
    return (phi_q @ kv) / z.clamp_min(1e-300)


class Linear(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(cin, cout, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.shift = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=-1, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps) * self.scale + self.shift


class AttentionLayer(nn.Module):
    """Multi-head linear attention message, then a 2C-wide feed-forward on [x || message], added to x."""

    def __init__(self, dim: int, heads: int = 8):
        super().__init__()
        if dim % heads:
            raise ParameterError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim)
        self.k_proj = Linear(dim, dim)
        self.v_proj = Linear(dim, dim)
        self.merge = Linear(dim, dim)
        self.norm1 = LayerNorm(dim)
        self.ff1 = Linear(2 * dim, 2 * dim)
        self.ff2 = Linear(2 * dim, dim)
        self.norm2 = LayerNorm(dim)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        *lead, n, c = t.shape
        return t.reshape(*lead, n, self.heads, c // self.heads).transpose(-3, -2)

    def forward(self, x: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        q, k, v = self._split(self.q_proj(x)), self._split(self.k_proj(source)), self._split(self.v_proj(source))
        msg = linear_attention(q, k, v).transpose(-3, -2)
        msg = msg.reshape(*msg.shape[:-2], -1)
        msg = self.norm1(self.merge(msg))
        msg = self.norm2(self.ff2(torch.relu(self.ff1(torch.cat([x, msg], dim=-1)))))
        return x + msg


class FEFormer(nn.Module):
    """``layers`` rounds of (self, self) then simultaneous (cross, cross) attention.

    Both images go through the same weights, so swapping the inputs swaps the outputs.
    """

    def __init__(self, dim: int, layers: int, heads: int = 8):
        super().__init__()
        if layers < 1:
            raise ParameterError(f"layer count must be >= 1, got {layers}")
        self.blocks = nn.ModuleList()
        for _ in range(layers):
            self.blocks.append(AttentionLayer(dim, heads))  # self
            self.blocks.append(AttentionLayer(dim, heads))  # cross

    @property
    def depth(self) -> int:
        return len(self.blocks) // 2

    def forward(self, fa: torch.Tensor, fb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if fa.shape[-1] != fb.shape[-1]:
            raise DimensionError("feature widths differ")
        for i in range(0, len(self.blocks), 2):
            sa, cr = self.blocks[i], self.blocks[i + 1]
            fa, fb = sa(fa, fa), sa(fb, fb)
            fa, fb = cr(fa, fb), cr(fb, fa)
        return fa, fb


def feformer(fa: torch.Tensor, fb: torch.Tensor, module: FEFormer) -> tuple[torch.Tensor, torch.Tensor]:
    return module(fa, fb)

