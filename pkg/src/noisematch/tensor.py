"""Float64 tensor primitives on top of torch autograd.

Everything in the package computes in float64 on CPU. The layout for image-like
tensors is channels-last (``H x W x C``, optionally with a leading batch axis),
and convolution kernels are stored ``kh x kw x Cin x Cout``.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError, LoadError, ParameterError

DTYPE = torch.float64

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = (1 << 64) - 1


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(np.asarray(data, dtype=np.float64)).clone().requires_grad_(requires_grad)


# --------------------------------------------------------------------------
# SplitMix64
# --------------------------------------------------------------------------

def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class Rng:
    """SplitMix64 stream.

    The ``i``-th output of a stream started at ``state`` is ``mix(state + i*gamma)``,
    which makes block draws vectorizable and platform independent. A non-empty
    ``purpose`` label is hashed into the seed so that differently named streams
    built from one seed never overlap in practice.
    """

    def __init__(self, seed: int, purpose: str = ""):
        self.purpose = purpose
        seed = int(seed) & _MASK64
        if purpose:
            seed = int(_mix64(np.array([seed ^ _fnv1a64(purpose)], dtype=np.uint64))[0])
        self._origin = seed
        self.state = seed

    def child(self, label: str) -> "Rng":
        """Independent stream derived from this stream's origin, not its position."""
        name = f"{self.purpose}/{label}" if self.purpose else label
        return Rng(self._origin, name)

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ParameterError("draw count must be non-negative")
        steps = np.arange(1, n + 1, dtype=np.uint64) * _GAMMA
        out = _mix64(np.uint64(self.state) + steps)
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller, cosine branch only: two uniforms per sample.
        u = self.uniform(2 * n)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:n]))
        return r * np.cos(2.0 * np.pi * u[n:])

    def integers(self, n: int, high: int) -> np.ndarray:
        if high < 1:
            raise ParameterError("integer range must be non-empty")
        return (self.next_u64(n) % np.uint64(high)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        return receptive * shape[2], receptive * shape[3]
    size = int(np.prod(shape))
    return size, size


def xavier_uniform(shape: tuple[int, ...], rng: Rng) -> torch.Tensor:
    fan_in, fan_out = _fans(tuple(shape))
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    values = rng.uniform(int(np.prod(shape)), -bound, bound)
    return torch.from_numpy(values.reshape(shape))


def init_parameters(module: torch.nn.Module, seed: int, purpose: str) -> None:
    """Draw every matrix/kernel parameter in declaration order from one named stream.

    Vectors (biases, norm offsets) are constants: zero, except norm scales which are one.
    """
    rng = Rng(seed, purpose)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                p.copy_(xavier_uniform(tuple(p.shape), rng))
            elif name.endswith("scale"):
                p.fill_(1.0)
            else:
                p.zero_()


# --------------------------------------------------------------------------
# Differentiable primitives
# --------------------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise DimensionError(f"axis {axis} invalid for rank {x.dim()}")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def conv2d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: str | int = "same",
    depthwise: bool = False,
) -> torch.Tensor:
    """Cross-correlation of a channels-last map ``[B?] x H x W x Cin``.

    Regular kernels are ``kh x kw x Cin x Cout``; depthwise kernels are
    ``kh x kw x 1 x Cin`` (one filter per input channel).
    """
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if kernel.dim() != 4:
        raise DimensionError("kernel must be kh x kw x Cin x Cout")
    kh, kw, kin, kout = kernel.shape
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise DimensionError("input must be H x W x C or B x H x W x C")
    cin = x.shape[-1]
    if depthwise:
        if kin != 1 or kout != cin:
            raise DimensionError(f"depthwise kernel must be kh x kw x 1 x {cin}")
        groups = cin
    else:
        if kin != cin:
            raise DimensionError(f"kernel expects {kin} input channels, got {cin}")
        groups = 1
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ParameterError("'same' padding needs odd kernel extents")
        pad = (kh // 2, kw // 2)
    elif padding == "valid":
        pad = (0, 0)
    else:
        pad = (int(padding), int(padding))
    weight = kernel.permute(3, 2, 0, 1)
    out = F.conv2d(x.permute(0, 3, 1, 2), weight, bias, stride=stride, padding=pad, groups=groups)
    out = out.permute(0, 2, 3, 1)
    return out[0] if squeeze else out


def elu(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def self_adjoint_eigen(a: torch.Tensor, tol: float = 1e-9) -> tuple[torch.Tensor, torch.Tensor]:
    """Eigenvalues in ascending order and orthonormal eigenvectors (as columns)."""
    if a.dim() != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError("eigendecomposition needs a square matrix")
    if (a - a.T).abs().max().item() > tol:
        raise ContractError("matrix is not symmetric")
    return torch.linalg.eigh(a)


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Max elementwise relative error between autograd and central differences.

    The relative error of element ``i`` is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``.
    """
    x = x.detach().clone().to(DTYPE).requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    (analytic,) = torch.autograd.grad(y, x)
    flat = x.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = f(flat.view_as(x)).item()
            flat[i] = orig - eps
            lo = f(flat.view_as(x)).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * eps)
    a = analytic.reshape(-1)
    denom = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.full_like(a, floor))
    return float(((a - numeric).abs() / denom).max())


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


def adam_step(params: list[torch.Tensor], grads: list[torch.Tensor | None], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update; a ``None`` gradient counts as zero."""
    if len(params) != len(grads):
        raise DimensionError("one gradient per parameter expected")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise DimensionError("gradient shape differs from parameter shape")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# --------------------------------------------------------------------------
# NMW1 weight files
# --------------------------------------------------------------------------

_MAGIC = b"NMW1"


def save_weights(path: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    chunks = [_MAGIC, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(DTYPE).numpy()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | Path) -> "OrderedDict[str, torch.Tensor]":
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise LoadError(f"{path}: not an NMW1 weight file")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise LoadError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        if pos + 8 * n > len(blob):
            raise LoadError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        out[name] = torch.from_numpy(arr.copy())
    return out


def state_of(modules: Iterable[tuple[str, torch.nn.Module]]) -> "OrderedDict[str, torch.Tensor]":
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for prefix, module in modules:
        for name, p in module.named_parameters():
            out[f"{prefix}.{name}"] = p.detach().clone()
    return out


def load_into(module: torch.nn.Module, prefix: str, tensors: Mapping[str, torch.Tensor]) -> None:
    """Copy ``prefix.*`` tensors into ``module``; every parameter must be present."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise LoadError(f"weight file is missing tensor {key!r}")
            src = tensors[key]
            if tuple(src.shape) != tuple(p.shape):
                raise LoadError(f"{key}: shape {tuple(src.shape)} != expected {tuple(p.shape)}")
            p.copy_(src)
