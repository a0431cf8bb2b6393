"""Building blocks: frame splicing, TDNN / factorized TDNN, residual stack, statistics pooling."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

POOL_EPS = 1e-10

_relu_log: list | None = None


def relu(x: torch.Tensor) -> torch.Tensor:
    if _relu_log is not None:
        _relu_log.append(x.detach() > 0)
    return F.relu(x)


class record_relu_signs:
    """Context manager collecting the sign pattern of every ReLU input, in call order."""

    def __enter__(self):
        global _relu_log
        self.signs = []
        _relu_log = self.signs
        return self.signs

    def __exit__(self, *exc):
        global _relu_log
        _relu_log = None
        return False


def splice(x: torch.Tensor, offsets: Sequence[int]) -> torch.Tensor:
    """Concatenate frames t+o for o in offsets, clamping indices to [0, T-1].

    x: (B, T, D) -> (B, T, len(offsets) * D). Output length equals input length.
    """
    offsets = tuple(offsets)
    if offsets == (0,):
        return x
    T = x.shape[1]
    if T == 0:
        return x.new_zeros(x.shape[0], 0, x.shape[2] * len(offsets))
    t = torch.arange(T, device=x.device)
    idx = (t[:, None] + torch.tensor(offsets, device=x.device)[None, :]).clamp(0, T - 1)
    out = x[:, idx, :]  # (B, T, K, D)
    return out.reshape(x.shape[0], T, len(offsets) * x.shape[2])


def stats_pool(x: torch.Tensor, eps: float = POOL_EPS) -> torch.Tensor:
    """(B, T, D) -> (B, 2D): per-dimension mean and population standard deviation."""
    if x.shape[1] == 0:
        raise ValueError("statistics pooling needs at least one frame")
    mean = x.mean(dim=1)
    var = (x * x).mean(dim=1) - mean * mean
    std = torch.sqrt(torch.clamp(var, min=eps))
    return torch.cat([mean, std], dim=1)


class TdnnLayer(nn.Module):
    """Affine transform of spliced frames. Dense layers are the ``(0,)`` context case."""

    def __init__(self, in_dim: int, out_dim: int, offsets: Sequence[int] = (0,)):
        super().__init__()
        self.offsets = tuple(offsets)
        self.linear = nn.Linear(in_dim * len(self.offsets), out_dim)

    def forward(self, x):
        return self.linear(splice(x, self.offsets))


class FtdnnLayer(nn.Module):
    """Chain of low-rank factors, each applied to its own spliced context.

    All factors but the last are bias-free and map to `inner`; the last maps to
    `out_dim` with a bias. ``factors[0]`` is the semi-orthogonally constrained one.
    """

    def __init__(self, in_dim: int, out_dim: int, inner: int, contexts: Sequence[Sequence[int]]):
        super().__init__()
        self.contexts = tuple(tuple(c) for c in contexts)
        dims = [in_dim] + [inner] * (len(self.contexts) - 1) + [out_dim]
        self.factors = nn.ModuleList(
            nn.Linear(dims[i] * len(ctx), dims[i + 1], bias=(i == len(self.contexts) - 1))
            for i, ctx in enumerate(self.contexts)
        )

    def forward(self, x):
        for ctx, lin in zip(self.contexts, self.factors):
            x = lin(splice(x, ctx))
        return x


def _pad_time_freq(x: torch.Tensor) -> torch.Tensor:
    # time edges replicate (same clamping convention as splice); frequency edges are zero
    x = F.pad(x, (0, 0, 1, 1), mode="replicate")
    return F.pad(x, (1, 1, 0, 0))


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with an identity shortcut.

    When channel counts differ the shortcut is zero-padded along channels;
    frequency downsampling subsamples the shortcut with the same stride.
    """

    def __init__(self, in_ch: int, out_ch: int, freq_stride: int = 1):
        super().__init__()
        self.in_ch, self.out_ch, self.freq_stride = in_ch, out_ch, freq_stride
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=(1, freq_stride))
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3)

    def shortcut(self, x):
        if self.freq_stride > 1:
            x = x[:, :, :, :: self.freq_stride]
        if self.out_ch > self.in_ch:
            x = F.pad(x, (0, 0, 0, 0, 0, self.out_ch - self.in_ch))
        return x

    def forward(self, x):
        h = relu(self.conv1(_pad_time_freq(x)))
        h = self.conv2(_pad_time_freq(h))
        return relu(h + self.shortcut(x))


class ResNetStack(nn.Module):
    """ResNet frame encoder: features as a one-channel (time x freq) image.

    Time resolution is preserved; frequency is halved at the start of every
    stage after the first and averaged out at the end, so the per-frame output
    has ``size`` (= last-stage channels) dimensions.
    """

    def __init__(self, size: int, stages: Sequence[int] = (3, 4, 6, 3)):
        super().__init__()
        n = len(stages)
        base = size // (2 ** (n - 1))
        chans = [base * 2**i for i in range(n)]
        self.stem = nn.Conv2d(1, chans[0], 3)
        blocks = []
        prev = chans[0]
        for i, (ch, count) in enumerate(zip(chans, stages)):
            for j in range(count):
                blocks.append(ResidualBlock(prev, ch, freq_stride=2 if (i > 0 and j == 0) else 1))
                prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.out_dim = prev

    def forward(self, x):
        h = relu(self.stem(_pad_time_freq(x.unsqueeze(1))))
        for block in self.blocks:
            h = block(h)
        return h.mean(dim=3).transpose(1, 2)  # (B, T, C)


def init_params(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic init: N(0, 2/fan_in) weights (ReLU gain), zero biases."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * math.sqrt(2.0 / fan_in))
