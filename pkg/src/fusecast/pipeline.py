"""Deterministic plumbing between raw multivariate windows and model tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

STD_FLOOR = 1e-5


@dataclass
class SeriesBatch:
    """A batch of windows shaped (B, d, length) plus optional per-(b, c) stats."""

    values: torch.Tensor
    mean: torch.Tensor | None = None
    std: torch.Tensor | None = None

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ValueError(f"expected (B, d, length), got shape {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("series values must be finite")

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def channel_count(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]


@dataclass
class PatchGrid:
    tokens: torch.Tensor  # (B*d, count, patch_len)
    patch_len: int

    @property
    def token_count(self) -> int:
        return self.tokens.shape[1]


@dataclass
class DecompositionPair:
    trend: torch.Tensor
    seasonal: torch.Tensor


def channel_fold(values: torch.Tensor) -> torch.Tensor:
    """(B, d, n) -> (B*d, n), batch-major then channel."""
    if isinstance(values, SeriesBatch):
        values = values.values
    b, d, n = values.shape
    return values.reshape(b * d, n)


def channel_unfold(folded: torch.Tensor, batch_size: int, channels: int) -> torch.Tensor:
    if folded.dim() != 2 or folded.shape[0] != batch_size * channels:
        raise ValueError(
            f"cannot unfold {tuple(folded.shape)} into batch_size={batch_size}, channels={channels}"
        )
    return folded.reshape(batch_size, channels, folded.shape[1])


def patchify(folded: torch.Tensor, patch_len: int) -> PatchGrid:
    """Split each row into non-overlapping, unpadded patches."""
    rows, n = folded.shape
    if patch_len < 1 or n % patch_len:
        valid = (n // patch_len) * patch_len if patch_len >= 1 else 0
        raise ValueError(
            f"length {n} is not divisible by patch length {patch_len}; "
            f"nearest valid truncation is {valid}"
        )
    return PatchGrid(folded.reshape(rows, n // patch_len, patch_len), patch_len)


def unpatchify(grid) -> torch.Tensor:
    tokens = grid.tokens if isinstance(grid, PatchGrid) else grid
    rows, count, plen = tokens.shape
    return tokens.reshape(rows, count * plen)


def decompose_trend_seasonal(folded: torch.Tensor, window: int = 25) -> DecompositionPair:
    """Centered moving-average trend with edge replication; seasonal is the remainder."""
    n = folded.shape[-1]
    if window < 1 or window % 2 == 0:
        raise ValueError(f"moving-average window must be a positive odd integer, got {window}")
    if window > n:
        raise ValueError(f"window {window} exceeds series length {n}")
    half = window // 2
    x = folded.unsqueeze(1)
    if half:
        x = F.pad(x, (half, half), mode="replicate")
    trend = F.avg_pool1d(x, kernel_size=window, stride=1).squeeze(1)
    return DecompositionPair(trend=trend, seasonal=folded - trend)


def decompose(folded: torch.Tensor, window: int = 25) -> DecompositionPair:
    """Like :func:`decompose_trend_seasonal` but clamps the window to the series length."""
    n = folded.shape[-1]
    if window > n:
        window = n if n % 2 else n - 1
    return decompose_trend_seasonal(folded, window)


def instance_normalize(batch: SeriesBatch) -> SeriesBatch:
    """Per-(batch, channel) z-score with population std floored at ``STD_FLOOR``."""
    x = batch.values
    mean = x.mean(dim=-1, keepdim=True)
    std = x.std(dim=-1, unbiased=False, keepdim=True).clamp_min(STD_FLOOR)
    return SeriesBatch((x - mean) / std, mean=mean, std=std)


def apply_normalization(values: torch.Tensor, stats: SeriesBatch) -> torch.Tensor:
    """Normalize another window (e.g. the target) with recorded stats."""
    return (values - stats.mean) / stats.std


def denormalize(values, stats: SeriesBatch) -> torch.Tensor:
    if isinstance(values, SeriesBatch):
        values = values.values
    if stats.mean is None or stats.std is None:
        raise ValueError("batch carries no normalization stats")
    return values * stats.std + stats.mean


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding: [sin(t/ω_k), cos(t/ω_k)] with ω_k geometric over [1, 1e4]."""
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t = torch.as_tensor(t)
    if (t < 0).any():
        raise ValueError("timesteps must be non-negative")
    half = dim // 2
    if half == 1:
        omegas = torch.ones(1, dtype=torch.float64)
    else:
        omegas = torch.exp(torch.arange(half, dtype=torch.float64) * (math.log(1e4) / (half - 1)))
    angles = t.to(torch.float64).reshape(-1, 1) / omegas
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1).to(torch.get_default_dtype())


class TrendPromptEmbedding(nn.Module):
    """Linear map from the lookback trend to the prompt vector.

    The trend is first resampled (linearly, endpoints kept) to ``points``
    samples so the parameter count does not depend on the lookback length.
    """

    def __init__(self, prompt_dim: int, points: int = 32):
        super().__init__()
        self.points = points
        self.proj = nn.Linear(points, prompt_dim)

    def forward(self, trend: torch.Tensor) -> torch.Tensor:
        if trend.shape[-1] != self.points:
            trend = F.interpolate(trend.unsqueeze(1), size=self.points, mode="linear",
                                  align_corners=True).squeeze(1)
        return self.proj(trend)


def trend_prompt_embedding(trend: torch.Tensor, prompt_dim: int, params: TrendPromptEmbedding) -> torch.Tensor:
    out = params(trend)
    if out.shape[-1] != prompt_dim:
        raise ValueError(f"embedder produces width {out.shape[-1]}, expected {prompt_dim}")
    return out
