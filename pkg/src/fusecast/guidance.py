"""Blending of conditional and unconditional denoiser outputs."""

from __future__ import annotations

import torch

from .config import ModelConfig
from .nets import READER_BLOCKS, SCALES, TOKEN_MULT


def gsg_blend(cond_out: torch.Tensor, uncond_out: torch.Tensor, lambda_guidance: float) -> torch.Tensor:
    """λ·cond + (1-λ)·uncond, with the endpoints returned exactly."""
    if cond_out.shape != uncond_out.shape:
        raise ValueError(f"shape mismatch: {tuple(cond_out.shape)} vs {tuple(uncond_out.shape)}")
    lam = float(lambda_guidance)
    if lam == 1.0:
        return cond_out
    if lam == 0.0:
        return uncond_out
    # difference form: identical branches return the input bit-exactly for any λ
    return uncond_out + lam * (cond_out - uncond_out)


def unconditional_context(rows: int, P_H: int, cfg: ModelConfig, dtype=torch.float32):
    """Zero aligned context for every reader block and a zero prompt vector."""
    widths = dict(zip(SCALES, cfg.context_widths))
    ctx = {name: torch.zeros(rows, TOKEN_MULT[s] * P_H, widths[s], dtype=dtype) for name, s in READER_BLOCKS}
    return ctx, torch.zeros(rows, cfg.prompt_dim, dtype=dtype)
