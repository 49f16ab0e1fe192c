"""Reverse-process inference: DDIM forecasting with context reuse, and imputation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import GuidanceConfig
from .guidance import gsg_blend
from .pipeline import (SeriesBatch, channel_fold, channel_unfold, denormalize, instance_normalize, patchify,
                       unpatchify, timestep_embedding, STD_FLOOR)
from .schedule import NoiseSchedule, forward_noise, make_linear_schedule


@dataclass
class ForecastResult:
    prediction: torch.Tensor  # (B, d, H), denormalized; equals ensemble[0]
    ensemble: torch.Tensor | None = None  # (S, B, d, H)
    metadata: dict = field(default_factory=dict)


def inference_timesteps(T_train: int, T_infer: int) -> list[tuple[int, int]]:
    """Uniformly strided (t, t_prev) pairs from T_train down to 0."""
    if not 1 <= T_infer <= T_train:
        raise ValueError(f"need 1 <= T_infer <= T_train, got T_infer={T_infer}, T_train={T_train}")
    ts = [T_train - (i * T_train) // T_infer for i in range(T_infer + 1)]
    return list(zip(ts[:-1], ts[1:]))


def ddim_step(x_t: torch.Tensor, x0_hat: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule,
              eta: float = 0.0, generator: torch.Generator | None = None) -> torch.Tensor:
    """Move from step ``t`` to ``t_prev`` given a clean-sample prediction."""
    if not (sched.T_train >= t > t_prev >= 0):
        raise ValueError(f"need T_train >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    if t_prev == 0 and eta == 0.0:
        return x0_hat
    eps_hat = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    var = eta ** 2 * (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - var, 0.0)) * eps_hat
    if var > 0:
        out = out + math.sqrt(var) * torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return out


def _guided_x0(model, y, t: int, prompt, ctx, lam: float, prune: bool = True) -> torch.Tensor:
    rows = y.shape[0]
    t_emb = timestep_embedding(torch.full((rows,), t, dtype=torch.long), model.cfg.time_dim).to(y.dtype)
    if prune and lam == 1.0:
        return model.denoise(y, t_emb, prompt, ctx)
    return gsg_blend(*model.denoise_pair(y, t_emb, prompt, ctx), lam)


def _repeat_rows(x: torch.Tensor, times: int) -> torch.Tensor:
    return x.repeat((times,) + (1,) * (x.dim() - 1))


def _model_settings(model):
    dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else torch.get_default_dtype()
    return model.cfg, dtype


def _default_schedule(cfg) -> NoiseSchedule:
    return make_linear_schedule(cfg.T_train, cfg.beta_start, cfg.beta_end)


def forecast(model, observation, H: int, config: GuidanceConfig | None = None, T_infer: int | None = None,
             seed: int = 0, n_samples: int = 1, sched: NoiseSchedule | None = None, eta: float = 0.0,
             prune_uncond: bool = True, chunk_size: int = 64, checkpoint_id: str | None = None) -> ForecastResult:
    """Generate ``n_samples`` forecasts of length ``H`` for raw observations (B, d, L).

    The condition net and adapters run once; every DDIM step and every
    ensemble member reuses that context.
    """
    cfg, dtype = _model_settings(model)
    sched = sched or _default_schedule(cfg)
    lam = cfg.lambda_guidance if config is None else float(config.lambda_guidance)
    T_infer = T_infer or cfg.T_infer
    P = cfg.patch_len
    if H % P:
        raise ValueError(f"horizon {H} is not divisible by patch length {P}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    values = observation.values if isinstance(observation, SeriesBatch) else torch.as_tensor(observation)
    values = values.to(dtype)
    B, d, L = values.shape
    if L % P:
        raise ValueError(f"lookback {L} is not divisible by patch length {P}; "
                         f"nearest valid truncation is {L - L % P}")
    P_H = H // P
    if hasattr(model, "eval"):
        model.eval()
    stats = instance_normalize(SeriesBatch(values))
    gen = torch.Generator().manual_seed(int(seed))
    steps = inference_timesteps(cfg.T_train, T_infer)
    with torch.no_grad():
        ctx, prompt = model.condition(channel_fold(stats.values), P_H)
        rows = B * d
        noise = torch.randn((n_samples, rows, P_H, P), generator=gen, dtype=dtype)
        per_chunk = max(1, chunk_size // max(rows, 1))
        outs = []
        for s0 in range(0, n_samples, per_chunk):
            k = min(per_chunk, n_samples - s0)
            y = noise[s0:s0 + k].reshape(k * rows, P_H, P)
            c = {name: _repeat_rows(v, k) for name, v in ctx.items()}
            p = _repeat_rows(prompt, k)
            for t, t_prev in steps:
                x0 = _guided_x0(model, y, t, p, c, lam, prune_uncond)
                y = ddim_step(y, x0, t, t_prev, sched, eta, gen)
            outs.append(y.reshape(k, rows, P_H, P))
        tokens = torch.cat(outs)
    series = unpatchify(tokens.reshape(n_samples * rows, P_H, P)).reshape(n_samples, B, d, H)
    ensemble = denormalize(series, stats)
    meta = {"lambda_guidance": lam, "T_infer": T_infer, "seed": int(seed), "n_samples": n_samples,
            "eta": eta, "horizon": H, "lookback": L, "checkpoint": checkpoint_id}
    return ForecastResult(prediction=ensemble[0], ensemble=ensemble if n_samples > 1 else None, metadata=meta)


def _interpolate_observed(x: np.ndarray, observed: np.ndarray) -> np.ndarray:
    out = x.copy()
    idx = np.arange(x.shape[-1])
    for r in range(x.shape[0]):
        o = observed[r]
        out[r] = np.interp(idx, idx[o], x[r, o])
    return out


def impute(model, series, mask, config: GuidanceConfig | None = None, T_infer: int | None = None,
           seed: int = 0, sched: NoiseSchedule | None = None, start_step: int | None = None,
           eta: float = 0.0) -> SeriesBatch:
    """Fill positions where ``mask`` is True; observed entries come back unchanged.

    The condition net sees the window with gaps linearly bridged from the
    observed points; after every DDIM step the observed positions are reset
    to their ground truth noised to the new step. ``start_step`` warm-starts
    the reverse process from the bridged series noised to that level instead
    of pure noise; ``eta`` > 0 makes the steps stochastic.
    """
    cfg, dtype = _model_settings(model)
    sched = sched or _default_schedule(cfg)
    # the context describes the window as a past, so extrapolating away from the
    # unconditional branch hurts here; default to the plain conditional prediction
    lam = 1.0 if config is None else float(config.lambda_guidance)
    T_infer = T_infer or cfg.T_infer
    values = series.values if isinstance(series, SeriesBatch) else torch.as_tensor(series)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != values.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} != series shape {tuple(values.shape)}")
    observed = ~mask
    if not observed.any(dim=-1).all():
        raise ValueError("every channel needs at least one observed point")
    if not mask.any():
        return SeriesBatch(values.clone())
    B, d, n = values.shape
    P = cfg.patch_len
    if n % P:
        raise ValueError(f"series length {n} is not divisible by patch length {P}")

    x = values.to(torch.float64)
    w = observed.to(torch.float64)
    cnt = w.sum(-1, keepdim=True)
    mean = (x * w).sum(-1, keepdim=True) / cnt
    std = (((x - mean) ** 2 * w).sum(-1, keepdim=True) / cnt).sqrt().clamp_min(STD_FLOOR)
    xn = torch.where(observed, (x - mean) / std, torch.zeros_like(x))
    folded = channel_fold(xn).numpy()
    obs_f = channel_fold(observed).numpy()
    bridged = torch.as_tensor(_interpolate_observed(folded, obs_f), dtype=dtype)

    truth = patchify(torch.as_tensor(folded, dtype=dtype), P).tokens
    keep = patchify(torch.as_tensor(obs_f), P).tokens
    rows, P_H = truth.shape[0], n // P
    gen = torch.Generator().manual_seed(int(seed))
    start = cfg.T_train if start_step is None else int(start_step)
    steps = inference_timesteps(start, min(T_infer, start)) if start < cfg.T_train else \
        inference_timesteps(cfg.T_train, T_infer)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        ctx, prompt = model.condition(bridged, P_H)
        eps0 = torch.randn(truth.shape, generator=gen, dtype=dtype)
        if start_step is None:
            y = eps0
        else:
            # warm start: the bridged series noised to the starting level
            y = forward_noise(patchify(bridged, P).tokens, start, eps0, sched)
        y = torch.where(keep, forward_noise(truth, steps[0][0], torch.randn(truth.shape, generator=gen, dtype=dtype), sched), y)
        for t, t_prev in steps:
            x0 = _guided_x0(model, y, t, prompt, ctx, lam)
            y = ddim_step(y, x0, t, t_prev, sched, eta, gen)
            if t_prev > 0:
                eps = torch.randn(truth.shape, generator=gen, dtype=dtype)
                y = torch.where(keep, forward_noise(truth, t_prev, eps, sched), y)
    filled = channel_unfold(unpatchify(y).to(torch.float64), B, d) * std + mean
    out = torch.where(mask, filled.to(values.dtype), values)
    return SeriesBatch(out)
