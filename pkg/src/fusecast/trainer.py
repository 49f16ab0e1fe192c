"""Training on multi-domain mixtures and adapter-only fine-tuning."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import DataError, DomainDataset, DomainSampler, sample_batch
from .guidance import gsg_blend
from .nets import ForecastModel, state_digest
from .pipeline import (SeriesBatch, apply_normalization, channel_fold, instance_normalize, patchify,
                       timestep_embedding)
from .schedule import NoiseSchedule, forward_noise, loss_target, posterior_coefficients, posterior_mean_variance

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class BackboneDriftError(AssertionError):
    """A frozen (non-adapter) parameter changed during adapter fine-tuning."""


@dataclass
class TrainResult:
    model: ForecastModel
    losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _as_tensor(x, dtype) -> torch.Tensor:
    return x.to(dtype) if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def diffusion_loss(model: ForecastModel, sched: NoiseSchedule, observation, target, cfg: TrainConfig,
                   generator: torch.Generator | None = None, lambda_guidance: float | None = None,
                   t: torch.Tensor | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Posterior-mean MSE between the blended prediction and the true posterior mean.

    ``observation`` is (B, d, L) and ``target`` (B, d, H), both raw. ``t`` and
    ``eps`` may be fixed for reproducible probes; otherwise they are drawn from
    ``generator``.
    """
    mcfg = model.cfg
    dtype = next(model.parameters()).dtype
    obs = instance_normalize(SeriesBatch(_as_tensor(observation, dtype)))
    tgt = apply_normalization(_as_tensor(target, dtype), obs)
    y0 = patchify(channel_fold(tgt), mcfg.patch_len).tokens
    rows, P_H, _ = y0.shape
    ctx, prompt = model.condition(channel_fold(obs.values), P_H)

    if t is None:
        t = torch.randint(1, sched.T_train + 1, (rows,), generator=generator)
    if eps is None:
        eps = torch.randn(y0.shape, generator=generator, dtype=dtype)
    y_t = forward_noise(y0, t, eps, sched)
    t_emb = timestep_embedding(t, mcfg.time_dim).to(dtype)

    if cfg.cond_dropout_p > 0:
        keep = (torch.rand(rows, generator=generator) >= cfg.cond_dropout_p).to(dtype)
        ctx = {k: v * keep[:, None, None] for k, v in ctx.items()}
        prompt = prompt * keep[:, None]

    lam = mcfg.lambda_guidance if lambda_guidance is None else lambda_guidance
    if cfg.blend_in_training and lam != 1.0:
        x0_hat = gsg_blend(*model.denoise_pair(y_t, t_emb, prompt, ctx), lam)
    else:
        x0_hat = model.denoise(y_t, t_emb, prompt, ctx)

    mu_hat, _ = posterior_mean_variance(x0_hat, y_t, t, sched)
    mu = loss_target(y0, y_t, t, sched)
    if cfg.loss_weighting == "x0":
        w = torch.as_tensor(posterior_coefficients(sched)[1], dtype=dtype)[t] ** -2
        loss = ((mu_hat - mu) ** 2).mean(dim=(1, 2)).mul(w).mean()
    else:
        loss = F.mse_loss(mu_hat, mu)
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss.item()} (t range {int(t.min())}..{int(t.max())}, "
            f"obs mean {float(obs.values.mean()):.4g}, target abs max {float(tgt.abs().max()):.4g})"
        )
    return loss


def make_optimizer(model: ForecastModel, cfg: TrainConfig) -> torch.optim.Optimizer | None:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        return None
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def train_step(model: ForecastModel, optimizer, batch, sched: NoiseSchedule, cfg: TrainConfig,
               generator: torch.Generator | None = None) -> float:
    """One optimizer step on ``batch = (observation, target)``; returns the loss."""
    model.train()
    observation, target = batch
    loss = diffusion_loss(model, sched, observation, target, cfg, generator)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
        if cfg.grad_clip and params:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        optimizer.step()
    return float(loss.detach())


def _generators(seed: int):
    torch.manual_seed(seed)  # dropout masks
    ss = np.random.SeedSequence(seed)
    domain_ss, window_ss, torch_ss = ss.spawn(3)
    tg = torch.Generator().manual_seed(int(torch_ss.generate_state(1)[0]))
    return np.random.default_rng(domain_ss), np.random.default_rng(window_ss), tg


def train_loop(model: ForecastModel, sched: NoiseSchedule, cfg: TrainConfig,
               next_batch: Callable[[np.random.Generator], tuple], *, window_rng: np.random.Generator,
               generator: torch.Generator, out_dir: Path | None = None, stage: str = "pretrain",
               parent: str | None = None, on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    optimizer = make_optimizer(model, cfg)
    result = TrainResult(model)
    for it in range(1, cfg.n_iter + 1):
        loss = train_step(model, optimizer, next_batch(window_rng), sched, cfg, generator)
        result.losses.append(loss)
        if on_step:
            on_step(it, loss)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("%s iter %d loss %.6f", stage, it, loss)
        if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            path = Path(out_dir) / f"checkpoint_{it:06d}.pt"
            save_checkpoint(path, model, sched, train_config=cfg.to_dict(), parent=parent, stage=stage, iteration=it)
            result.checkpoints.append(path)
    model.eval()
    return result


def write_loss_curve(path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def pretrain(model: ForecastModel, datasets: Sequence[DomainDataset], cfg: TrainConfig, sched: NoiseSchedule,
             out_dir=None, weights: Sequence[float] | None = None) -> TrainResult:
    """All components trainable: each iteration picks a domain by weight, then a single-domain batch."""
    if not datasets:
        raise DataError("pretraining needs at least one dataset")
    if weights is None:
        weights = [cfg.domain_weights.get(ds.name, ds.weight) for ds in datasets]
    model.set_trainable()
    domain_rng, window_rng, generator = _generators(cfg.seed)
    sampler = DomainSampler(weights, domain_rng)

    def next_batch(rng):
        ds = datasets[sampler.draw()]
        return sample_batch(ds, "train", cfg.lookback, cfg.horizon, cfg.batch_size, rng)

    out = Path(out_dir) if out_dir is not None else None
    result = train_loop(model, sched, cfg, next_batch, window_rng=window_rng, generator=generator,
                        out_dir=out, stage="pretrain")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_loss_curve(out / "loss.csv", result.losses)
        final = out / "checkpoint_final.pt"
        save_checkpoint(final, model, sched, train_config=cfg.to_dict(), stage="pretrain", iteration=cfg.n_iter)
        result.checkpoints.append(final)
    return result


def backbone_snapshot(model: ForecastModel) -> dict[str, torch.Tensor]:
    adapters = set(model.adapter_parameter_names())
    return {n: p.detach().clone() for n, p in model.named_parameters() if n not in adapters}


def assert_backbone_unchanged(model: ForecastModel, snapshot: dict[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    drifted = [n for n, ref in snapshot.items() if not torch.equal(params[n].detach(), ref)]
    if drifted:
        raise BackboneDriftError(f"{len(drifted)} backbone tensors changed during fine-tuning, e.g. {drifted[:3]}")


def finetune_adapters(model: ForecastModel, dataset: DomainDataset, cfg: TrainConfig, sched: NoiseSchedule,
                      out_dir=None, parent: str | None = None) -> TrainResult:
    """Train only the adapter stack on a target domain; the backbone must come out bit-identical."""
    parent = parent or state_digest(model)
    snapshot = backbone_snapshot(model)
    model.set_trainable(adapters_only=True)
    n_train = model.parameter_count(trainable_only=True)
    log.info("fine-tuning %d of %d parameters (%.2f%%)", n_train, model.parameter_count(),
             100.0 * n_train / model.parameter_count())
    _, window_rng, generator = _generators(cfg.seed)

    def next_batch(rng):
        return sample_batch(dataset, "train", cfg.lookback, cfg.horizon, cfg.batch_size, rng)

    out = Path(out_dir) if out_dir is not None else None
    result = train_loop(model, sched, cfg, next_batch, window_rng=window_rng, generator=generator,
                        out_dir=out, stage="finetune", parent=parent)
    assert_backbone_unchanged(model, snapshot)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_loss_curve(out / "loss.csv", result.losses)
        final = out / "checkpoint_final.pt"
        save_checkpoint(final, model, sched, train_config=cfg.to_dict(), parent=parent, stage="finetune",
                        iteration=cfg.n_iter)
        result.checkpoints.append(final)
    return result
