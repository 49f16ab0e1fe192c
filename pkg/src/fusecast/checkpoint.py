"""Single-file checkpoints: named tensors, configs, schedule metadata, provenance."""

from __future__ import annotations

from pathlib import Path

import torch

from .config import ModelConfig
from .nets import ForecastModel, state_digest
from .schedule import NoiseSchedule, make_linear_schedule

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ForecastModel, sched: NoiseSchedule | None = None, *,
                    train_config: dict | None = None, parent: str | None = None,
                    stage: str = "pretrain", iteration: int = 0) -> str:
    """Write ``model`` to ``path`` and return its state digest."""
    cfg = model.cfg
    sched = sched or make_linear_schedule(cfg.T_train, cfg.beta_start, cfg.beta_end)
    digest = state_digest(model)
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": cfg.to_dict(),
        "schedule": sched.to_dict(),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "trainable": model.trainable_flags(),
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "provenance": {"digest": digest, "parent": parent, "stage": stage, "iteration": iteration},
        "train_config": train_config or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return digest


def load_checkpoint(path) -> tuple[ForecastModel, NoiseSchedule, dict]:
    """Rebuild the model; every expected tensor must be present with its shape, extras rejected."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    sched = NoiseSchedule.from_dict(payload["schedule"])
    if sched.T_train != cfg.T_train:
        raise CheckpointError("schedule length disagrees with model config")
    dtype = getattr(torch, payload.get("dtype", "float32"))
    model = ForecastModel(cfg).to(dtype)
    expected = model.state_dict()
    state = payload["state"]
    missing = sorted(set(expected) - set(state))
    extra = sorted(set(state) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors mismatch: missing={missing[:5]} extra={extra[:5]}")
    for name, ref in expected.items():
        if tuple(state[name].shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {name}: {tuple(state[name].shape)} vs {tuple(ref.shape)}")
    model.load_state_dict(state, strict=True)
    for name, p in model.named_parameters():
        p.requires_grad_(bool(payload["trainable"].get(name, True)))
    meta = {"provenance": payload["provenance"], "train_config": payload.get("train_config", {})}
    return model, sched, meta
