"""Closed-form diffusion math for a discrete variance schedule.

Step indices run from 1 to ``T_train``; index 0 is the clean sample, with the
convention that the cumulative signal retention at step 0 equals one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable β/α/ᾱ tables, stored in float64 and padded so index t is step t."""

    T_train: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    posterior_variances: np.ndarray = field(repr=False)

    # padded views: index 0 is the clean-sample convention (ᾱ_0 = 1)
    @property
    def alpha_bars_padded(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars])

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t with ᾱ_0 = 1."""
        if not 0 <= t <= self.T_train:
            raise ValueError(f"step {t} outside [0, {self.T_train}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def posterior_variance(self, t: int) -> float:
        self._check_step(t)
        return float(self.posterior_variances[t - 1])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T_train:
            raise ValueError(f"step {t} outside [1, {self.T_train}]")

    def to_dict(self) -> dict:
        return {
            "T_train": self.T_train,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "betas": self.betas.tolist(),
            "alpha_bars": self.alpha_bars.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        sched = make_linear_schedule(int(d["T_train"]), float(d["beta_start"]), float(d["beta_end"]))
        if "betas" in d and not np.array_equal(np.asarray(d["betas"], dtype=np.float64), sched.betas):
            raise ValueError("stored betas disagree with the schedule metadata")
        return sched


def make_linear_schedule(T_train: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas (endpoints inclusive) and their derived tables."""
    if int(T_train) != T_train or T_train < 1:
        raise ValueError(f"T_train must be a positive integer, got {T_train!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    T_train = int(T_train)
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_variances = (1.0 - prev) / (1.0 - alpha_bars) * betas
    for arr in (betas, alphas, alpha_bars, posterior_variances):
        arr.setflags(write=False)
    return NoiseSchedule(T_train, float(beta_start), float(beta_end), betas, alphas, alpha_bars, posterior_variances)


def _coef(values, t, like: torch.Tensor) -> torch.Tensor:
    """Gather per-sample coefficients and broadcast against ``like``."""
    if isinstance(t, int):
        return torch.as_tensor(values[t], dtype=like.dtype)
    t = torch.as_tensor(t, dtype=torch.long)
    table = torch.as_tensor(values, dtype=like.dtype)
    out = table[t]
    return out.reshape(out.shape + (1,) * (like.dim() - out.dim()))


def _validate_steps(t, lo: int, hi: int) -> None:
    if isinstance(t, int):
        bad = not lo <= t <= hi
    else:
        t = torch.as_tensor(t)
        bad = bool(((t < lo) | (t > hi)).any())
    if bad:
        raise ValueError(f"step index outside [{lo}, {hi}]")


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample from q(x_t | x0): sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·eps.

    ``t`` is either an int or a per-sample LongTensor indexing the leading axis.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    _validate_steps(t, 1, sched.T_train)
    ab = sched.alpha_bars_padded
    signal = _coef(np.sqrt(ab), t, x0)
    noise = _coef(np.sqrt(1.0 - ab), t, x0)
    return signal * x0 + noise * eps


def posterior_coefficients(sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Padded (x_t coefficient, x0 coefficient) tables of the posterior mean; index 0 unused."""
    ab = sched.alpha_bars_padded
    betas = np.concatenate([[0.0], sched.betas])
    alphas = np.concatenate([[1.0], sched.alphas])
    denom = np.concatenate([[1.0], 1.0 - ab[1:]])
    coef_xt = np.sqrt(alphas) * np.concatenate([[0.0], 1.0 - ab[:-1]]) / denom
    coef_x0 = np.concatenate([[1.0], np.sqrt(ab[:-1]) * betas[1:] / denom[1:]])
    coef_x0[1] = 1.0  # 1 - ᾱ_1 = β_1 analytically; avoid the rounding in their ratio
    return coef_xt, coef_x0


def posterior_mean_variance(x0_hat: torch.Tensor, x_t: torch.Tensor, t, sched: NoiseSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x0) with x0 replaced by ``x0_hat``.

    Returns ``(mean, variance)``; variance is a float for scalar ``t`` and a
    broadcastable tensor otherwise.
    """
    if x0_hat.shape != x_t.shape:
        raise ValueError(f"x0_hat shape {tuple(x0_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    _validate_steps(t, 1, sched.T_train)
    coef_xt, coef_x0 = posterior_coefficients(sched)
    mean = _coef(coef_xt, t, x_t) * x_t + _coef(coef_x0, t, x0_hat) * x0_hat
    var_table = np.concatenate([[0.0], sched.posterior_variances])
    if isinstance(t, int):
        return mean, float(var_table[t])
    return mean, _coef(var_table, t, x_t)


def loss_target(x0: torch.Tensor, x_t: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Ground-truth posterior mean, the regression target for the predicted mean."""
    return posterior_mean_variance(x0, x_t, t, sched)[0]
