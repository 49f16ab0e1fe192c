"""Configuration dataclasses shared across modules."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields


def _from_dict(cls, d: dict | None):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ModelConfig:
    depth_blocks: int = 3
    D: int = 256
    patch_len: int = 16
    prompt_dim: int = 64
    time_dim: int = 64
    n_heads: int = 4
    dropout: float = 0.1
    lambda_guidance: float = 7.5
    T_train: int = 200
    T_infer: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    trend_window: int = 25
    trend_points: int = 32
    prompt_tokens: int = 4
    adapter_dim: int = 32
    adapter_basis: int = 16
    condition_decoder: bool = True
    tokenize_raw_observation: bool = False

    def __post_init__(self):
        if self.patch_len % 8:
            raise ValueError(f"patch_len must be divisible by 8, got {self.patch_len}")
        if self.D % 4:
            raise ValueError(f"D must be divisible by 4, got {self.D}")
        for width in (*self.hidden_widths, self.adapter_dim):
            if width % self.n_heads:
                raise ValueError(f"n_heads={self.n_heads} does not divide attention width {width}")
        if self.prompt_dim % self.prompt_tokens:
            raise ValueError("prompt_dim must be divisible by prompt_tokens")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.trend_window < 1 or self.trend_window % 2 == 0:
            raise ValueError("trend_window must be a positive odd integer")
        if not 1 <= self.T_infer <= self.T_train:
            raise ValueError("need 1 <= T_infer <= T_train")

    @property
    def hidden_widths(self) -> tuple[int, int, int, int]:
        """Internal widths of scales a, b, c and the middle block."""
        return (self.D // 4, self.D // 2, self.D, self.D)

    @property
    def context_widths(self) -> tuple[int, int, int, int]:
        p = self.patch_len
        return (p, p // 2, p // 4, p // 8)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelConfig":
        return _from_dict(cls, d)


@dataclass
class GuidanceConfig:
    lambda_guidance: float = 7.5
    train_uncond: bool = True

    def __post_init__(self):
        if not abs(float(self.lambda_guidance)) < float("inf"):
            raise ValueError("lambda_guidance must be finite")


# "uniform": plain posterior-mean MSE. "x0": each row's squared error is divided by the
# square of its posterior x0 coefficient, which equals MSE on the clean-sample prediction.
LOSS_WEIGHTINGS = ("uniform", "x0")


@dataclass
class TrainConfig:
    n_iter: int = 1000
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    lookback: int = 96
    horizon: int = 24
    blend_in_training: bool = True
    cond_dropout_p: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50
    domain_weights: dict[str, float] = field(default_factory=dict)
    loss_weighting: str = "uniform"

    def __post_init__(self):
        if self.loss_weighting not in LOSS_WEIGHTINGS:
            raise ValueError(f"loss_weighting must be one of {LOSS_WEIGHTINGS}, got {self.loss_weighting!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ValueError("cond_dropout_p must lie in [0, 1]")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        return _from_dict(cls, d)
