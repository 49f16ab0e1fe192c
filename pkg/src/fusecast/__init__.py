"""Diffusion-based time-series forecasting with a fused condition net and adapter fine-tuning."""

from .config import GuidanceConfig, ModelConfig, TrainConfig
from .nets import ForecastModel
from .sampler import ForecastResult, forecast, impute
from .schedule import NoiseSchedule, make_linear_schedule

__all__ = ["ForecastModel", "ForecastResult", "GuidanceConfig", "ModelConfig", "NoiseSchedule", "TrainConfig",
           "forecast", "impute", "make_linear_schedule"]
__version__ = "0.1.0"
