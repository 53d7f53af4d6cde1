"""Deterministic backbone plus segment-autoregressive residual diffusion for radar nowcasting."""
from .core import (ConfigError, EventSample, ModelConfig, Prediction, RadarSequence, denormalize,
                   normalize, validate_config)
from .framework import (DiffCast, TrainStepReport, build_models, compute_residual, fit, forecast,
                        forecast_batch, group_segments, set_training_mode, training_step)

__version__ = "0.1.0"
