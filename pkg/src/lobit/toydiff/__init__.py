"""Toy class-conditional diffusion model on 2-D data with a hand-written backward pass."""

from lobit.toydiff.data import ToyDataset
from lobit.toydiff.model import (
    DenoiserParams,
    ModelConfig,
    StaleForwardError,
    cache_time_features,
    denoiser_backward,
    denoiser_forward,
    init_params,
    time_embedding,
)
from lobit.toydiff.sampler import cfg_combine, ddim_loop, ddim_sample, ddim_timesteps
from lobit.toydiff.schedule import NoiseSchedule, forward_diffuse, make_schedule

__all__ = [
    "DenoiserParams",
    "ModelConfig",
    "NoiseSchedule",
    "StaleForwardError",
    "ToyDataset",
    "cache_time_features",
    "cfg_combine",
    "ddim_loop",
    "ddim_sample",
    "ddim_timesteps",
    "denoiser_backward",
    "denoiser_forward",
    "forward_diffuse",
    "init_params",
    "make_schedule",
    "time_embedding",
]
