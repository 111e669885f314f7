"""Multi-reference image conditioning for a toy pixel-space diffusion model."""

from .diffusion import GuidanceConfig, ddim_sample, make_noise_schedule
from .encoder import EncoderConfig, ReferenceEncoder
from .model import ModelConfig, MultiRefModel

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "GuidanceConfig",
    "ModelConfig",
    "MultiRefModel",
    "ReferenceEncoder",
    "ddim_sample",
    "make_noise_schedule",
]
