"""Noise schedule, denoiser, conditioning branches, training and sampling."""

from .model import BRANCH_KINDS, Branch, BranchStack, DualBranchModel, ItemCondition, ModelSpec, VisualTokens
from .sample import SamplerConfig, ddim_timesteps, guide, sample
from .schedule import NoiseSchedule, q_sample
from .train import (
    PHASES,
    Example,
    Trainer,
    TrainConfig,
    build_examples,
    load_checkpoint,
    make_example,
    parameter_digest,
    save_checkpoint,
    set_phase,
    train_step,
)
from .unet import UNet, UNetSpec

__all__ = [
    "BRANCH_KINDS",
    "Branch",
    "BranchStack",
    "DualBranchModel",
    "Example",
    "ItemCondition",
    "ModelSpec",
    "NoiseSchedule",
    "PHASES",
    "SamplerConfig",
    "TrainConfig",
    "Trainer",
    "UNet",
    "UNetSpec",
    "VisualTokens",
    "build_examples",
    "ddim_timesteps",
    "guide",
    "load_checkpoint",
    "make_example",
    "parameter_digest",
    "q_sample",
    "sample",
    "save_checkpoint",
    "set_phase",
    "train_step",
]
