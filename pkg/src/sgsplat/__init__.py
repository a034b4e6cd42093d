"""Stochastic Gaussian splatting.

A differentiable splat renderer, a diagonal-Gaussian posterior over kernel
parameters, Monte-Carlo rendering with per-pixel uncertainty, and a trainer
that adds an uncertainty-calibration (AUSE) loss.
"""
from .errors import ConfigurationError, ContractError, DomainError, NonFiniteError, StateError
from .gradients import build_loss_graph, finite_diff_check
from .io import (
    Checkpoint, DatasetManifest, View, export_image, export_uncertainty, load_checkpoint,
    load_config, load_dataset, save_checkpoint, save_config, save_dataset,
)
from .metrics import (
    LossWeights, SparsificationCurve, ausc, ause, ause_loss, l1_loss, pixel_errors, psnr,
    sparsification, ssim, total_loss, uncertainty_map,
)
from .raster import BACKENDS, DEFAULT_BACKEND
from .renderer import RenderOutput, render, render_reference
from .scene import Camera, GaussianKernel, Scene, look_at
from .stochastic import StochasticRenderOutput, render_stochastic
from .synthetic import SynthSpec, generate
from .trainer import TrainConfig, TrainResult, train
from .variational import VariationalScene, kl_gaussian, kl_loss, sample_scene

__version__ = "0.1.0"

__all__ = [
    "BACKENDS", "Camera", "Checkpoint", "ConfigurationError", "ContractError", "DEFAULT_BACKEND",
    "DatasetManifest", "DomainError", "GaussianKernel", "LossWeights", "NonFiniteError",
    "RenderOutput", "Scene", "SparsificationCurve", "StateError", "StochasticRenderOutput",
    "SynthSpec", "TrainConfig", "TrainResult", "VariationalScene", "View", "ausc", "ause",
    "ause_loss", "build_loss_graph", "export_image", "export_uncertainty", "finite_diff_check",
    "generate", "kl_gaussian", "kl_loss", "l1_loss", "load_checkpoint", "load_config",
    "load_dataset", "look_at", "pixel_errors", "psnr", "render", "render_reference",
    "render_stochastic", "sample_scene", "save_checkpoint", "save_config", "save_dataset",
    "sparsification", "ssim", "total_loss", "train", "uncertainty_map",
]
