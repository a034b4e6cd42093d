"""Monte Carlo rendering from the kernel posterior."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError
from .metrics import sample_mean, uncertainty_map
from .renderer import render_tensors
from .scene import Camera, num_sh_basis
from .variational import VariationalScene, draw_noise, sample_tensors


@dataclass
class StochasticRenderOutput:
    samples: np.ndarray      # (S, H, W, 3)
    mean_rgb: np.ndarray     # (H, W, 3)
    uncertainty: np.ndarray  # (H, W)
    diagnostics: dict = field(default_factory=dict)


def render_samples_t(params: dict, sh_degree: int, camera: Camera, n_samples: int, seed: int,
                     cull=True, backend=None, diagnostics=None, noises=None) -> torch.Tensor:
    """Differentiable (S, H, W, 3) stack of posterior renders.

    ``noises`` overrides the seeded streams (used to freeze noise).
    """
    if n_samples < 1:
        raise ContractError("need at least one Monte Carlo sample")
    k = params["mean_mu"].shape[0]
    if noises is None:
        noises = [draw_noise(seed, s, k, num_sh_basis(sh_degree)) for s in range(n_samples)]
    images = []
    for noise in noises[:n_samples]:
        means, logits, sh = sample_tensors(params, noise)
        rgb, _, _, _ = render_tensors(means, params["log_scale"], params["rotation"], logits, sh,
                                      camera, sh_degree, cull=cull, backend=backend,
                                      diagnostics=diagnostics)
        images.append(rgb)
    return torch.stack(images)


def render_stochastic(vs: VariationalScene, camera: Camera, n_samples: int = 8, seed: int = 0,
                      cull=True, backend=None) -> StochasticRenderOutput:
    """Render ``n_samples`` posterior draws; uncertainty is the channel-mean population std."""
    if n_samples < 1:
        raise ContractError("need at least one Monte Carlo sample")
    diag = {}
    with torch.no_grad():
        samples = render_samples_t(vs.tensors(), vs.sh_degree, camera, n_samples, seed,
                                   cull=cull, backend=backend, diagnostics=diag).numpy()
    diag.pop("orders", None)
    if n_samples == 1:
        diag["single_sample"] = True
    mean = sample_mean(torch.from_numpy(samples)).numpy()
    return StochasticRenderOutput(samples, mean, uncertainty_map(samples), diag)
