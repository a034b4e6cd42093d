"""Variational posteriors over kernel parameters.

Each kernel's mean, opacity logit and SH coefficients carry an independent
diagonal Gaussian posterior; covariances (log-scale, rotation) stay
deterministic. Variances are parameterized by their square roots.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from .errors import ContractError, DomainError, StateError
from .scene import Scene, num_sh_basis

PRIOR_VARIANCE = 1e-2
VARIANCE_FLOOR = 1e-12

POSTERIOR_NAMES = ("mean_mu", "sqrt_gamma", "mean_logit_alpha", "sqrt_pi", "mean_c", "sqrt_xi")
BAYESIAN_PARAMS = POSTERIOR_NAMES + ("log_scale", "rotation")


@dataclass
class PosteriorParams:
    mean_mu: np.ndarray           # (K, 3)
    sqrt_gamma: np.ndarray        # (K, 3)
    mean_logit_alpha: np.ndarray  # (K,)
    sqrt_pi: np.ndarray           # (K,)
    mean_c: np.ndarray            # (K, 3, B)
    sqrt_xi: np.ndarray           # (K, 3, B)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.ascontiguousarray(getattr(self, f.name), dtype=np.float64))

    def copy(self) -> "PosteriorParams":
        return PosteriorParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})


@dataclass
class PriorParams:
    """Prior means and variances; read-only once frozen."""

    mu: np.ndarray           # (K, 3)
    gamma: np.ndarray        # (K, 3) variances
    logit_alpha: np.ndarray  # (K,)
    pi: np.ndarray           # (K,)
    c: np.ndarray            # (K, 3, B)
    xi: np.ndarray           # (K, 3, B)
    frozen: bool = False

    def __post_init__(self):
        for name in ("mu", "gamma", "logit_alpha", "pi", "c", "xi"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        for name in ("gamma", "pi", "xi"):
            if not np.all(getattr(self, name) > 0):
                raise DomainError(f"prior variance {name} must be strictly positive")
        if self.frozen:
            self.freeze()

    def freeze(self) -> None:
        for name in ("mu", "gamma", "logit_alpha", "pi", "c", "xi"):
            getattr(self, name).setflags(write=False)
        object.__setattr__(self, "frozen", True)

    def __setattr__(self, name, value):
        if getattr(self, "frozen", False):
            raise StateError("prior parameters are frozen")
        object.__setattr__(self, name, value)


@dataclass
class VariationalScene:
    posterior: PosteriorParams
    prior: PriorParams
    log_scales: np.ndarray  # (K, 3), deterministic
    rotations: np.ndarray   # (K, 4), deterministic
    sh_degree: int = 1

    def __post_init__(self):
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        k = self.log_scales.shape[0]
        nb = num_sh_basis(self.sh_degree)
        expected = {
            "mean_mu": (k, 3), "sqrt_gamma": (k, 3), "mean_logit_alpha": (k,),
            "sqrt_pi": (k,), "mean_c": (k, 3, nb), "sqrt_xi": (k, 3, nb),
        }
        for name, shape in expected.items():
            if getattr(self.posterior, name).shape != shape:
                raise ContractError(f"posterior {name} has shape "
                                    f"{getattr(self.posterior, name).shape}, expected {shape}")
        prior_shapes = dict(zip(("mu", "gamma", "logit_alpha", "pi", "c", "xi"), expected.values()))
        for name, shape in prior_shapes.items():
            if getattr(self.prior, name).shape != shape:
                raise ContractError(f"prior {name} has shape {getattr(self.prior, name).shape}, expected {shape}")
        if self.rotations.shape != (k, 4):
            raise ContractError("rotations must be (K, 4)")

    def __len__(self) -> int:
        return self.log_scales.shape[0]

    @classmethod
    def from_scene(cls, scene: Scene, prior_variance: float = PRIOR_VARIANCE) -> "VariationalScene":
        """Empirical-Bayes switch: freeze ``scene`` as the prior mean and start the posterior there."""
        k, nb = len(scene), scene.sh.shape[2]
        var = float(prior_variance)
        prior = PriorParams(
            mu=scene.means, gamma=np.full((k, 3), var),
            logit_alpha=scene.opacity_logits, pi=np.full(k, var),
            c=scene.sh, xi=np.full((k, 3, nb), var), frozen=True,
        )
        sd = np.sqrt(var)
        posterior = PosteriorParams(
            mean_mu=prior.mu.copy(), sqrt_gamma=np.full((k, 3), sd),
            mean_logit_alpha=prior.logit_alpha.copy(), sqrt_pi=np.full(k, sd),
            mean_c=prior.c.copy(), sqrt_xi=np.full((k, 3, nb), sd),
        )
        return cls(posterior, prior, scene.log_scales.copy(), scene.rotations.copy(), scene.sh_degree)

    def mean_scene(self) -> Scene:
        p = self.posterior
        return Scene(p.mean_mu, self.log_scales, self.rotations, p.mean_logit_alpha, p.mean_c, self.sh_degree)

    def tensors(self) -> dict:
        """Learnable parameters as fresh float64 tensors keyed by name."""
        out = {name: torch.from_numpy(getattr(self.posterior, name).copy()) for name in POSTERIOR_NAMES}
        out["log_scale"] = torch.from_numpy(self.log_scales.copy())
        out["rotation"] = torch.from_numpy(self.rotations.copy())
        return out

    def with_tensors(self, params: dict) -> "VariationalScene":
        posterior = PosteriorParams(**{n: params[n].detach().numpy().copy() for n in POSTERIOR_NAMES})
        return VariationalScene(posterior, self.prior, params["log_scale"].detach().numpy().copy(),
                                params["rotation"].detach().numpy().copy(), self.sh_degree)


@dataclass
class Noise:
    """Standard-normal draws for one posterior sample."""

    mu: np.ndarray     # (K, 3)
    alpha: np.ndarray  # (K,)
    c: np.ndarray      # (K, 3, B)


def draw_noise(seed: int, sample: int, n_kernels: int, n_basis: int) -> Noise:
    """Counter-based noise stream keyed by (seed, sample index).

    Within a stream, draws are laid out in a fixed parameter order
    (means, opacity logits, SH coefficients), so the value at a given
    parameter index depends only on (seed, sample, index).
    """
    key = np.array([seed % 2**64, sample % 2**64], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    k = n_kernels
    return Noise(
        mu=rng.standard_normal((k, 3)),
        alpha=rng.standard_normal(k),
        c=rng.standard_normal((k, 3, n_basis)),
    )


def _check_noise(vs: VariationalScene, noise: Noise) -> None:
    k, nb = len(vs), num_sh_basis(vs.sh_degree)
    if noise.mu.shape != (k, 3) or noise.alpha.shape != (k,) or noise.c.shape != (k, 3, nb):
        raise ContractError("noise dimensions do not match the variational scene")


def sample_scene(vs: VariationalScene, noise: Noise) -> Scene:
    """Reparameterized draw: posterior mean + sqrt-variance * noise."""
    _check_noise(vs, noise)
    p = vs.posterior
    return Scene(
        means=p.mean_mu + p.sqrt_gamma * noise.mu,
        log_scales=vs.log_scales,
        rotations=vs.rotations,
        opacity_logits=p.mean_logit_alpha + p.sqrt_pi * noise.alpha,
        sh=p.mean_c + p.sqrt_xi * noise.c,
        sh_degree=vs.sh_degree,
    )


def sample_tensors(params: dict, noise: Noise):
    """Torch counterpart of `sample_scene`: (means, opacity logits, sh) for one draw."""
    means = params["mean_mu"] + params["sqrt_gamma"] * torch.from_numpy(noise.mu)
    logits = params["mean_logit_alpha"] + params["sqrt_pi"] * torch.from_numpy(noise.alpha)
    sh = params["mean_c"] + params["sqrt_xi"] * torch.from_numpy(noise.c)
    return means, logits, sh


def kl_gaussian(mu0, var0, mu1, var1) -> float:
    """KL(N(mu0, diag var0) || N(mu1, diag var1)) in closed form."""
    mu0, var0, mu1, var1 = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (mu0, var0, mu1, var1))
    if not (mu0.shape == var0.shape == mu1.shape == var1.shape):
        raise ContractError("KL arguments must share one dimension")
    if np.any(~(var0 > 0)) or np.any(~(var1 > 0)):
        raise DomainError("KL requires strictly positive variances")
    terms = var0 / var1 + (mu1 - mu0) ** 2 / var1 - 1.0 + np.log(var1 / var0)
    return float(0.5 * np.sum(terms))


def _kl_terms_t(mu0, var0, mu1, var1):
    var0 = torch.clamp(var0, min=VARIANCE_FLOOR)
    var1 = torch.clamp(var1, min=VARIANCE_FLOOR)
    return 0.5 * (var0 / var1 + (mu1 - mu0) ** 2 / var1 - 1.0 + torch.log(var1) - torch.log(var0))


def kl_loss_t(params: dict, prior: PriorParams) -> torch.Tensor:
    """Sum over kernels of KL(posterior || prior) for the mean, opacity and SH blocks."""
    if not prior.frozen:
        raise StateError("KL loss requires a frozen prior")
    t = torch.tensor
    return (
        _kl_terms_t(params["mean_mu"], params["sqrt_gamma"] ** 2, t(prior.mu), t(prior.gamma)).sum()
        + _kl_terms_t(params["mean_logit_alpha"], params["sqrt_pi"] ** 2, t(prior.logit_alpha), t(prior.pi)).sum()
        + _kl_terms_t(params["mean_c"], params["sqrt_xi"] ** 2, t(prior.c), t(prior.xi)).sum()
    )


def kl_loss(vs: VariationalScene) -> float:
    with torch.no_grad():
        return float(kl_loss_t(vs.tensors(), vs.prior))
