"""Reconstruction losses, image metrics and sparsification-based uncertainty scores.

Sparsification means and the area under a curve are evaluated in exact
rational arithmetic and rounded once, so every value here is independent
of summation order and reproducible bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from itertools import accumulate

import numpy as np
import torch

from .errors import ContractError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0
DEFAULT_BINS = 100
METRICS = ("rmse", "mae")


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_kl: float = 1e-3
    lambda_ause: float = 5.0

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_kl", "lambda_ause"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value >= 0):
                raise ContractError(f"{name} must be finite and non-negative")
            setattr(self, name, value)


@dataclass
class SparsificationCurve:
    fractions: np.ndarray
    retained_error: np.ndarray

    @property
    def bins(self) -> int:
        return len(self.fractions) - 1


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _same_shape(pred, gt):
    if tuple(pred.shape) != tuple(gt.shape):
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")


def l1_loss(pred, gt):
    """Mean absolute difference; returns a tensor when given tensors."""
    _same_shape(pred, gt)
    if isinstance(pred, torch.Tensor) or isinstance(gt, torch.Tensor):
        return (_as_tensor(pred) - _as_tensor(gt)).abs().mean()
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


@lru_cache(maxsize=16)
def _band_matrix(n: int) -> torch.Tensor:
    # (n, n - window + 1) matrix whose columns are shifted copies of the window
    g = gaussian_window()
    out = torch.zeros(n, n - SSIM_WINDOW + 1, dtype=torch.float64)
    for j in range(out.shape[1]):
        out[j:j + SSIM_WINDOW, j] = g
    return out


def ssim_map_t(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """SSIM over the valid window region, (..., H - 10, W - 10, C)."""
    _same_shape(pred, gt)
    h, w = pred.shape[-3], pred.shape[-2]
    if min(h, w) < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    gt = gt.expand_as(pred)
    x = pred.movedim(-1, -3)  # (..., C, H, W)
    y = gt.movedim(-1, -3)
    bh = _band_matrix(h).to(pred.dtype)
    bw = _band_matrix(w).to(pred.dtype)
    # separable Gaussian blur of all five moment images in one pass
    stack = torch.stack([x, y, x * x, y * y, x * y])
    mu_x, mu_y, exx, eyy, exy = bh.T @ stack @ bw
    sxx = exx - mu_x**2
    syy = eyy - mu_y**2
    sxy = exy - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    smap = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    return smap.movedim(-3, -1)


def ssim_t(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of (..., H, W, C) images over the valid window region.

    Leading batch dimensions are reduced with the spatial ones, so pass
    one image at a time for a per-image score.
    """
    return ssim_map_t(pred, gt).mean()


def ssim(pred, gt) -> float:
    with torch.no_grad():
        return float(ssim_t(_as_tensor(pred), _as_tensor(gt)))


def psnr(pred, gt) -> float:
    _same_shape(pred, gt)
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mse = float(np.mean((pred - gt) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _check_metric(metric: str) -> str:
    metric = metric.lower()
    if metric not in METRICS:
        raise ContractError(f"metric must be one of {METRICS}, got {metric!r}")
    return metric


def removal_order(order_key: np.ndarray) -> np.ndarray:
    """Pixel indices by descending key; ties keep ascending pixel index."""
    key = np.asarray(order_key, dtype=np.float64).reshape(-1)
    if np.any(np.isnan(key)):
        raise ContractError("order key contains NaN")
    return np.argsort(-key, kind="stable")


def retained_counts(n: int, bins: int) -> list[int]:
    """Pixels kept after removing fraction b/bins, floored, never below one."""
    return [max(1, (bins - b) * n // bins) for b in range(bins + 1)]


def _curve_values(sorted_errors: np.ndarray, bins: int, metric: str) -> np.ndarray:
    # exact suffix sums over a common power-of-two denominator; int / int
    # true division rounds each mean once
    ratios = [float(e).as_integer_ratio() for e in sorted_errors]
    if metric == "rmse":
        ratios = [(p * p, q * q) for p, q in ratios]
    denom = max(q for _, q in ratios)
    suffix = list(accumulate(p * (denom // q) for p, q in reversed(ratios)))
    means = np.array([suffix[m - 1] / (m * denom) for m in retained_counts(len(ratios), bins)])
    return np.sqrt(means) if metric == "rmse" else means


def _trapezoid(values: np.ndarray, bins: int) -> float:
    y = [Fraction(float(v)) for v in values[:bins]]
    return float(sum((y[i] + y[i + 1] for i in range(bins - 1)), Fraction(0)) / (2 * bins))


def _ausc_of(errors: np.ndarray, order: np.ndarray, bins: int, metric: str) -> float:
    return _trapezoid(_curve_values(errors[order], bins, metric), bins)


def _check_inputs(errors, order_key, bins):
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    order_key = np.asarray(order_key, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise ContractError("sparsification of an empty error set")
    if errors.shape != order_key.shape:
        raise ContractError("errors and order key must have the same length")
    if bins < 2 or errors.size < bins:
        raise ContractError(f"need 2 <= bins <= number of pixels, got bins={bins}, n={errors.size}")
    return errors, order_key


def sparsification(errors, order_key, bins: int = DEFAULT_BINS, metric: str = "rmse") -> SparsificationCurve:
    """Error over the pixels that remain as the highest-key ones are removed."""
    metric = _check_metric(metric)
    errors, order_key = _check_inputs(errors, order_key, bins)
    sorted_errors = errors[removal_order(order_key)]
    fractions = np.arange(bins + 1, dtype=np.float64) / bins
    return SparsificationCurve(fractions, _curve_values(sorted_errors, bins, metric))


def ausc(curve: SparsificationCurve) -> float:
    """Trapezoidal area over fractions [0, (B-1)/B], evaluated exactly then rounded once."""
    return _trapezoid(curve.retained_error, curve.bins)


def ause(errors, uncertainty, bins: int = DEFAULT_BINS, metric: str = "rmse") -> float:
    """AUSC under uncertainty ordering minus AUSC under the oracle (error) ordering."""
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    return ausc(sparsification(errors, uncertainty, bins, metric)) - ausc(sparsification(errors, errors, bins, metric))


def pixel_errors(mean_rgb, gt, metric: str = "rmse") -> np.ndarray:
    """Per-pixel error of an (H, W, 3) image: channel RMSE or channel-mean absolute error."""
    diff = np.asarray(mean_rgb, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    if _check_metric(metric) == "rmse":
        return np.sqrt(np.mean(diff * diff, axis=-1)).reshape(-1)
    return np.mean(np.abs(diff), axis=-1).reshape(-1)


def _ausc_grad(errors: np.ndarray, order: np.ndarray, bins: int, metric: str) -> np.ndarray:
    # d AUSC / d e_i with the ordering held fixed
    n = errors.size
    sorted_errors = errors[order]
    values = _curve_values(sorted_errors, bins, metric)[:bins]
    counts = retained_counts(n, bins)[:bins]
    weights = np.full(bins, 1.0 / bins)
    weights[[0, -1]] = 0.5 / bins
    coeff = np.zeros(n)
    for b in range(bins):
        if metric == "rmse":
            c = 0.0 if values[b] == 0 else weights[b] / (counts[b] * values[b])
        else:
            c = weights[b] / counts[b]
        coeff[n - counts[b]] += c
    per_position = np.cumsum(coeff)
    if metric == "rmse":
        per_position = per_position * sorted_errors
    grad = np.zeros(n)
    grad[order] = per_position
    return grad


class _AUSE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, errors, uncertainty, bins, metric):
        e = errors.detach().numpy().astype(np.float64).reshape(-1)
        u = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
        _check_inputs(e, u, bins)
        ctx.save = (e, u, bins, metric)
        value = _ausc_of(e, removal_order(u), bins, metric) - _ausc_of(e, removal_order(e), bins, metric)
        return torch.tensor(value, dtype=errors.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        e, u, bins, metric = ctx.save
        g = _ausc_grad(e, removal_order(u), bins, metric) - _ausc_grad(e, removal_order(e), bins, metric)
        return grad_out * torch.from_numpy(g), None, None, None


def ause_t(errors: torch.Tensor, uncertainty: np.ndarray, bins: int = DEFAULT_BINS, metric: str = "rmse"):
    """Differentiable AUSE; the two orderings are treated as constants."""
    return _AUSE.apply(errors.reshape(-1), np.asarray(uncertainty), int(bins), _check_metric(metric))


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # zero gradient at zero instead of inf * 0
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def sample_mean(samples: torch.Tensor) -> torch.Tensor:
    """Mean over the sample axis, shifted by the first sample so identical samples return it exactly."""
    return samples[0] + (samples - samples[:1]).mean(dim=0)


def uncertainty_map(samples) -> np.ndarray:
    """Channel-mean of the per-pixel population std over samples, (H, W)."""
    s = samples.detach().numpy() if isinstance(samples, torch.Tensor) else np.asarray(samples, dtype=np.float64)
    # shift by the first sample: identical samples give exactly zero
    return np.mean(np.std(s - s[:1], axis=0), axis=-1)


def ause_loss(samples, gt, bins: int = DEFAULT_BINS):
    """AUSE-RMSE of the MC mean image against ``gt``, ordered by the MC std map.

    Args:
        samples: (S, H, W, 3) rendered posterior samples, S >= 2.
        gt: (H, W, 3) target image.
    """
    samples = _as_tensor(samples)
    gt = _as_tensor(gt)
    if samples.shape[0] < 2:
        raise ContractError("AUSE loss needs at least two Monte Carlo samples")
    _same_shape(samples[0], gt)
    mean = sample_mean(samples)
    errors = _safe_sqrt(((mean - gt) ** 2).mean(dim=-1))
    return ause_t(errors, uncertainty_map(samples), bins, "rmse")


def total_loss_t(samples: torch.Tensor, gt: torch.Tensor, kl, weights: LossWeights, bins: int = DEFAULT_BINS):
    """Composite objective and its unweighted terms.

    Reconstruction and SSIM terms are Monte Carlo averages over the
    per-sample losses. ``kl`` may be None in the deterministic phase; the
    AUSE term is zero when fewer than two samples are given.
    """
    n = samples.shape[0]
    l_rec = sum(l1_loss(samples[s], gt) for s in range(n)) / n
    # all samples share the valid-region size, so the mean of per-sample SSIMs is the batch mean
    l_ssim = 1.0 - ssim_t(samples, gt.expand_as(samples))
    zero = torch.zeros((), dtype=samples.dtype)
    l_kl = zero if kl is None else kl
    l_ause = ause_loss(samples, gt, bins) if n >= 2 else zero
    total = l_rec + weights.lambda_ssim * l_ssim + weights.lambda_kl * l_kl + weights.lambda_ause * l_ause
    return total, {"l_rec": l_rec, "l_ssim": l_ssim, "l_kl": l_kl, "l_ause": l_ause, "total": total}


def total_loss(render, gt, vs, weights: LossWeights, bins: int = DEFAULT_BINS):
    """Loss value and float breakdown for a finished stochastic render."""
    from .variational import kl_loss_t

    with torch.no_grad():
        samples = _as_tensor(render.samples)
        kl = None if vs is None else kl_loss_t(vs.tensors(), vs.prior)
        total, parts = total_loss_t(samples, _as_tensor(gt), kl, weights, bins)
    return float(total), {k: float(v) for k, v in parts.items()}
