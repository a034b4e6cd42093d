"""Reverse-mode gradients of the training objective and a finite-difference harness."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import torch

from .errors import ContractError, NonFiniteError
from .metrics import DEFAULT_BINS, LossWeights, removal_order, sample_mean, total_loss_t, uncertainty_map
from .renderer import pixel_basis, render_tensors, scene_tensors
from .scene import Camera, Scene, num_sh_basis
from .stochastic import render_samples_t
from .variational import BAYESIAN_PARAMS, VariationalScene, draw_noise, kl_loss_t, sample_tensors

DETERMINISTIC_PARAMS = ("mean", "log_scale", "rotation", "opacity_logit", "sh")


class FrozenNoiseError(ContractError):
    """The two sides of a finite difference were given different noise streams."""


class NonDeterministicError(RuntimeError):
    """Two identical forward evaluations disagreed."""


class ParamGradients(dict):
    """Gradient arrays keyed by parameter block name."""


@dataclass
class LossGraph:
    loss: torch.Tensor
    params: dict
    nodes: dict
    signature: tuple = ()


def _noises(model: VariationalScene, n_samples: int, seed: int):
    nb = num_sh_basis(model.sh_degree)
    return [draw_noise(seed, s, len(model), nb) for s in range(n_samples)]


def _forward(model, params, camera, gt, weights, n_samples, noises, cull, bins, backend):
    diag = {}
    gt_t = torch.as_tensor(np.asarray(gt, dtype=np.float64))
    if isinstance(model, VariationalScene):
        samples = render_samples_t(params, model.sh_degree, camera, n_samples, 0, cull=cull,
                                   backend=backend, diagnostics=diag, noises=noises)
        kl = kl_loss_t(params, model.prior)
    else:
        rgb, _, _, _ = render_tensors(params["mean"], params["log_scale"], params["rotation"],
                                      params["opacity_logit"], params["sh"], camera,
                                      model.sh_degree, cull=cull, backend=backend, diagnostics=diag)
        samples = rgb.unsqueeze(0)
        kl = None
    total, parts = total_loss_t(samples, gt_t, kl, weights, bins)
    nodes = {"samples": samples, **parts}
    with torch.no_grad():
        s = samples.detach()
        if noises is None:
            shs = [params["sh"]]
        else:
            shs = [sample_tensors(params, n)[2] for n in noises[:n_samples]]
        basis = torch.tensor(pixel_basis(camera, model.sh_degree))
        sh_active = b"".join(np.packbits((sh @ basis.T > 0).numpy()).tobytes() for sh in shs)
        signature = (
            ("sh_clamp", sh_active),
            ("depth_order", b"".join(o.tobytes() for o in diag.get("orders", []))),
            ("alpha_clamp", diag.get("clamped_terms", 0)),
            ("rgb_clamp", int(((s <= 0) | (s >= 1)).sum())),
            ("l1_sign", np.packbits((s > gt_t).numpy()).tobytes()
             + np.packbits((s < gt_t).numpy()).tobytes()),
        )
        if s.shape[0] >= 2 and weights.lambda_ause != 0:
            errors = ((sample_mean(s) - gt_t) ** 2).mean(-1).reshape(-1).numpy()
            signature += (
                ("ause_order", removal_order(uncertainty_map(s)).tobytes()
                 + removal_order(np.sqrt(errors)).tobytes()),
            )
    return total, nodes, signature


def build_loss_graph(model: Union[Scene, VariationalScene], camera: Camera, gt, weights: LossWeights,
                     n_samples: int = 2, seed: int = 0, cull: bool = True, bins: int = DEFAULT_BINS,
                     backend=None) -> LossGraph:
    """Forward pass recording everything `backward` needs.

    A `Scene` gives the deterministic objective (one render, no KL or
    AUSE); a `VariationalScene` gives the full objective over
    ``n_samples`` posterior draws keyed by ``seed``.
    """
    if isinstance(model, VariationalScene):
        params = model.tensors()
        noises = _noises(model, n_samples, seed)
    else:
        params = scene_tensors(model)
        noises = None
    for p in params.values():
        p.requires_grad_(True)
    loss, nodes, signature = _forward(model, params, camera, gt, weights, n_samples, noises, cull, bins, backend)
    return LossGraph(loss, params, nodes, signature)


def backward(graph: LossGraph) -> ParamGradients:
    """Exact gradients of the recorded scalar loss w.r.t. every learnable block."""
    for name, node in graph.nodes.items():
        if not torch.isfinite(node).all():
            raise NonFiniteError(f"non-finite value in forward node {name!r}")
    names = list(graph.params)
    grads = torch.autograd.grad(graph.loss, [graph.params[n] for n in names], allow_unused=True)
    out = ParamGradients()
    for name, g in zip(names, grads):
        arr = np.zeros(tuple(graph.params[name].shape)) if g is None else g.detach().numpy().copy()
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite gradient for parameter block {name!r}")
        out[name] = arr
    return out


@dataclass
class BlockReport:
    name: str
    n_checked: int = 0
    max_rel_error: float = 0.0
    mean_rel_error: float = 0.0
    failures: list = field(default_factory=list)
    flagged: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class FDReport:
    blocks: dict
    step: float
    rtol: float
    atol: float

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks.values())

    @property
    def n_flagged(self) -> int:
        return sum(len(b.flagged) for b in self.blocks.values())

    def lines(self) -> list[str]:
        out = []
        for b in self.blocks.values():
            status = "ok" if b.passed else "FAIL"
            out.append(f"{b.name:18s} n={b.n_checked:4d} max_rel={b.max_rel_error:.3e} "
                       f"mean_rel={b.mean_rel_error:.3e} flagged={len(b.flagged)} {status}")
        return out


def _relative_error(a: float, f: float) -> float:
    scale = max(abs(a), abs(f))
    return 0.0 if scale == 0 else abs(a - f) / scale


def finite_diff_check(model: Union[Scene, VariationalScene], camera: Camera, gt, weights: LossWeights,
                      step: float = 1e-4, seed: Union[int, tuple] = 0, n_samples: int = 2,
                      cull: bool = False, bins: int = DEFAULT_BINS, rtol: float = 1e-3,
                      atol: float = 1e-6, blocks: Optional[list] = None, backend=None) -> FDReport:
    """Compare `backward` against central differences with frozen noise.

    Each scalar parameter is perturbed by +-step with the same noise
    draws on both sides. A parameter whose perturbation changes a
    discrete state of the forward pass (depth or sparsification ordering,
    a clamp becoming active, a pixel crossing its target in the L1 term)
    is flagged and skipped rather than compared.

    Args:
        seed: noise seed, or a (plus, minus) pair which must agree.
    """
    if not 1e-6 <= step <= 1e-2:
        raise ContractError("finite-difference step must lie in [1e-6, 1e-2]")
    if isinstance(seed, tuple):
        if len(set(seed)) != 1:
            raise FrozenNoiseError("finite differences require the same noise seed on both sides")
        seed = seed[0]
    bayesian = isinstance(model, VariationalScene)
    params = model.tensors() if bayesian else scene_tensors(model)
    noises = _noises(model, n_samples, seed) if bayesian else None

    def evaluate(p):
        with torch.no_grad():
            loss, _, sig = _forward(model, p, camera, gt, weights, n_samples, noises, cull, bins, backend)
        return float(loss), sig

    base, base_sig = evaluate(params)
    again, _ = evaluate({k: v.clone() for k, v in params.items()})
    if base != again:
        raise NonDeterministicError(f"repeated forward evaluations differ: {base!r} vs {again!r}")

    graph = build_loss_graph(model, camera, gt, weights, n_samples, seed, cull, bins, backend)
    analytic = backward(graph)
    names = blocks or list(BAYESIAN_PARAMS if bayesian else DETERMINISTIC_PARAMS)
    report = {}
    for name in names:
        block = BlockReport(name)
        errs = []
        flat = params[name].reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus, sig_p = evaluate(params)
            flat[i] = orig - step
            minus, sig_m = evaluate(params)
            flat[i] = orig
            if sig_p != base_sig or sig_m != base_sig:
                changed = sorted({k for (k, v), (_, w) in zip(base_sig, sig_p) if v != w}
                                 | {k for (k, v), (_, w) in zip(base_sig, sig_m) if v != w})
                block.flagged.append((i, ",".join(changed)))
                continue
            fd = (plus - minus) / (2 * step)
            a = float(analytic[name].reshape(-1)[i])
            rel = _relative_error(a, fd)
            errs.append(rel)
            if rel > rtol and abs(a - fd) > atol:
                block.failures.append((i, a, fd))
        block.n_checked = len(errs)
        if errs:
            block.max_rel_error = float(np.max(errs))
            block.mean_rel_error = float(np.mean(errs))
        report[name] = block
    return FDReport(report, step, rtol, atol)
