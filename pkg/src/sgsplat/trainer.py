"""Two-phase optimization: deterministic warm-up with densification, then the Bayesian phase."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigurationError, ContractError, NonFiniteError, StateError
from .gradients import LossGraph, backward
from .metrics import DEFAULT_BINS, LossWeights, psnr, total_loss_t
from .renderer import render_tensors, scene_tensors
from .scene import Scene, num_sh_basis, quat_to_rotmat, sigmoid
from .stochastic import render_samples_t
from .variational import VariationalScene, draw_noise, kl_loss_t

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
SPLIT_SCALE = 1.6
LOG_COLUMNS = ("iter", "l_rec", "l_ssim", "l_kl", "l_ause", "total", "psnr_train")

DEFAULT_LR = {
    "mean": 1e-2,
    "sh": 2.5e-3,
    "opacity_logit": 5e-2,
    "log_scale": 5e-3,
    "rotation": 1e-3,
}
DEFAULT_BAYES_LR = {
    "mean_mu": 1e-4, "sqrt_gamma": 1e-4,
    "mean_logit_alpha": 1e-4, "sqrt_pi": 1e-4,
    "mean_c": 1e-4, "sqrt_xi": 1e-4,
    "log_scale": 1e-4, "rotation": 1e-4,
}


@dataclass
class TrainConfig:
    warmup_iters: int = 2500
    total_iters: int = 10000
    densify_from: int = 500
    densify_until: int = 1000
    densify_interval: int = 100
    mc_samples: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    bayes_lr: dict = field(default_factory=lambda: dict(DEFAULT_BAYES_LR))
    seed: int = 0
    tau_grad: float = 2e-4
    tau_prune: float = 5e-3
    percent_dense: float = 0.01
    max_kernels: int = 100000
    init_kernels: int = 64
    init_perturb: float = 1.0
    bins: int = DEFAULT_BINS
    cull: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ints = ("warmup_iters", "total_iters", "densify_from", "densify_until", "densify_interval",
                "mc_samples", "max_kernels", "init_kernels", "bins")
        for name in ints:
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be a non-negative integer")
        if self.warmup_iters > self.total_iters:
            raise ConfigurationError("warmup_iters must not exceed total_iters")
        if self.densify_until > self.warmup_iters:
            raise ConfigurationError("densify_until must not exceed warmup_iters")
        if self.densify_interval < 1:
            raise ConfigurationError("densify_interval must be at least 1")
        if self.total_iters > self.warmup_iters and self.mc_samples < 2:
            raise ConfigurationError("the Bayesian phase needs mc_samples >= 2")
        if self.max_kernels < 1 or self.init_kernels < 1:
            raise ConfigurationError("kernel counts must be positive")
        for table, names in ((self.lr, DEFAULT_LR), (self.bayes_lr, DEFAULT_BAYES_LR)):
            missing = set(names) - set(table)
            if missing:
                raise ConfigurationError(f"missing learning rates: {sorted(missing)}")
            if any(not v >= 0 for v in table.values()):
                raise ConfigurationError("learning rates must be non-negative")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["weights"] = {f.name: getattr(self.weights, f.name) for f in fields(self.weights)}
        out["lr"], out["bayes_lr"] = dict(self.lr), dict(self.bayes_lr)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


# --- Adam ------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Per-group first/second moments and step counters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def ensure(self, name: str, shape) -> None:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
            self.t[name] = 0
        elif self.m[name].shape != tuple(shape):
            raise ContractError(f"moment shape {self.m[name].shape} != parameter shape {tuple(shape)} for {name!r}")

    def remap(self, sources: np.ndarray) -> None:
        """Follow a kernel re-indexing; entries with source -1 start with zero moments."""
        keep = sources >= 0
        for name in list(self.m):
            for table in (self.m, self.v):
                old = table[name]
                new = np.zeros((sources.size,) + old.shape[1:])
                new[keep] = old[sources[keep]]
                table[name] = new


def step(params: dict, grads: dict, state: OptimizerState, lr: dict) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays, updates ``state`` in place."""
    b1, b2 = ADAM_BETAS
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter group {name!r}")
        state.ensure(name, p.shape)
        state.t[name] += 1
        t = state.t[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        out[name] = p - lr[name] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out


# --- densification -----------------------------------------------------------

@dataclass
class GradStats:
    """Running sum of per-view positional-gradient norms and visibility counts."""

    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "GradStats":
        return cls(np.zeros(k), np.zeros(k, dtype=np.int64))

    def add(self, mean_grad: np.ndarray, visible: np.ndarray) -> None:
        self.accum[visible] += np.linalg.norm(mean_grad[visible], axis=-1)
        self.count[visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)


@dataclass
class Thresholds:
    tau_grad: float = 2e-4
    tau_prune: float = 5e-3
    tau_scale: float = 0.01
    max_kernels: int = 100000


@dataclass
class DensifyResult:
    scene: Scene
    sources: np.ndarray  # old index per new kernel, -1 for freshly created ones
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def densify_and_prune(scene: Scene, grad_stats: GradStats, thresholds: Thresholds,
                      rng: Optional[np.random.Generator] = None) -> DensifyResult:
    """Clone small high-gradient kernels, split large ones, drop near-transparent ones."""
    rng = np.random.default_rng(0) if rng is None else rng
    k = len(scene)
    hot = grad_stats.mean() > thresholds.tau_grad
    big = np.exp(scene.log_scales).max(axis=1) > thresholds.tau_scale
    clone = hot & ~big
    split = hot & big
    budget = max(0, thresholds.max_kernels - k)
    # each clone or split adds one kernel; lowest index first when over budget
    cand = np.flatnonzero(clone | split)[:budget]
    clone &= np.isin(np.arange(k), cand)
    split &= np.isin(np.arange(k), cand)

    keep = ~split
    parts = {
        "means": [scene.means[keep]], "log_scales": [scene.log_scales[keep]],
        "rotations": [scene.rotations[keep]], "opacity_logits": [scene.opacity_logits[keep]],
        "sh": [scene.sh[keep]],
    }
    sources = [np.flatnonzero(keep)]
    idx = np.flatnonzero(clone)
    for name in parts:
        parts[name].append(getattr(scene, name)[idx])
    sources.append(np.full(idx.size, -1))
    idx = np.flatnonzero(split)
    if idx.size:
        scales = np.exp(scene.log_scales[idx])
        rots = np.stack([quat_to_rotmat(q) for q in scene.rotations[idx]])
        samples = rng.standard_normal((2, idx.size, 3)) * scales[None]
        offsets = np.einsum("kij,skj->ski", rots, samples)
        parts["means"].append((scene.means[idx][None] + offsets).reshape(-1, 3))
        parts["log_scales"].append(np.tile(scene.log_scales[idx] - np.log(SPLIT_SCALE), (2, 1)))
        parts["rotations"].append(np.tile(scene.rotations[idx], (2, 1)))
        parts["opacity_logits"].append(np.tile(scene.opacity_logits[idx], 2))
        parts["sh"].append(np.tile(scene.sh[idx], (2, 1, 1)))
        sources.append(np.full(2 * idx.size, -1))
    merged = {name: np.concatenate(v) for name, v in parts.items()}
    sources = np.concatenate(sources)

    alive = sigmoid(merged["opacity_logits"]) >= thresholds.tau_prune
    if not alive.any():
        alive[np.argmax(merged["opacity_logits"])] = True
    out = Scene(**{name: v[alive] for name, v in merged.items()}, sh_degree=scene.sh_degree)
    return DensifyResult(out, sources[alive], int(clone.sum()), int(split.sum()), int((~alive).sum()))


# --- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    model: VariationalScene
    log: list
    phase: str
    iteration: int
    prior_scene: Scene


def _seed_stream(seed: int, *words: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**63, *words]))


def iteration_noise_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed) % 2**63, 2, iteration]).generate_state(1, np.uint64)[0])


def scene_extent(cameras) -> float:
    """Radius of the camera centers around their mean, padded by 10%."""
    centers = np.stack([c.center for c in cameras])
    return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(0), axis=1)))


def perturb_scene(scene: Scene, rng: np.random.Generator, scale: float = 1.0) -> Scene:
    """Gaussian jitter on every kernel field, for perturbed-ground-truth starts."""
    k = len(scene)
    size = float(np.exp(scene.log_scales).mean())
    return Scene(
        scene.means + scale * 0.25 * size * rng.standard_normal((k, 3)),
        scene.log_scales + scale * 0.2 * rng.standard_normal((k, 3)),
        scene.rotations + scale * 0.1 * rng.standard_normal((k, 4)),
        scene.opacity_logits + scale * 0.3 * rng.standard_normal(k),
        scene.sh + scale * 0.1 * rng.standard_normal(scene.sh.shape),
        scene.sh_degree,
    )


def random_init(box_min, box_max, n: int, rng: np.random.Generator, sh_degree: int = 1) -> Scene:
    """Uniform points in a box with small isotropic kernels and grey color."""
    box_min, box_max = np.asarray(box_min, float), np.asarray(box_max, float)
    diag = float(np.linalg.norm(box_max - box_min))
    sh = np.zeros((n, 3, num_sh_basis(sh_degree)))
    sh[:, :, 0] = 0.5 / 0.28209479177387814
    return Scene(
        rng.uniform(box_min, box_max, (n, 3)),
        np.full((n, 3), np.log(0.05 * diag)),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full(n, -1.0),
        sh, sh_degree,
    )


def _check_dataset(dataset) -> None:
    if dataset is None or len(dataset.train) == 0:
        raise ContractError("training needs a dataset with at least one training view")
    if len(dataset.train) < 2:
        raise ContractError("training needs at least two posed training views")


class _ViewSampler:
    def __init__(self, n: int, seed: int):
        self.n, self.rng, self.queue = n, _seed_stream(seed, 0), []

    def next(self) -> int:
        if not self.queue:
            self.queue = list(self.rng.permutation(self.n))
        return int(self.queue.pop(0))


def _write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r["iter"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


def _abort(it: int, view: int, graph: LossGraph, err: Exception):
    parts = {k: float(v.detach()) for k, v in graph.nodes.items() if v.dim() == 0}
    raise NonFiniteError(f"training aborted at iteration {it} (view {view}): {err}; terms {parts}") from err


def _deterministic_iteration(scene, view, config, it):
    cam, gt = view
    p = scene_tensors(scene)
    for t in p.values():
        t.requires_grad_(True)
    diag = {}
    rgb, _, _, order = render_tensors(p["mean"], p["log_scale"], p["rotation"], p["opacity_logit"],
                                      p["sh"], cam, scene.sh_degree, cull=config.cull, diagnostics=diag)
    gt_t = torch.from_numpy(gt)
    total, parts = total_loss_t(rgb.unsqueeze(0), gt_t, None, config.weights, config.bins)
    graph = LossGraph(total, p, {"samples": rgb, **parts})
    visible = np.zeros(len(scene), dtype=bool)
    visible[order] = True
    return graph, rgb.detach().numpy(), visible


def _bayesian_iteration(vs, params, view, config, it):
    cam, gt = view
    seed = iteration_noise_seed(config.seed, it)
    nb = num_sh_basis(vs.sh_degree)
    noises = [draw_noise(seed, s, len(vs), nb) for s in range(config.mc_samples)]
    samples = render_samples_t(params, vs.sh_degree, cam, config.mc_samples, seed,
                               cull=config.cull, noises=noises)
    kl = kl_loss_t(params, vs.prior)
    total, parts = total_loss_t(samples, torch.from_numpy(gt), kl, config.weights, config.bins)
    graph = LossGraph(total, params, {"samples": samples, **parts})
    return graph, samples.detach().numpy().mean(axis=0)


def train(dataset, config: TrainConfig, init: Optional[Scene] = None, log_path=None,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run both phases and return the trained variational scene plus the loss log.

    Args:
        dataset: a `DatasetManifest` with at least two training views.
        config: training hyperparameters.
        init: starting scene; perturbed by ``config.init_perturb``. Without one,
            ``config.init_kernels`` random kernels fill the dataset's scene box.
        log_path: optional CSV destination for the per-iteration log.
        callback: called with each log row.
    """
    _check_dataset(dataset)
    config.validate()
    views = [(cam, np.asarray(img, dtype=np.float64)) for cam, img in dataset.train_views()]
    init_rng = _seed_stream(config.seed, 3)
    if init is None:
        lo, hi = dataset.scene_box()
        scene = random_init(lo, hi, config.init_kernels, init_rng)
    else:
        scene = perturb_scene(init, init_rng, config.init_perturb) if config.init_perturb else init.copy()
    sampler = _ViewSampler(len(views), config.seed)
    densify_rng = _seed_stream(config.seed, 1)
    thresholds = Thresholds(config.tau_grad, config.tau_prune,
                            config.percent_dense * scene_extent([c for c, _ in views]), config.max_kernels)

    rows = []
    opt = OptimizerState()
    stats = GradStats.zeros(len(scene))

    def record(it, graph, image, gt):
        row = {"iter": it, **{k: float(graph.nodes[k].detach()) for k in LOG_COLUMNS[1:6]},
               "psnr_train": psnr(np.clip(image, 0, 1), gt)}
        rows.append(row)
        if callback is not None:
            callback(row)

    names = tuple(DEFAULT_LR)
    for it in range(config.warmup_iters):
        vi = sampler.next()
        graph, image, visible = _deterministic_iteration(scene, views[vi], config, it)
        if not np.isfinite(float(graph.loss.detach())):
            _abort(it, vi, graph, NonFiniteError("non-finite loss"))
        try:
            grads = backward(graph)
        except NonFiniteError as err:
            _abort(it, vi, graph, err)
        record(it, graph, image, views[vi][1])
        stats.add(grads["mean"], visible)
        arrays = {"mean": scene.means, "sh": scene.sh, "opacity_logit": scene.opacity_logits,
                  "log_scale": scene.log_scales, "rotation": scene.rotations}
        new = step(arrays, grads, opt, config.lr)
        scene = Scene(new["mean"], new["log_scale"], new["rotation"], new["opacity_logit"], new["sh"],
                      scene.sh_degree)
        done = it + 1
        if (config.densify_from <= done <= config.densify_until and done % config.densify_interval == 0
                and done < config.warmup_iters):
            res = densify_and_prune(scene, stats, thresholds, densify_rng)
            log.debug("iter %d: cloned %d split %d pruned %d -> K=%d", done, res.n_cloned,
                      res.n_split, res.n_pruned, len(res.scene))
            scene = res.scene
            opt.remap(res.sources)
            stats = GradStats.zeros(len(scene))

    # Empirical Bayes switch
    prior_scene = scene.copy()
    vs = VariationalScene.from_scene(prior_scene)
    phase = "deterministic"
    params = vs.tensors()
    bopt = OptimizerState()
    for it in range(config.warmup_iters, config.total_iters):
        phase = "bayesian"
        vi = sampler.next()
        for t in params.values():
            t.requires_grad_(True)
        graph, image = _bayesian_iteration(vs, params, views[vi], config, it)
        if not np.isfinite(float(graph.loss.detach())):
            _abort(it, vi, graph, NonFiniteError("non-finite loss"))
        try:
            grads = backward(graph)
        except NonFiniteError as err:
            _abort(it, vi, graph, err)
        record(it, graph, image, views[vi][1])
        arrays = {k: v.detach().numpy() for k, v in params.items()}
        params = {k: torch.from_numpy(v) for k, v in step(arrays, grads, bopt, config.bayes_lr).items()}
    if phase == "bayesian":
        vs = vs.with_tensors(params)
    if not vs.prior.frozen:
        raise StateError("prior was unfrozen during training")
    if log_path is not None:
        _write_log(log_path, rows)
    return TrainResult(vs, rows, phase, config.total_iters, prior_scene)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    """Copy of ``config`` with top-level fields or loss weights replaced (None entries ignored)."""
    kw = {k: v for k, v in kw.items() if v is not None}
    weight_keys = {f.name for f in fields(LossWeights)}
    w = {k: kw.pop(k) for k in list(kw) if k in weight_keys}
    out = replace(config, **kw)
    if w:
        out = replace(out, weights=replace(out.weights, **w))
    return out


__all__ = [
    "TrainConfig", "OptimizerState", "GradStats", "Thresholds", "DensifyResult", "TrainResult",
    "step", "densify_and_prune", "train", "perturb_scene", "random_init", "scene_extent",
    "with_overrides", "iteration_noise_seed",
]
