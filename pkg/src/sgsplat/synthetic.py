"""Random ground-truth scenes rendered into posed-image datasets."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigurationError
from .io import Checkpoint, DatasetManifest, View, save_checkpoint, save_dataset, to_uint8
from .renderer import render_reference
from .scene import SH_C0, Camera, Scene, logit, look_at

GT_CHECKPOINT = "ground_truth.sgsckpt"


@dataclass
class SynthSpec:
    """Generator parameters.

    Attributes:
        n_kernels: ground-truth kernel count K.
        box_min, box_max: world-space extents kernels are sampled in.
        n_train, n_test: views per split; test views sit between train views.
        layout: "ring" (full circle) or "arc" (``arc_degrees`` wide, all
            views facing roughly the same way, so image halves map to
            consistent world halves).
        radius: camera distance from ``look_at``; defaults to 3.5 box diagonals.
        elevation_degrees: camera height angle above the box center.
        noise_std: pixel noise std, or a (left half, right half) pair.
    """

    n_kernels: int = 16
    box_min: tuple = (-0.5, -0.5, -0.5)
    box_max: tuple = (0.5, 0.5, 0.5)
    n_train: int = 8
    n_test: int = 1
    layout: str = "ring"
    arc_degrees: float = 60.0
    radius: Optional[float] = None
    look_at: Optional[tuple] = None
    elevation_degrees: float = 20.0
    width: int = 64
    height: int = 64
    fov_degrees: float = 40.0
    seed: int = 0
    noise_std: Union[float, tuple] = 0.0

    def validate(self) -> None:
        lo, hi = np.asarray(self.box_min, float), np.asarray(self.box_max, float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
            raise ConfigurationError("degenerate bounding box: need box_max > box_min on every axis")
        if self.n_kernels < 1:
            raise ConfigurationError("n_kernels must be at least 1")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigurationError("need at least one training view")
        if self.layout not in ("ring", "arc"):
            raise ConfigurationError("layout must be 'ring' or 'arc'")
        if self.width < 1 or self.height < 1 or not 0 < self.fov_degrees < 180:
            raise ConfigurationError("invalid image size or field of view")
        if self.radius is not None and self.radius <= 0:
            raise ConfigurationError("radius must be positive")
        if any(s < 0 for s in self.noise_pair()):
            raise ConfigurationError("noise_std must be non-negative")

    def noise_pair(self) -> tuple:
        if np.ndim(self.noise_std) == 0:
            return float(self.noise_std), float(self.noise_std)
        left, right = self.noise_std
        return float(left), float(right)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(np.subtract(self.box_max, self.box_min)))

    @property
    def center(self) -> np.ndarray:
        if self.look_at is not None:
            return np.asarray(self.look_at, float)
        return 0.5 * (np.asarray(self.box_min, float) + np.asarray(self.box_max, float))


@dataclass
class SynthResult:
    scene: Scene
    manifest: DatasetManifest
    clean_images: list  # unquantized, noise-free renders per view


def random_scene(spec: SynthSpec, rng: np.random.Generator) -> Scene:
    k, diag = spec.n_kernels, spec.diagonal
    means = rng.uniform(spec.box_min, spec.box_max, (k, 3))
    scales = diag * np.exp(rng.uniform(np.log(0.05), np.log(0.3), (k, 3)))
    q = rng.standard_normal((k, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    opacity = rng.uniform(0.3, 0.95, k)
    sh = np.zeros((k, 3, 4))
    sh[:, :, 0] = rng.uniform(0.15, 0.85, (k, 3)) / SH_C0
    sh[:, :, 1:] = rng.normal(0.0, 0.15, (k, 3, 3))
    return Scene(means, np.log(scales), q, logit(opacity), sh, sh_degree=1)


def ring_cameras(spec: SynthSpec) -> list[Camera]:
    n = spec.n_train + spec.n_test
    radius = spec.radius if spec.radius is not None else 3.5 * spec.diagonal
    if spec.layout == "ring":
        angles = 2 * math.pi * np.arange(n) / n
    else:
        half = math.radians(spec.arc_degrees) / 2
        angles = np.linspace(-half, half, n) if n > 1 else np.zeros(1)
    elev = math.radians(spec.elevation_degrees)
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_degrees) / 2)
    target = spec.center
    cams = []
    for a in angles:
        # arc views sit on the -y side looking toward +y
        eye = target + radius * np.array([math.sin(a) * math.cos(elev), -math.cos(a) * math.cos(elev),
                                          math.sin(elev)])
        rot, t = look_at(eye, target)
        cams.append(Camera(f, f, spec.width / 2, spec.height / 2, spec.width, spec.height, rot, t))
    return cams


def held_out_indices(n_train: int, n_test: int) -> list[int]:
    n = n_train + n_test
    if n_test == 0:
        return []
    return sorted({int(round(x)) for x in np.linspace(0, n - 1, n_test + 2)[1:-1]})


def pixel_noise_std(spec: SynthSpec) -> np.ndarray:
    """Per-pixel noise std map, (H, W); columns left of center get the first value."""
    left, right = spec.noise_pair()
    cols = np.arange(spec.width) < spec.width / 2
    return np.broadcast_to(np.where(cols, left, right)[None, :], (spec.height, spec.width)).copy()


def generate(spec: SynthSpec, out_dir=None) -> SynthResult:
    """Sample a scene, render every view with the reference renderer, optionally write it to disk.

    Images are stored 8-bit; with zero noise they equal the quantized
    reference renders exactly.
    """
    spec.validate()
    scene = random_scene(spec, np.random.default_rng(np.random.SeedSequence([spec.seed, 0])))
    cams = ring_cameras(spec)
    tests = set(held_out_indices(spec.n_train, spec.n_test))
    # keep the split sizes exact when rounding collides
    if len(tests) < spec.n_test:
        tests |= set(range(len(cams) - (spec.n_test - len(tests)), len(cams)))
    std = pixel_noise_std(spec)[..., None]
    views, clean = [], []
    for i, cam in enumerate(cams):
        rgb = render_reference(scene, cam).rgb
        clean.append(rgb)
        img = rgb
        if np.any(std > 0):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 10, i]))
            img = np.clip(rgb + std * rng.standard_normal(rgb.shape), 0.0, 1.0)
        img = to_uint8(img).astype(np.float64) / 255.0
        views.append(View(f"images/{i:03d}.png", cam, "test" if i in tests else "train", img))
    box = (np.asarray(spec.box_min, float), np.asarray(spec.box_max, float))
    manifest = DatasetManifest(views, None if out_dir is None else Path(out_dir), box)
    if out_dir is not None:
        save_dataset(manifest, out_dir)
        save_checkpoint(Path(out_dir) / GT_CHECKPOINT, Checkpoint(scene, "deterministic", None, 0, spec.seed))
    return SynthResult(scene, manifest, clean)
