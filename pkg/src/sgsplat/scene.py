"""Scene, kernel and camera types plus the per-kernel evaluation helpers.

Arrays use float64 throughout. Quaternions are stored as (w, x, y, z).
The camera follows the look-down -z convention with +y up in camera space
and image rows growing downward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError

MAX_SH_DEGREE = 2

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def num_sh_basis(degree: int) -> int:
    return (degree + 1) ** 2


def check_sh_degree(degree: int) -> None:
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ConfigurationError(
            f"sh_degree={degree} unsupported (maximum is {MAX_SH_DEGREE})"
        )


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real spherical harmonics Y_lm evaluated at unit directions.

    Basis functions are ordered by degree, then by order m = -l..l, and
    use the sign convention common to Gaussian-splatting codebases.

    Args:
        dirs: (..., 3) unit vectors.
        degree: maximum SH degree, at most 2.

    Returns:
        (..., (degree + 1)**2) array.
    """
    check_sh_degree(degree)
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    return np.stack(out, axis=-1)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (possibly unnormalized) quaternions (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return rot.reshape(q.shape[:-1] + (3, 3))


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


@dataclass
class GaussianKernel:
    """One elliptical 3D Gaussian with opacity and SH color.

    ``sh_coeffs`` has shape (3, (L+1)**2): one row per RGB channel.
    """

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = normalize_quat(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        self.opacity_logit = float(self.opacity_logit)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64)
        if self.sh_coeffs.ndim != 2 or self.sh_coeffs.shape[0] != 3:
            raise ValueError(f"sh_coeffs must be (3, B), got {self.sh_coeffs.shape}")

    @property
    def sh_degree(self) -> int:
        degree = math.isqrt(self.sh_coeffs.shape[1]) - 1
        if num_sh_basis(degree) != self.sh_coeffs.shape[1]:
            raise ConfigurationError(f"{self.sh_coeffs.shape[1]} SH coefficients is not a square")
        return degree

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def sigmoid(x):
    # exp overflow for very negative logits correctly gives 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def _require_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("non-finite kernel or point coordinates")


def covariance_of(kernel: GaussianKernel) -> np.ndarray:
    """World-space covariance R diag(exp(2 log_scale)) R^T."""
    _require_finite(kernel.log_scale, kernel.rotation)
    rot = quat_to_rotmat(kernel.rotation)
    return (rot * np.exp(2.0 * kernel.log_scale)) @ rot.T


def eval_kernel(kernel: GaussianKernel, x) -> float:
    """Unnormalized Gaussian exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    _require_finite(x, kernel.mean, kernel.log_scale, kernel.rotation)
    rot = quat_to_rotmat(kernel.rotation)
    # Mahalanobis distance in the kernel's principal frame
    local = rot.T @ (x - kernel.mean) * np.exp(-kernel.log_scale)
    return float(np.exp(-0.5 * local @ local))


def eval_sh_color(kernel: GaussianKernel, direction) -> np.ndarray:
    """View-dependent RGB of a kernel, clamped below at zero."""
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("direction must be a unit vector")
    degree = kernel.sh_degree
    basis = sh_basis(direction, degree)
    return np.maximum(kernel.sh_coeffs @ basis, 0.0)


@dataclass
class Scene:
    """K Gaussian kernels stored as parallel arrays.

    Attributes:
        means: (K, 3)
        log_scales: (K, 3)
        rotations: (K, 4) quaternions (w, x, y, z)
        opacity_logits: (K,)
        sh: (K, 3, B) with B = (sh_degree + 1)**2
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = 1

    def __post_init__(self):
        check_sh_degree(self.sh_degree)
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        k = self.means.shape[0]
        if k < 1:
            raise ConfigurationError("a scene needs at least one kernel")
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(k, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(k, 4)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(k)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64).reshape(
            k, 3, num_sh_basis(self.sh_degree)
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def kernels(self) -> list[GaussianKernel]:
        return [self.kernel(i) for i in range(len(self))]

    def kernel(self, i: int) -> GaussianKernel:
        return GaussianKernel(
            self.means[i], self.log_scales[i], self.rotations[i],
            self.opacity_logits[i], self.sh[i],
        )

    @classmethod
    def from_kernels(cls, kernels: list[GaussianKernel]) -> "Scene":
        if not kernels:
            raise ConfigurationError("a scene needs at least one kernel")
        degrees = {k.sh_degree for k in kernels}
        if len(degrees) != 1:
            raise ConfigurationError(f"kernels disagree on sh_degree: {sorted(degrees)}")
        return cls(
            means=np.stack([k.mean for k in kernels]),
            log_scales=np.stack([k.log_scale for k in kernels]),
            rotations=np.stack([k.rotation for k in kernels]),
            opacity_logits=np.array([k.opacity_logit for k in kernels]),
            sh=np.stack([k.sh_coeffs for k in kernels]),
            sh_degree=degrees.pop(),
        )

    def copy(self) -> "Scene":
        return Scene(
            self.means.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.opacity_logits.copy(), self.sh.copy(), self.sh_degree,
        )


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform x_c = R x_w + t."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point outside the image")

    @classmethod
    def from_matrix(cls, fx, fy, cx, cy, width, height, world_to_camera) -> "Camera":
        m = np.asarray(world_to_camera, dtype=np.float64).reshape(3, 4)
        return cls(fx, fy, cx, cy, width, height, m[:, :3], m[:, 3])

    @property
    def world_to_camera(self) -> np.ndarray:
        """Row-major 3x4 [R | t]."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def ray_directions(self) -> np.ndarray:
        """World-space unit ray directions through every pixel center, (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = -(np.arange(self.height) + 0.5 - self.cy) / self.fy
        d = np.stack(np.broadcast_arrays(u[None, :], v[:, None], -1.0), axis=-1)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.rotation


def pixel_ray(camera: Camera, px) -> tuple[np.ndarray, np.ndarray]:
    """Origin and unit direction of the ray through pixel (column, row)."""
    col, row = int(px[0]), int(px[1])
    if not (0 <= col < camera.width and 0 <= row < camera.height):
        raise IndexError(f"pixel {(col, row)} outside {camera.width}x{camera.height} image")
    d = np.array([
        (col + 0.5 - camera.cx) / camera.fx,
        -(row + 0.5 - camera.cy) / camera.fy,
        -1.0,
    ])
    d /= np.linalg.norm(d)
    return camera.center, camera.rotation.T @ d


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    # camera axes expressed in world coordinates: x=right, y=up, z=-forward
    rot = np.stack([right, true_up, -forward])
    return rot, -rot @ eye
