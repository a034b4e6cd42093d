"""EWA projection of 3D Gaussians to screen-space splats.

The single-kernel numpy functions are the readable contract; the batched
torch path (`project_tensors`) is what the differentiable renderer runs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .scene import Camera, GaussianKernel, covariance_of

NEAR_PLANE = 0.01
DILATION = 0.3
MAX_CONDITION = 1e12


@dataclass
class Splat2D:
    center_px: np.ndarray
    cov2d: np.ndarray
    depth: float
    kernel_index: int = 0


def projection_jacobian(cam_point: np.ndarray, camera: Camera) -> np.ndarray:
    """Jacobian of (x, y, z)_camera -> (u, v) pixels at ``cam_point``."""
    x, y, z = cam_point
    depth = -z
    return np.array([
        [camera.fx / depth, 0.0, camera.fx * x / depth**2],
        [0.0, -camera.fy / depth, -camera.fy * y / depth**2],
    ])


def project_point(cam_point: np.ndarray, camera: Camera) -> np.ndarray:
    depth = -cam_point[2]
    return np.array([
        camera.cx + camera.fx * cam_point[0] / depth,
        camera.cy - camera.fy * cam_point[1] / depth,
    ])


def project_gaussian(kernel: GaussianKernel, camera: Camera, index: int = 0) -> Optional[Splat2D]:
    """Project one kernel; None when it sits behind the near plane."""
    cam_point = camera.rotation @ kernel.mean + camera.translation
    depth = -cam_point[2]
    if not depth > NEAR_PLANE:
        return None
    jw = projection_jacobian(cam_point, camera) @ camera.rotation
    cov2d = jw @ covariance_of(kernel) @ jw.T + DILATION * np.eye(2)
    cov2d = 0.5 * (cov2d + cov2d.T)
    return Splat2D(project_point(cam_point, camera), cov2d, float(depth), index)


def splat_coefficient(splat: Splat2D, px) -> float:
    """Log-weight z = -0.5 d^T cov2d^-1 d of a splat at screen point ``px``."""
    if np.linalg.cond(splat.cov2d) > MAX_CONDITION:
        raise np.linalg.LinAlgError("splat covariance is numerically singular")
    d = np.asarray(px, dtype=np.float64) - splat.center_px
    return float(-0.5 * d @ np.linalg.solve(splat.cov2d, d))


def depth_sort(splats: list[Splat2D]) -> list[int]:
    """Stable front-to-back order; ties keep kernel order."""
    depths = np.array([s.depth for s in splats], dtype=np.float64)
    if not np.all(np.isfinite(depths)):
        raise ValueError("non-finite splat depth")
    keys = [(s.depth, s.kernel_index, i) for i, s in enumerate(splats)]
    return [k[2] for k in sorted(keys)]


def quat_to_rotmat_t(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rot = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return rot.reshape(q.shape[:-1] + (3, 3))


def covariance_t(log_scales: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    rot = quat_to_rotmat_t(rotations)
    return (rot * torch.exp(2.0 * log_scales).unsqueeze(-2)) @ rot.transpose(-1, -2)


@dataclass
class ProjectedSplats:
    """Batched projection result for K kernels (torch tensors)."""

    center: torch.Tensor   # (K, 2)
    conic: torch.Tensor    # (K, 3) entries (a, b, c) of the inverse 2D covariance
    cov2d: torch.Tensor    # (K, 2, 2)
    depth: torch.Tensor    # (K,)
    valid: np.ndarray      # (K,) bool; near-plane and conditioning tests passed
    n_singular: int


def project_tensors(means: torch.Tensor, cov3d: torch.Tensor, camera: Camera) -> ProjectedSplats:
    rot = torch.as_tensor(camera.rotation, dtype=means.dtype)
    cam = means @ rot.T + torch.as_tensor(camera.translation, dtype=means.dtype)
    x, y, z = cam.unbind(-1)
    depth = -z
    in_front = (depth > NEAR_PLANE).detach().numpy()
    # culled kernels still flow through the graph; keep their arithmetic finite
    safe_depth = torch.where(depth > NEAR_PLANE, depth, torch.ones_like(depth))
    inv_d = 1.0 / safe_depth
    zeros = torch.zeros_like(x)
    jac = torch.stack(
        [
            torch.stack([camera.fx * inv_d, zeros, camera.fx * x * inv_d**2], -1),
            torch.stack([zeros, -camera.fy * inv_d, -camera.fy * y * inv_d**2], -1),
        ],
        dim=-2,
    )
    jw = jac @ rot
    cov2d = jw @ cov3d @ jw.transpose(-1, -2)
    cov2d = 0.5 * (cov2d + cov2d.transpose(-1, -2))
    cov2d = cov2d + DILATION * torch.eye(2, dtype=means.dtype)
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    center = torch.stack([camera.cx + camera.fx * x * inv_d, camera.cy - camera.fy * y * inv_d], -1)

    with torch.no_grad():
        half_tr = 0.5 * (a + c)
        disc = torch.sqrt(torch.clamp(half_tr**2 - det, min=0.0))
        lam_max, lam_min = half_tr + disc, half_tr - disc
        well_conditioned = (lam_min > 0) & (lam_max <= MAX_CONDITION * lam_min)
        finite = torch.isfinite(conic).all(-1) & torch.isfinite(center).all(-1)
    ok = well_conditioned.numpy() & finite.numpy()
    n_singular = int(np.sum(in_front & ~ok))
    return ProjectedSplats(center, conic, cov2d, depth, in_front & ok, n_singular)


def sort_valid(depth: torch.Tensor, valid: np.ndarray) -> np.ndarray:
    """Indices of valid splats in stable ascending depth order."""
    idx = np.flatnonzero(valid)
    d = depth.detach().numpy()[idx]
    return idx[np.argsort(d, kind="stable")].astype(np.int64)
