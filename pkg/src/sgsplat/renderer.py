"""Deterministic splat rendering and an independent per-pixel reference."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from . import raster
from .projection import DILATION, MAX_CONDITION, NEAR_PLANE, covariance_t, project_tensors, sort_valid
from .scene import Camera, ConfigurationError, Scene, sh_basis

_MAX_ALPHA = 0.99


@dataclass
class RenderOutput:
    rgb: np.ndarray
    final_transmittance: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@lru_cache(maxsize=64)
def _pixel_basis(key, degree):
    camera = Camera.from_matrix(*key[:6], np.array(key[6]))
    dirs = camera.ray_directions().reshape(-1, 3)
    basis = np.ascontiguousarray(sh_basis(dirs, degree))
    basis.setflags(write=False)
    return basis


def pixel_basis(camera: Camera, degree: int) -> np.ndarray:
    """SH basis at every pixel's world-space ray direction, (H*W, B), row-major pixels."""
    key = (camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height,
           tuple(map(float, camera.world_to_camera.reshape(-1))))
    return _pixel_basis(key, degree)


def render_tensors(means, log_scales, rotations, opacity_logits, sh, camera: Camera,
                   sh_degree: int, cull=True, backend=None, diagnostics=None):
    """Differentiable render of one set of kernel parameters.

    Returns the clamped (H, W, 3) image, unclamped color and final
    transmittance (H, W) as torch tensors, plus the front-to-back order.
    """
    if means.shape[0] < 1:
        raise ConfigurationError("cannot render an empty scene")
    diag = {} if diagnostics is None else diagnostics
    cov3d = covariance_t(log_scales, rotations)
    proj = project_tensors(means, cov3d, camera)
    order = sort_valid(proj.depth, proj.valid)
    diag["skipped_splats"] = diag.get("skipped_splats", 0) + int(means.shape[0] - order.size)
    diag["singular_splats"] = diag.get("singular_splats", 0) + proj.n_singular
    diag.setdefault("orders", []).append(order)
    color, trans = raster.composite(
        proj.center, proj.conic, torch.sigmoid(opacity_logits), sh, order,
        pixel_basis(camera, sh_degree), camera.width, camera.height,
        cull=cull, backend=backend, stats=diag,
    )
    return color.clamp(0.0, 1.0), color, trans, order


def scene_tensors(scene: Scene) -> dict:
    return {
        "mean": torch.from_numpy(scene.means.copy()),
        "log_scale": torch.from_numpy(scene.log_scales.copy()),
        "rotation": torch.from_numpy(scene.rotations.copy()),
        "opacity_logit": torch.from_numpy(scene.opacity_logits.copy()),
        "sh": torch.from_numpy(scene.sh.copy()),
    }


def render(scene: Scene, camera: Camera, cull=True, backend=None) -> RenderOutput:
    """Render ``scene`` through ``camera`` over a black background."""
    t = scene_tensors(scene)
    diag = {}
    with torch.no_grad():
        rgb, _, trans, _ = render_tensors(
            t["mean"], t["log_scale"], t["rotation"], t["opacity_logit"], t["sh"],
            camera, scene.sh_degree, cull=cull, backend=backend, diagnostics=diag,
        )
    diag.pop("orders", None)
    return RenderOutput(rgb.numpy(), trans.numpy(), diag)


def _scalar_sh(x, y, z, degree):
    vals = [0.28209479177387814]
    if degree >= 1:
        c1 = 0.4886025119029199
        vals += [-c1 * y, c1 * z, -c1 * x]
    if degree >= 2:
        vals += [
            1.0925484305920792 * x * y,
            -1.0925484305920792 * y * z,
            0.31539156525252005 * (2 * z * z - x * x - y * y),
            -1.0925484305920792 * x * z,
            0.5462742152960396 * (x * x - y * y),
        ]
    return vals


def render_reference(scene: Scene, camera: Camera) -> RenderOutput:
    """Straight-line per-pixel evaluation of the compositing sum.

    Shares no code with `render` beyond the input types: projection,
    covariance, sorting and SH are recomputed here in scalar arithmetic,
    and no contribution culling is applied.
    """
    if len(scene) < 1:
        raise ConfigurationError("cannot render an empty scene")
    rw = camera.rotation.tolist()
    tw = camera.translation.tolist()
    splats = []
    skipped = 0
    for k in range(len(scene)):
        w, qx, qy, qz = scene.rotations[k].tolist()
        n = math.sqrt(w * w + qx * qx + qy * qy + qz * qz)
        w, qx, qy, qz = w / n, qx / n, qy / n, qz / n
        r = [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - w * qz), 2 * (qx * qz + w * qy)],
            [2 * (qx * qy + w * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - w * qx)],
            [2 * (qx * qz - w * qy), 2 * (qy * qz + w * qx), 1 - 2 * (qx * qx + qy * qy)],
        ]
        var = [math.exp(2 * s) for s in scene.log_scales[k].tolist()]
        sigma = [[sum(r[i][m] * var[m] * r[j][m] for m in range(3)) for j in range(3)] for i in range(3)]
        mu = scene.means[k].tolist()
        xc = [sum(rw[i][j] * mu[j] for j in range(3)) + tw[i] for i in range(3)]
        depth = -xc[2]
        if not depth > NEAR_PLANE:
            skipped += 1
            continue
        jac = [
            [camera.fx / depth, 0.0, camera.fx * xc[0] / depth ** 2],
            [0.0, -camera.fy / depth, -camera.fy * xc[1] / depth ** 2],
        ]
        jw = [[sum(jac[i][m] * rw[m][j] for m in range(3)) for j in range(3)] for i in range(2)]
        tmp = [[sum(jw[i][m] * sigma[m][j] for m in range(3)) for j in range(3)] for i in range(2)]
        cov = [[sum(tmp[i][m] * jw[j][m] for m in range(3)) for j in range(2)] for i in range(2)]
        a, b, c = cov[0][0] + DILATION, 0.5 * (cov[0][1] + cov[1][0]), cov[1][1] + DILATION
        det = a * c - b * b
        half = 0.5 * (a + c)
        disc = math.sqrt(max(half * half - det, 0.0))
        if not (half - disc > 0 and half + disc <= MAX_CONDITION * (half - disc)):
            skipped += 1
            continue
        center = (camera.cx + camera.fx * xc[0] / depth, camera.cy - camera.fy * xc[1] / depth)
        opacity = 1.0 / (1.0 + math.exp(-float(scene.opacity_logits[k])))
        splats.append((depth, k, center, (c / det, -b / det, a / det), opacity, scene.sh[k].tolist()))
    splats.sort(key=lambda s: (s[0], s[1]))

    h, wd = camera.height, camera.width
    rgb = np.zeros((h, wd, 3))
    trans = np.ones((h, wd))
    rot_t = camera.rotation.T.tolist()
    n_clamped = 0
    for row in range(h):
        for col in range(wd):
            du = (col + 0.5 - camera.cx) / camera.fx
            dv = -(row + 0.5 - camera.cy) / camera.fy
            norm = math.sqrt(du * du + dv * dv + 1.0)
            dcam = (du / norm, dv / norm, -1.0 / norm)
            dw = [sum(rot_t[i][j] * dcam[j] for j in range(3)) for i in range(3)]
            ylm = _scalar_sh(dw[0], dw[1], dw[2], scene.sh_degree)
            px, py = col + 0.5, row + 0.5
            t = 1.0
            acc = [0.0, 0.0, 0.0]
            for _, _, center, (ca, cb, cc), opacity, coeffs in splats:
                dx, dy = px - center[0], py - center[1]
                alpha = opacity * math.exp(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy)
                if alpha > _MAX_ALPHA:
                    alpha = _MAX_ALPHA
                    n_clamped += 1
                for ch in range(3):
                    value = sum(coeffs[ch][i] * ylm[i] for i in range(len(ylm)))
                    acc[ch] += alpha * t * max(value, 0.0)
                t *= 1.0 - alpha
            rgb[row, col] = [min(max(v, 0.0), 1.0) for v in acc]
            trans[row, col] = t
    return RenderOutput(rgb, trans, {"skipped_splats": skipped, "clamped_terms": n_clamped})
