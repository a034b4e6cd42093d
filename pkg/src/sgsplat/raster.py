"""Alpha-compositing rasterizer with a hand-written backward pass.

The compiled ``_raster_ext`` core is used when it imports; otherwise the
dense numpy kernels in ``_raster_py`` are used. Set ``SGS_BACKEND=python``
to force the fallback.
"""
import os

import numpy as np
import torch

from . import _raster_py

try:
    if os.environ.get("SGS_BACKEND", "").lower() == "python":
        raise ImportError("compiled backend disabled by SGS_BACKEND")
    from . import _raster_ext
except ImportError:
    _raster_ext = None

BACKENDS = {"python": _raster_py}
if _raster_ext is not None:
    BACKENDS["compiled"] = _raster_ext
DEFAULT_BACKEND = "compiled" if _raster_ext is not None else "python"


def get_backend(name=None):
    name = name or DEFAULT_BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable raster backend {name!r}; have {sorted(BACKENDS)}")


def _np(t):
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float64)


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, center, conic, opacity, sh, order, basis, width, height, cull, backend, stats):
        kernels = get_backend(backend)
        args = (_np(center), _np(conic), _np(opacity), _np(sh),
                np.ascontiguousarray(order, dtype=np.int64), basis, width, height, cull)
        color, trans, n_clamped, n_culled = kernels.forward(*args)
        stats["clamped_terms"] = stats.get("clamped_terms", 0) + n_clamped
        stats["culled_terms"] = stats.get("culled_terms", 0) + n_culled
        ctx.args = args
        ctx.kernels = kernels
        return torch.from_numpy(color), torch.from_numpy(trans)

    @staticmethod
    def backward(ctx, grad_color, grad_trans):
        gc = np.zeros((ctx.args[7], ctx.args[6], 3)) if grad_color is None else _np(grad_color)
        gt = np.zeros((ctx.args[7], ctx.args[6])) if grad_trans is None else _np(grad_trans)
        g_center, g_conic, g_opacity, g_sh = ctx.kernels.backward(*ctx.args, gc, gt)
        return (torch.from_numpy(g_center), torch.from_numpy(g_conic),
                torch.from_numpy(g_opacity), torch.from_numpy(g_sh),
                None, None, None, None, None, None, None)


def composite(center, conic, opacity, sh, order, basis, width, height,
              cull=True, backend=None, stats=None):
    """Differentiable front-to-back compositing of depth-sorted splats.

    Args:
        center: (K, 2) splat centers in pixels.
        conic: (K, 3) inverse 2D covariance entries (a, b, c).
        opacity: (K,) opacities in (0, 1).
        sh: (K, 3, B) SH coefficients.
        order: int array of kernel indices, front to back; omitted kernels
            do not contribute.
        basis: (H*W, B) SH basis evaluated at each pixel's ray direction.
        cull: skip terms whose alpha falls below 1/255.

    Returns:
        Unclamped color (H, W, 3) and final transmittance (H, W).
    """
    if stats is None:
        stats = {}
    return _Composite.apply(center, conic, opacity, sh, np.asarray(order), basis,
                            int(width), int(height), bool(cull), backend, stats)
