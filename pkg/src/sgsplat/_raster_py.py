"""Dense numpy compositing kernels (fallback when the compiled core is absent).

Every (splat, pixel) pair is evaluated; memory is O(M * H * W).
"""
import numpy as np

CULL_ALPHA = 1.0 / 255.0
MAX_ALPHA = 0.99


def _pixel_grid(width, height):
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    px = np.broadcast_to(xs[None, :], (height, width)).reshape(-1)
    py = np.broadcast_to(ys[:, None], (height, width)).reshape(-1)
    return px, py


def _terms(center, conic, opacity, sh, order, basis, width, height, cull):
    px, py = _pixel_grid(width, height)
    cen = center[order]
    a, b, c = (conic[order, i][:, None] for i in range(3))
    dx = px[None, :] - cen[:, 0:1]
    dy = py[None, :] - cen[:, 1:2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    g = np.exp(power)
    raw_alpha = opacity[order][:, None] * g
    used = raw_alpha >= CULL_ALPHA if cull else np.ones_like(raw_alpha, dtype=bool)
    clamped = used & (raw_alpha > MAX_ALPHA)
    alpha = np.where(used, np.minimum(raw_alpha, MAX_ALPHA), 0.0)
    raw_col = np.einsum("mcb,pb->mpc", sh[order], basis)
    col = np.maximum(raw_col, 0.0)
    t_incl = np.cumprod(1.0 - alpha, axis=0)
    t_excl = np.concatenate([np.ones((1, px.size)), t_incl[:-1]], axis=0)
    return dict(dx=dx, dy=dy, g=g, raw_alpha=raw_alpha, used=used, clamped=clamped,
                alpha=alpha, raw_col=raw_col, col=col, t_excl=t_excl, t_incl=t_incl)


def forward(center, conic, opacity, sh, order, basis, width, height, cull):
    """Composite sorted splats front to back.

    Returns:
        color (H, W, 3) unclamped, final transmittance (H, W),
        number of clamped terms, number of culled terms.
    """
    if order.size == 0:
        return np.zeros((height, width, 3)), np.ones((height, width)), 0, 0
    t = _terms(center, conic, opacity, sh, order, basis, width, height, cull)
    weight = t["alpha"] * t["t_excl"]
    color = np.sum(weight[..., None] * t["col"], axis=0)
    trans = t["t_incl"][-1]
    n_culled = int(t["used"].size - np.count_nonzero(t["used"]))
    return (color.reshape(height, width, 3), trans.reshape(height, width),
            int(np.count_nonzero(t["clamped"])), n_culled)


def backward(center, conic, opacity, sh, order, basis, width, height, cull,
             grad_color, grad_trans):
    """Gradients of sum(grad_color * color + grad_trans * trans) w.r.t. splat inputs."""
    k = center.shape[0]
    g_center = np.zeros((k, 2))
    g_conic = np.zeros((k, 3))
    g_opacity = np.zeros(k)
    g_sh = np.zeros_like(sh)
    if order.size == 0:
        return g_center, g_conic, g_opacity, g_sh
    t = _terms(center, conic, opacity, sh, order, basis, width, height, cull)
    gc = grad_color.reshape(-1, 3)
    gt = grad_trans.reshape(-1)
    alpha, t_excl, col = t["alpha"], t["t_excl"], t["col"]
    weight = alpha * t_excl
    contrib = weight[..., None] * col
    # colour accumulated by the terms behind each term
    behind = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib
    t_final = t["t_incl"][-1]
    inv = 1.0 / (1.0 - alpha)
    d_alpha = (np.einsum("mpc,pc->mp", t_excl[..., None] * col - behind * inv[..., None], gc)
               - gt[None, :] * t_final[None, :] * inv)
    d_raw = np.where(t["used"] & ~t["clamped"], d_alpha, 0.0)
    d_power = d_raw * t["raw_alpha"]
    a, b, c = (conic[order, i][:, None] for i in range(3))
    dx, dy = t["dx"], t["dy"]

    d_col = weight[..., None] * gc[None, :, :] * (t["raw_col"] >= 0.0)
    np.add.at(g_sh, order, np.einsum("mpc,pb->mcb", d_col, basis))
    np.add.at(g_opacity, order, np.sum(d_raw * t["g"], axis=1))
    np.add.at(g_center, order, np.stack([
        np.sum(d_power * (a * dx + b * dy), axis=1),
        np.sum(d_power * (b * dx + c * dy), axis=1),
    ], axis=1))
    np.add.at(g_conic, order, np.stack([
        np.sum(d_power * (-0.5 * dx * dx), axis=1),
        np.sum(d_power * (-dx * dy), axis=1),
        np.sum(d_power * (-0.5 * dy * dy), axis=1),
    ], axis=1))
    return g_center, g_conic, g_opacity, g_sh
