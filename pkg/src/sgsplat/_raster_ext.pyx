# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel compositing kernels; same contract as ``_raster_py``."""
import numpy as np
from libc.math cimport exp, log, sqrt, fabs, INFINITY

cdef double CULL_ALPHA = 1.0 / 255.0
cdef double MAX_ALPHA = 0.99


cdef void _radii(const double[:, ::1] conic, const double[::1] opacity,
                 const long long[::1] order, bint cull, double[::1] radius) noexcept nogil:
    # Beyond this Chebyshev radius every term is below the cull threshold.
    cdef Py_ssize_t j, k
    cdef double a, b, c, half, disc, lam_min, level
    for j in range(order.shape[0]):
        k = order[j]
        radius[j] = INFINITY
        if not cull:
            continue
        level = 255.0 * opacity[k]
        if level < 1.0:
            radius[j] = -1.0
            continue
        a = conic[k, 0]
        b = conic[k, 1]
        c = conic[k, 2]
        half = 0.5 * (a + c)
        disc = sqrt(0.25 * (a - c) * (a - c) + b * b)
        lam_min = half - disc
        if lam_min > 0.0:
            radius[j] = sqrt(2.0 * log(level) / lam_min) * (1.0 + 1e-6) + 1e-6


def forward(const double[:, ::1] center, const double[:, ::1] conic,
            const double[::1] opacity, const double[:, :, ::1] sh,
            const long long[::1] order, const double[:, ::1] basis,
            int width, int height, bint cull):
    cdef Py_ssize_t m = order.shape[0]
    cdef Py_ssize_t nb = basis.shape[1]
    color_arr = np.zeros((height, width, 3))
    trans_arr = np.ones((height, width))
    radius_arr = np.empty(m)
    cdef double[:, :, ::1] color = color_arr
    cdef double[:, ::1] trans = trans_arr
    cdef double[::1] radius = radius_arr
    cdef Py_ssize_t x, y, j, k, ch, bi, p
    cdef double px, py, dx, dy, power, raw_alpha, alpha, t, w, raw
    cdef long long n_clamped = 0, n_culled = 0
    with nogil:
        _radii(conic, opacity, order, cull, radius)
        for y in range(height):
            py = y + 0.5
            for x in range(width):
                px = x + 0.5
                p = y * width + x
                t = 1.0
                for j in range(m):
                    k = order[j]
                    dx = px - center[k, 0]
                    dy = py - center[k, 1]
                    if fabs(dx) > radius[j] or fabs(dy) > radius[j]:
                        n_culled += 1
                        continue
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    raw_alpha = opacity[k] * exp(power)
                    if cull and raw_alpha < CULL_ALPHA:
                        n_culled += 1
                        continue
                    alpha = raw_alpha
                    if raw_alpha > MAX_ALPHA:
                        alpha = MAX_ALPHA
                        n_clamped += 1
                    w = alpha * t
                    for ch in range(3):
                        raw = 0.0
                        for bi in range(nb):
                            raw = raw + sh[k, ch, bi] * basis[p, bi]
                        if raw > 0.0:
                            color[y, x, ch] += w * raw
                    t = t * (1.0 - alpha)
                trans[y, x] = t
    return color_arr, trans_arr, int(n_clamped), int(n_culled)


def backward(const double[:, ::1] center, const double[:, ::1] conic,
             const double[::1] opacity, const double[:, :, ::1] sh,
             const long long[::1] order, const double[:, ::1] basis,
             int width, int height, bint cull,
             const double[:, :, ::1] grad_color, const double[:, ::1] grad_trans):
    cdef Py_ssize_t kk = center.shape[0]
    cdef Py_ssize_t m = order.shape[0]
    cdef Py_ssize_t nb = basis.shape[1]
    g_center_arr = np.zeros((kk, 2))
    g_conic_arr = np.zeros((kk, 3))
    g_opacity_arr = np.zeros(kk)
    g_sh_arr = np.zeros((kk, 3, nb))
    radius_arr = np.empty(m)
    # per-pixel scratch: sorted position, alpha and transmittance before each used term
    slot_arr = np.empty(m, dtype=np.int64)
    alpha_buf_arr = np.empty(m)
    t_buf_arr = np.empty(m)
    cdef double[:, ::1] g_center = g_center_arr
    cdef double[:, ::1] g_conic = g_conic_arr
    cdef double[::1] g_opacity = g_opacity_arr
    cdef double[:, :, ::1] g_sh = g_sh_arr
    cdef double[::1] radius = radius_arr
    cdef long long[::1] slot = slot_arr
    cdef double[::1] alpha_buf = alpha_buf_arr
    cdef double[::1] t_buf = t_buf_arr
    cdef Py_ssize_t x, y, j, k, ch, bi, p, n_used, s
    cdef double px, py, dx, dy, power, g, raw_alpha, alpha, t, t_final, w, inv
    cdef double d_alpha, d_raw, d_power, a, b, c, gt
    cdef double raw[3]
    cdef double col[3]
    cdef double behind[3]
    cdef double gc[3]
    with nogil:
        _radii(conic, opacity, order, cull, radius)
        for y in range(height):
            py = y + 0.5
            for x in range(width):
                px = x + 0.5
                p = y * width + x
                t = 1.0
                n_used = 0
                for j in range(m):
                    k = order[j]
                    dx = px - center[k, 0]
                    dy = py - center[k, 1]
                    if fabs(dx) > radius[j] or fabs(dy) > radius[j]:
                        continue
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    raw_alpha = opacity[k] * exp(power)
                    if cull and raw_alpha < CULL_ALPHA:
                        continue
                    alpha = raw_alpha if raw_alpha <= MAX_ALPHA else MAX_ALPHA
                    slot[n_used] = j
                    alpha_buf[n_used] = alpha
                    t_buf[n_used] = t
                    n_used += 1
                    t = t * (1.0 - alpha)
                t_final = t
                for ch in range(3):
                    gc[ch] = grad_color[y, x, ch]
                    behind[ch] = 0.0
                gt = grad_trans[y, x]
                for s in range(n_used - 1, -1, -1):
                    j = slot[s]
                    k = order[j]
                    alpha = alpha_buf[s]
                    t = t_buf[s]
                    w = alpha * t
                    inv = 1.0 / (1.0 - alpha)
                    dx = px - center[k, 0]
                    dy = py - center[k, 1]
                    a = conic[k, 0]
                    b = conic[k, 1]
                    c = conic[k, 2]
                    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                    g = exp(power)
                    raw_alpha = opacity[k] * g
                    d_alpha = -gt * t_final * inv
                    for ch in range(3):
                        raw[ch] = 0.0
                        for bi in range(nb):
                            raw[ch] = raw[ch] + sh[k, ch, bi] * basis[p, bi]
                        col[ch] = raw[ch] if raw[ch] > 0.0 else 0.0
                        d_alpha = d_alpha + gc[ch] * (t * col[ch] - behind[ch] * inv)
                        if raw[ch] >= 0.0:
                            for bi in range(nb):
                                g_sh[k, ch, bi] += w * gc[ch] * basis[p, bi]
                    for ch in range(3):
                        behind[ch] = behind[ch] + w * col[ch]
                    if raw_alpha > MAX_ALPHA:
                        continue
                    d_raw = d_alpha
                    g_opacity[k] += d_raw * g
                    d_power = d_raw * raw_alpha
                    g_center[k, 0] += d_power * (a * dx + b * dy)
                    g_center[k, 1] += d_power * (b * dx + c * dy)
                    g_conic[k, 0] += d_power * (-0.5 * dx * dx)
                    g_conic[k, 1] += d_power * (-dx * dy)
                    g_conic[k, 2] += d_power * (-0.5 * dy * dy)
    return g_center_arr, g_conic_arr, g_opacity_arr, g_sh_arr
