import numpy as np
import pytest
import torch

from conftest import dc_for, make_camera, random_scene
from sgsplat import raster
from sgsplat.errors import ConfigurationError
from sgsplat.renderer import render, render_reference, render_tensors, scene_tensors
from sgsplat.scene import Scene, logit

BACKENDS = sorted(raster.BACKENDS)


def centered_scene(opacities, colors, depths, width=32, f=40.0):
    """Kernels whose projected centers sit exactly on the center of pixel (15, 15)."""
    k = len(opacities)
    # pixel center (15.5, 15.5) with cx = cy = 16: u offset -0.5, v offset -0.5
    means = np.array([[-0.5 * d / f, 0.5 * d / f, -d] for d in depths])
    sh = np.zeros((k, 3, 1))
    sh[:, :, 0] = [dc_for(c) for c in colors]
    return Scene(means, np.full((k, 3), np.log(0.2)), np.tile([1.0, 0, 0, 0], (k, 1)),
                 logit(np.array(opacities)), sh, sh_degree=0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_term(backend):
    c = np.array([0.5, 0.25, 1.0])
    out = render(centered_scene([0.8], [c], [4.0]), make_camera(), backend=backend)
    np.testing.assert_allclose(out.rgb[15, 15], 0.8 * c, atol=1e-12)
    assert out.final_transmittance[15, 15] == pytest.approx(0.2, abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_terms(backend):
    out = render(centered_scene([0.5, 0.5], [(1, 1, 1)] * 2, [3.0, 5.0]), make_camera(), backend=backend)
    np.testing.assert_allclose(out.rgb[15, 15], 0.75, atol=1e-12)
    ref = render_reference(centered_scene([0.5, 0.5], [(1, 1, 1)] * 2, [3.0, 5.0]), make_camera())
    np.testing.assert_allclose(ref.rgb[15, 15], 0.75, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_zero_opacity_black(backend, rng):
    s = random_scene(rng, 6)
    s.opacity_logits[:] = -1000.0
    for cull in (True, False):
        out = render(s, make_camera(), cull=cull, backend=backend)
        np.testing.assert_array_equal(out.rgb, 0.0)
        np.testing.assert_array_equal(out.final_transmittance, 1.0)


def test_empty_scene_rejected():
    with pytest.raises(ConfigurationError):
        render_tensors(*[torch.zeros((0,) + s) for s in ((3,), (3,), (4,), (), (3, 4))], make_camera(), 1)


@pytest.mark.parametrize("backend", BACKENDS)
def test_all_behind_camera_black(backend, rng):
    s = random_scene(rng, 5)
    s.means[:, 2] *= -1
    out = render(s, make_camera(), backend=backend)
    ref = render_reference(s, make_camera())
    np.testing.assert_array_equal(out.rgb, 0.0)
    np.testing.assert_array_equal(ref.rgb, 0.0)
    assert out.diagnostics["skipped_splats"] == 5


@pytest.mark.parametrize("backend", BACKENDS)
def test_matches_reference(backend, rng):
    for _ in range(3):
        s = random_scene(rng, int(rng.integers(1, 20)))
        cam = make_camera(eye=rng.normal(0, 0.5, 3) + (0, 0, 1.0))
        out = render(s, cam, cull=False, backend=backend)
        ref = render_reference(s, cam)
        assert np.abs(out.rgb - ref.rgb).max() <= 1e-12
        assert np.abs(out.final_transmittance - ref.final_transmittance).max() <= 1e-12


def test_single_kernel_exact(rng):
    s = random_scene(rng, 1)
    out = render(s, make_camera(), cull=False)
    ref = render_reference(s, make_camera())
    np.testing.assert_allclose(out.rgb, ref.rgb, rtol=0, atol=1e-15)


def test_cull_changes_little(rng):
    for _ in range(5):
        s = random_scene(rng, 24)
        a = render(s, make_camera(), cull=True).rgb
        b = render(s, make_camera(), cull=False).rgb
        assert np.abs(a - b).max() <= 1e-2


def test_rgb_range_and_transmittance(rng):
    s = random_scene(rng, 20, dc=(2.0, 6.0))
    out = render(s, make_camera())
    assert out.rgb.min() >= 0 and out.rgb.max() <= 1
    assert np.all(out.final_transmittance > 0) and np.all(out.final_transmittance <= 1)


def test_transmittance_monotone_in_opacity(rng):
    s = random_scene(rng, 10)
    base = render(s, make_camera(), cull=False).final_transmittance
    for i in range(len(s)):
        s2 = s.copy()
        s2.opacity_logits[i] += 0.5
        t2 = render(s2, make_camera(), cull=False).final_transmittance
        assert np.all(t2 <= base + 1e-15)


@pytest.mark.parametrize("cull", [True, False])
def test_zero_opacity_kernel_is_invisible(cull, rng):
    s = random_scene(rng, 7)
    extra = random_scene(rng, 1)
    merged = Scene(np.vstack([s.means, extra.means]), np.vstack([s.log_scales, extra.log_scales]),
                   np.vstack([s.rotations, extra.rotations]), np.r_[s.opacity_logits, -1000.0],
                   np.concatenate([s.sh, extra.sh]), s.sh_degree)
    a = render(s, make_camera(), cull=cull)
    b = render(merged, make_camera(), cull=cull)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.final_transmittance, b.final_transmittance)


def test_backends_agree_forward_and_backward(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    s = random_scene(rng, 12)
    cam = make_camera(24, 20)
    weights = torch.tensor(rng.normal(size=(20, 24, 3)))
    grads = {}
    for cull in (True, False):
        for be in BACKENDS:
            p = scene_tensors(s)
            for t in p.values():
                t.requires_grad_(True)
            rgb, color, trans, _ = render_tensors(p["mean"], p["log_scale"], p["rotation"],
                                                  p["opacity_logit"], p["sh"], cam, 1, cull=cull, backend=be)
            ((color * weights).sum() + trans.sum()).backward()
            grads[be] = (color.detach(), trans.detach(), {k: v.grad.clone() for k, v in p.items()})
        (c0, t0, g0), (c1, t1, g1) = grads.values()
        torch.testing.assert_close(c0, c1, rtol=0, atol=1e-13)
        torch.testing.assert_close(t0, t1, rtol=0, atol=1e-13)
        for k in g0:
            torch.testing.assert_close(g0[k], g1[k], rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_composite_gradcheck(backend, rng):
    k, w, h = 3, 6, 5
    center = torch.tensor(rng.uniform(0, 6, (k, 2)), requires_grad=True)
    a = rng.uniform(0.3, 0.8, k)
    conic = torch.tensor(np.column_stack([a, rng.uniform(-0.1, 0.1, k), a]), requires_grad=True)
    opacity = torch.tensor(rng.uniform(0.2, 0.8, k), requires_grad=True)
    sh = torch.tensor(rng.normal(1, 0.2, (k, 3, 4)), requires_grad=True)
    basis = rng.normal(0.3, 0.05, (w * h, 4))
    order = np.array([2, 0, 1])

    def f(c, q, o, s):
        color, trans = raster.composite(c, q, o, s, order, basis, w, h, cull=False, backend=backend)
        return color, trans

    assert torch.autograd.gradcheck(f, (center, conic, opacity, sh), eps=1e-6, atol=1e-8)


def test_alpha_clamp_has_zero_opacity_gradient():
    s = centered_scene([0.999], [(0.5, 0.5, 0.5)], [4.0])
    p = scene_tensors(s)
    p["opacity_logit"].requires_grad_(True)
    diag = {}
    rgb, color, trans, _ = render_tensors(p["mean"], p["log_scale"], p["rotation"], p["opacity_logit"],
                                          p["sh"], make_camera(), 0, cull=True, diagnostics=diag)
    assert diag["clamped_terms"] >= 1
    mask = torch.zeros_like(trans)
    mask[15, 15] = 1.0
    (trans * mask).sum().backward()
    assert p["opacity_logit"].grad.item() == 0.0
    assert trans[15, 15].item() == pytest.approx(0.01, abs=1e-12)
