import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgsplat.errors import ConfigurationError, DomainError
from sgsplat.scene import (
    SH_C0, SH_C1, Camera, GaussianKernel, Scene, covariance_of, eval_kernel, eval_sh_color,
    pixel_ray, quat_to_rotmat, sh_basis,
)


def kernel(log_scale=(0, 0, 0), rotation=(1, 0, 0, 0), mean=(0, 0, 0), sh=None, degree=0):
    nb = (degree + 1) ** 2
    return GaussianKernel(np.array(mean, float), np.array(log_scale, float), np.array(rotation, float),
                          0.0, np.zeros((3, nb)) if sh is None else sh)


def test_eval_kernel_at_mean_is_one():
    k = kernel(log_scale=(0.3, -0.2, 1.0), rotation=(0.3, 0.1, -0.4, 0.8), mean=(1, 2, 3))
    assert eval_kernel(k, k.mean) == 1.0


def test_eval_kernel_unit_covariance():
    assert eval_kernel(kernel(), (1, 0, 0)) == pytest.approx(math.exp(-0.5), abs=1e-15)


def test_eval_kernel_anisotropic():
    k = kernel(log_scale=(math.log(2), 0, 0))
    assert eval_kernel(k, (2, 0, 0)) == pytest.approx(0.6065306597126334, abs=1e-15)


def test_eval_kernel_rejects_non_finite():
    with pytest.raises(DomainError):
        eval_kernel(kernel(), (np.nan, 0, 0))
    with pytest.raises(DomainError):
        covariance_of(kernel(log_scale=(np.inf, 0, 0)))


def test_eval_kernel_decreases_along_rays(rng):
    k = kernel(log_scale=(0.2, -0.5, 0.1), rotation=rng.normal(size=4), mean=rng.normal(size=3))
    for _ in range(20):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        vals = [eval_kernel(k, k.mean + t * d) for t in np.linspace(0, 3, 30)]
        assert vals[0] == 1.0
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_sh_degree0_constant():
    k = kernel(sh=np.ones((3, 1)))
    np.testing.assert_allclose(eval_sh_color(k, (0, 0, 1)), 0.28209479177387814, rtol=0, atol=1e-15)
    assert SH_C0 == pytest.approx(1 / (2 * math.sqrt(math.pi)), abs=1e-16)


def test_sh_zero_coefficients():
    k = kernel(sh=np.zeros((3, 4)), degree=1)
    np.testing.assert_array_equal(eval_sh_color(k, (0, 1, 0)), 0.0)


def test_sh_l1_m0_on_z_axis():
    sh = np.zeros((3, 4))
    sh[0, 2] = 1.0  # l=1, m=0 slot
    rgb = eval_sh_color(kernel(sh=sh, degree=1), (0, 0, 1))
    assert rgb[0] == pytest.approx(math.sqrt(3 / (4 * math.pi)), abs=1e-12)
    assert SH_C1 == pytest.approx(0.4886025119029199, abs=1e-15)
    assert rgb[1] == rgb[2] == 0.0


def test_sh_basis_orthonormal_numerically():
    # quadrature on a Fibonacci sphere; orthonormal basis -> Gram matrix ~ identity
    n = 200000
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = math.pi * (1 + 5 ** 0.5) * i
    r = np.sqrt(1 - z * z)
    dirs = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    y = sh_basis(dirs, 2)
    gram = (y.T @ y) * (4 * math.pi / n)
    np.testing.assert_allclose(gram, np.eye(9), atol=1e-3)


def test_sh_dc_only_direction_independent(rng):
    sh = np.zeros((3, 9))
    sh[:, 0] = rng.uniform(0, 3, 3)
    k = kernel(sh=sh, degree=2)
    ref = eval_sh_color(k, (0, 0, 1))
    for _ in range(50):
        d = rng.normal(size=3)
        np.testing.assert_allclose(eval_sh_color(k, d / np.linalg.norm(d)), ref, rtol=0, atol=1e-12)


def test_sh_color_clamped_and_checks():
    sh = np.zeros((3, 1))
    sh[0, 0] = -1.0
    assert eval_sh_color(kernel(sh=sh), (0, 0, 1))[0] == 0.0
    with pytest.raises(ValueError):
        eval_sh_color(kernel(sh=sh), (0, 0, 2))
    with pytest.raises(ConfigurationError):
        sh_basis(np.array([[0, 0, 1.0]]), 3)
    with pytest.raises(ConfigurationError):
        Scene(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]], [0.0], np.zeros((1, 3, 16)), sh_degree=3)


def test_covariance_identity_and_scaled():
    np.testing.assert_allclose(covariance_of(kernel()), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(covariance_of(kernel(log_scale=(math.log(2), 0, 0))),
                               np.diag([4.0, 1, 1]), atol=1e-14)


def test_covariance_rotated_90_about_z():
    h = math.sqrt(0.5)
    cov = covariance_of(kernel(log_scale=(math.log(2), 0, 0), rotation=(h, 0, 0, h)))
    np.testing.assert_allclose(cov, np.diag([1.0, 4, 1]), atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_covariance_quadratic_form(log_scale, q, v):
    k = kernel(log_scale=log_scale, rotation=q)
    v = np.array(v) / np.linalg.norm(v)
    cov = covariance_of(k)
    rot = quat_to_rotmat(k.rotation)
    expected = np.sum((np.exp(k.log_scale) * (rot.T @ v)) ** 2)
    assert v @ cov @ v == pytest.approx(expected, rel=1e-10, abs=1e-10)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(cov) > 0)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(np.exp(2 * k.log_scale)), rtol=1e-9)


def test_rotation_normalized():
    k = kernel(rotation=(3.0, 1.0, -2.0, 0.5))
    assert abs(np.linalg.norm(k.rotation) - 1) < 1e-9


def test_opacity_in_unit_interval():
    for logit in (-30.0, -1.0, 0.0, 4.0, 30.0):
        k = GaussianKernel(np.zeros(3), np.zeros(3), np.array([1.0, 0, 0, 0]), logit, np.zeros((3, 1)))
        assert 0.0 < k.opacity <= 1.0
        if abs(logit) < 30:
            assert k.opacity < 1.0


def test_pixel_ray_principal_point():
    # pixel (49, 39) has its center at (49.5, 39.5)
    cam = Camera(100, 100, 49.5, 39.5, 100, 80)
    origin, d = pixel_ray(cam, (49, 39))
    np.testing.assert_allclose(d, (0, 0, -1), atol=1e-15)
    np.testing.assert_array_equal(origin, 0.0)


def test_pixel_ray_one_pixel_right():
    cam = Camera(100, 100, 49.5, 39.5, 100, 80)
    _, d = pixel_ray(cam, (50, 39))
    expected = np.array([0.01, 0.0, -1.0])
    np.testing.assert_allclose(d, expected / np.linalg.norm(expected), atol=1e-15)


def test_pixel_ray_translated_camera():
    rot = quat_to_rotmat(np.array([0.9, 0.1, 0.3, -0.2]) / np.linalg.norm([0.9, 0.1, 0.3, -0.2]))
    t = np.array([0.5, -1.0, 2.0])
    cam = Camera(50, 50, 16, 16, 32, 32, rot, t)
    origin, d = pixel_ray(cam, (3, 7))
    np.testing.assert_allclose(origin, -rot.T @ t, atol=1e-14)
    assert abs(np.linalg.norm(d) - 1) < 1e-14


def test_pixel_ray_out_of_bounds():
    cam = Camera(10, 10, 4, 4, 8, 8)
    for px in ((8, 0), (0, 8), (-1, 3)):
        with pytest.raises(IndexError):
            pixel_ray(cam, px)


def test_camera_validation():
    with pytest.raises(ConfigurationError):
        Camera(0, 10, 4, 4, 8, 8)
    with pytest.raises(ConfigurationError):
        Camera(10, 10, 8, 4, 8, 8)
    with pytest.raises(ConfigurationError):
        Camera(10, 10, 4, 4, 0, 8)


def test_ray_directions_match_pixel_ray(rng):
    q = np.array([0.8, 0.2, -0.1, 0.4])
    cam = Camera(30, 35, 7.2, 5.1, 16, 12, quat_to_rotmat(q / np.linalg.norm(q)), rng.normal(size=3))
    dirs = cam.ray_directions()
    for col, row in ((0, 0), (15, 11), (7, 3)):
        np.testing.assert_allclose(dirs[row, col], pixel_ray(cam, (col, row))[1], atol=1e-14)


def test_scene_requires_kernels():
    with pytest.raises(ConfigurationError):
        Scene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3, 4)))
    with pytest.raises(ConfigurationError):
        Scene.from_kernels([])


def test_scene_kernel_roundtrip(rng):
    from conftest import random_scene

    s = random_scene(rng, 5)
    s2 = Scene.from_kernels(s.kernels)
    np.testing.assert_array_equal(s2.means, s.means)
    np.testing.assert_array_equal(s2.sh, s.sh)
    assert s2.sh_degree == s.sh_degree
