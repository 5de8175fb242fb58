import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_quaternions
from splatstyle.errors import DegenerateCovarianceError, InvalidParameterError, UsageError
from splatstyle.scene import (
    Camera,
    Gaussian,
    GaussianScene,
    build_covariance,
    covariance_from_params,
    gaussian_density,
    inverse_sigmoid,
    sh_to_color,
)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def rodrigues(axis, angle):
    """Rotation matrix from axis-angle, independent of the quaternion code path."""
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def axis_angle_quaternion(axis, angle):
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * k])


def quat_multiply(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def gaussian(mean, rotation, log_scale):
    return Gaussian(np.asarray(mean, float), np.asarray(rotation, float), np.asarray(log_scale, float), 0.0,
                    np.zeros((1, 3)), np.zeros(2))


def test_covariance_identity():
    np.testing.assert_allclose(covariance_from_params(IDENTITY_Q, [0, 0, 0]), np.eye(3), atol=1e-15)


def test_covariance_axis_scale():
    np.testing.assert_allclose(covariance_from_params(IDENTITY_Q, [math.log(2), 0, 0]), np.diag([4.0, 1, 1]), atol=1e-12)


def test_covariance_rotated_about_z_matches_composed_product():
    q = axis_angle_quaternion([0, 0, 1], math.pi / 2)
    R = rodrigues([0, 0, 1], math.pi / 2)
    S = np.diag([2.0, 1.0, 1.0])
    expected = R @ S @ S.T @ R.T
    got = covariance_from_params(q, [math.log(2), 0, 0])
    np.testing.assert_allclose(got, expected, atol=1e-12)
    np.testing.assert_allclose(got, np.diag([1.0, 4, 1]), atol=1e-12)


@pytest.mark.parametrize("bad", [[np.nan, 0, 0, 0], [1, 0, 0, np.inf]])
def test_covariance_rejects_non_finite_rotation(bad):
    with pytest.raises(InvalidParameterError):
        covariance_from_params(bad, [0, 0, 0])


def test_covariance_rejects_non_finite_scale():
    with pytest.raises(InvalidParameterError):
        covariance_from_params(IDENTITY_Q, [0, np.nan, 0])


def test_covariance_psd_on_many_draws():
    rng = np.random.default_rng(0)
    n = 10_000
    q = torch.from_numpy(random_quaternions(rng, n))
    s = torch.from_numpy(rng.uniform(-8, 3, (n, 3)))
    cov = build_covariance(q, s)
    assert torch.allclose(cov, cov.transpose(-1, -2))
    eig = torch.linalg.eigvalsh(cov)
    assert float(eig.min()) >= -1e-9


def test_density_at_mean_is_one():
    g = gaussian([0.3, -1, 2], IDENTITY_Q, [0.1, -0.2, 0.3])
    assert gaussian_density(g, g.mean) == 1.0


def test_density_unit_isotropic():
    g = gaussian([0, 0, 0], IDENTITY_Q, [0, 0, 0])
    d = np.array([1.0, 2.0, -0.5])
    assert gaussian_density(g, d / np.linalg.norm(d)) == pytest.approx(math.exp(-0.5), rel=1e-12)


def test_density_anisotropic_matches_matrix_inverse():
    g = gaussian([1, 1, 1], IDENTITY_Q, [math.log(2), 0, 0])
    x = np.array([3.0, 1, 1])
    d = x - g.mean
    expected = math.exp(-0.5 * d @ np.linalg.inv(np.diag([4.0, 1, 1])) @ d)
    assert gaussian_density(g, x) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(math.exp(-0.5))


def test_density_degenerate_covariance_rejected():
    # with the scale floor, a 1e-7 / 1e7 axis ratio is numerically singular
    g = gaussian([0, 0, 0], axis_angle_quaternion([1, 1, 0], 0.7), [math.log(1e-7), math.log(1e7), 0])
    with pytest.raises(DegenerateCovarianceError):
        gaussian_density(g, [0.1, 0.2, 0.3])


@given(
    st.integers(0, 2**31 - 1),
    st.floats(0, 2 * math.pi),
)
def test_density_rotation_invariance(seed, angle):
    rng = np.random.default_rng(seed)
    q = random_quaternions(rng, 1)[0]
    mean = rng.normal(size=3)
    log_scale = rng.uniform(-1, 1, 3)
    x = mean + rng.normal(size=3)
    axis = rng.normal(size=3)
    R = rodrigues(axis, angle)
    qr = quat_multiply(axis_angle_quaternion(axis, angle), q)
    a = gaussian_density(gaussian(mean, q, log_scale), x)
    b = gaussian_density(gaussian(R @ mean, qr, log_scale), R @ x)
    assert abs(a - b) <= 1e-9 * max(abs(a), 1e-300)


@given(st.floats(-30, 30))
def test_sigmoid_round_trip(raw):
    x = torch.tensor(raw, dtype=torch.float64)
    back = float(inverse_sigmoid(torch.sigmoid(x)))
    assert abs(back - raw) <= 1e-9 * max(1.0, abs(raw)) * (1 + math.exp(abs(raw)) * 1e-7)


@given(st.floats(-15, 15))
def test_exp_round_trip(raw):
    x = torch.tensor(raw, dtype=torch.float64)
    assert abs(float(torch.log(torch.exp(x))) - raw) <= 1e-9


def test_sh_degree0_is_constant_over_directions():
    rng = np.random.default_rng(1)
    coeffs = rng.normal(0, 0.3, (1, 3))
    dirs = rng.normal(size=(20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    colors = np.array([sh_to_color(coeffs, d) for d in dirs])
    assert np.ptp(colors, axis=0).max() == 0.0


def test_sh_zero_coefficients_give_mid_gray():
    np.testing.assert_array_equal(sh_to_color(np.zeros((4, 3)), [0, 0, 1]), [0.5, 0.5, 0.5])


def test_sh_degree1_symmetric_about_dc():
    coeffs = np.zeros((4, 3))
    coeffs[1:] = np.array([[0.1, -0.05, 0.02], [0.03, 0.04, -0.1], [-0.02, 0.06, 0.05]])
    d = np.array([0.3, -0.5, 0.8])
    d /= np.linalg.norm(d)
    base = sh_to_color(coeffs[:1], d)
    plus, minus = sh_to_color(coeffs, d), sh_to_color(coeffs, -d)
    np.testing.assert_allclose(0.5 * (plus + minus), base, atol=1e-15)
    # basis polynomials evaluated directly: -C1 y, C1 z, -C1 x
    c1 = 0.4886025119029199
    expected = 0.5 + 0.28209479177387814 * coeffs[0] + c1 * (-d[1] * coeffs[1] + d[2] * coeffs[2] - d[0] * coeffs[3])
    np.testing.assert_allclose(plus, expected, atol=1e-15)


def test_sh_clamps_to_unit_range():
    rgb = sh_to_color(np.array([[10.0, -10.0, 0.0]]), [0, 0, 1])
    np.testing.assert_array_equal(rgb, [1.0, 0.0, 0.5])


def test_camera_invariants():
    R = np.eye(3)
    with pytest.raises(InvalidParameterError):
        Camera(0.0, 1.0, 0, 0, R, np.zeros(3), 8, 8)
    with pytest.raises(InvalidParameterError):
        Camera(1.0, 1.0, 0, 0, R, np.zeros(3), 8, 8, near=2.0, far=1.0)
    with pytest.raises(InvalidParameterError):
        Camera(1.0, 1.0, 0, 0, R * 1.001, np.zeros(3), 8, 8)


def test_camera_look_at_projects_target_to_principal_point():
    cam = Camera.look_at([3, 1, -2], [0, 0, 0], [0, 1, 0], 40, 40, 32, 32)
    uv, z = cam.project(np.zeros((1, 3)))
    np.testing.assert_allclose(uv[0], [cam.cx, cam.cy], atol=1e-12)
    assert z[0] == pytest.approx(np.linalg.norm([3, 1, -2]))
    np.testing.assert_allclose(cam.camera_to_world() @ cam.world_to_camera(), np.eye(4), atol=1e-12)


def test_scene_validation():
    with pytest.raises(InvalidParameterError):
        GaussianScene.from_points(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(InvalidParameterError):
        GaussianScene(feature_dim=4, background=(2.0, 0, 0))
    with pytest.raises(InvalidParameterError):
        GaussianScene(feature_dim=0)
    with pytest.raises(UsageError):
        GaussianScene(feature_dim=4).validate()


def test_scene_from_points_defaults():
    rng = np.random.default_rng(3)
    scene = GaussianScene.from_points(rng.normal(size=(50, 3)), rng.uniform(size=(50, 3)), feature_dim=8)
    assert len(scene) == 50 and scene.features.shape == (50, 8)
    np.testing.assert_allclose(scene.opacity.detach().numpy(), 0.1, rtol=1e-6)
    assert torch.all(scene.scales > 0)
    np.testing.assert_allclose(scene.rotations.detach().norm(dim=1).numpy(), 1.0)


def test_normalize_rotations_unit_norm_float64():
    rng = np.random.default_rng(4)
    scene = GaussianScene.from_points(rng.normal(size=(30, 3)), rng.uniform(size=(30, 3)), dtype=torch.float64)
    with torch.no_grad():
        scene.rotations.mul_(torch.from_numpy(rng.uniform(0.1, 10, (30, 1))))
        scene.rotations.add_(torch.from_numpy(rng.normal(0, 0.3, (30, 4))))
    scene.normalize_rotations_()
    assert float((scene.rotations.detach().norm(dim=1) - 1).abs().max()) <= 1e-9
