import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from handsplat.gaussians import GaussianCloud
from handsplat.gradcheck import check_render, random_scene
from handsplat.rasterizer import (Camera, look_at, project_gaussian, project_gaussians, render, render_arrays,
                                  render_backward, render_naive)

from conftest import make_cloud


def oracle_projection(mean, log_scale, quat, cam):
    # independent EWA: scipy rotation (x, y, z, w order), explicit pinhole Jacobian
    R = Rotation.from_quat([quat[1], quat[2], quat[3], quat[0]]).as_matrix()
    S = np.diag(np.exp(2 * np.asarray(log_scale)))
    cov = R @ S @ R.T
    W = cam.E[:3, :3]
    t = W @ mean + cam.E[:3, 3]
    fx, fy, cx, cy = cam.K[0, 0], cam.K[1, 1], cam.K[0, 2], cam.K[1, 2]
    J = np.array([[fx / t[2], 0, -fx * t[0] / t[2] ** 2], [0, fy / t[2], -fy * t[1] / t[2] ** 2]])
    cov2 = J @ W @ cov @ W.T @ J.T + 0.3 * np.eye(2)
    return np.array([fx * t[0] / t[2] + cx, fy * t[1] / t[2] + cy]), cov2


def oracle_alpha(px, mu, cov2, opacity):
    d = np.array(px, float) - mu
    q = d @ np.linalg.solve(cov2, d)
    if q > 9.0:
        return 0.0
    return min(opacity * np.exp(-0.5 * q), 0.99)


def cam32(size=32):
    return look_at([0.01, -0.02, -0.5], [0, 0, 0], up=(0, -1, 0), focal=45.0 * size / 32, width=size, height=size)


def one(mean, ls, q, o, c):
    return GaussianCloud(np.array([mean], float), np.array([ls], float), np.array([q], float) / np.linalg.norm(q),
                         np.array([o], float), np.array([c], float), np.array([0.5]), np.zeros((1, 2)),
                         np.zeros(1, int), np.zeros(1, int))


def test_camera_validation():
    cam = cam32()
    np.testing.assert_allclose(Camera.from_flat(cam.flatten()).K, cam.K)
    assert cam.flatten().shape == (25,)
    with pytest.raises(ValueError):
        Camera(np.diag([-1.0, 1.0, 1.0]), np.eye(4))
    E = np.eye(4)
    E[0, 0] = 2.0
    with pytest.raises(ValueError):
        Camera(np.eye(3), E)


def test_single_gaussian_closed_form():
    cam = cam32()
    q = np.array([0.9, 0.2, -0.3, 0.1])
    q /= np.linalg.norm(q)
    g = one([0.004, -0.003, 0.01], np.log([0.02, 0.01, 0.015]), q, 0.7, [0.9, 0.2, 0.4])
    bg = np.array([0.1, 0.2, 0.3])
    img = render(g, cam, bg, 32, 32)
    mu, cov2 = oracle_projection(g.means[0], g.log_scales[0], g.quats[0], cam)
    worst = 0.0
    for y in range(32):
        for x in range(32):
            a = oracle_alpha((x, y), mu, cov2, 0.7)
            expected = a * g.colors[0] + (1 - a) * bg
            worst = max(worst, np.abs(img.rgb[y, x] - expected).max(), abs(img.silhouette[y, x] - a))
    assert worst <= 1e-10
    mean2, c2, depth = project_gaussian(g.means[0], g.log_scales[0], g.quats[0], cam)
    np.testing.assert_allclose(mean2, mu, atol=1e-10)
    np.testing.assert_allclose(c2, cov2, rtol=1e-10)


def test_two_gaussians_front_to_back():
    cam = cam32()
    far = one([0.0, 0.0, 0.05], np.log([0.03] * 3), [1, 0, 0, 0], 0.6, [0, 0, 1])
    near = one([0.003, 0.0, -0.05], np.log([0.02] * 3), [1, 0, 0, 0], 0.5, [1, 0, 0])
    both = GaussianCloud.concat([far, near])
    img = render(both, cam, (0, 0, 0), 32, 32)
    for (x, y) in [(15, 15), (16, 18), (10, 12)]:
        a1 = oracle_alpha((x, y), *oracle_projection(near.means[0], near.log_scales[0], near.quats[0], cam), 0.5)
        a2 = oracle_alpha((x, y), *oracle_projection(far.means[0], far.log_scales[0], far.quats[0], cam), 0.6)
        expected = a1 * np.array([1, 0, 0]) + (1 - a1) * a2 * np.array([0, 0, 1])
        np.testing.assert_allclose(img.rgb[y, x], expected, atol=1e-10)
        np.testing.assert_allclose(img.silhouette[y, x], 1 - (1 - a1) * (1 - a2), atol=1e-10)


def test_behind_camera_is_culled():
    cam = cam32()
    g = one([0.0, 0.0, -0.8], np.log([0.05] * 3), [1, 0, 0, 0], 0.9, [1, 1, 1])
    img = render(g, cam, (0.2, 0.2, 0.2), 32, 32)
    np.testing.assert_array_equal(img.rgb, 0.2)
    np.testing.assert_array_equal(img.silhouette, 0.0)


@pytest.mark.parametrize("seed", range(6))
def test_tiled_equals_naive_bitwise(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(17, 65))
    c = make_cloud(rng, int(rng.integers(1, 201)))
    cam = cam32(size)
    a = render(c, cam, (0.3, 0.1, 0.0), size, size + 7)
    b = render_naive(c, cam, (0.3, 0.1, 0.0), size, size + 7)
    assert a.rgb.tobytes() == b.rgb.tobytes()
    assert a.silhouette.tobytes() == b.silhouette.tobytes()


@pytest.mark.parametrize("seed", range(4))
def test_conservation(seed):
    rng = np.random.default_rng(10 + seed)
    c = make_cloud(rng, 150)
    c.colors[:] = 1.0
    img = render(c, cam32(48), (0, 0, 0), 48, 48)
    # white splats on black: rgb holds sum(alpha_i T_i)
    np.testing.assert_allclose(img.rgb[..., 0] + (1 - img.silhouette), 1.0, atol=1e-9, rtol=0)
    assert np.all((img.silhouette >= 0) & (img.silhouette <= 1))


def test_order_invariance_bitwise():
    rng = np.random.default_rng(3)
    c = make_cloud(rng, 120)
    perm = rng.permutation(120)
    a = render(c, cam32(), (0, 0, 0), 32, 32)
    b = render(c.subset(perm), cam32(), (0, 0, 0), 32, 32)
    assert a.rgb.tobytes() == b.rgb.tobytes()
    assert a.silhouette.tobytes() == b.silhouette.tobytes()


def test_depth_ties_resolved_by_index():
    c = make_cloud(np.random.default_rng(8), 2)
    c.means[1] = c.means[0]
    c.colors[:] = [[1, 0, 0], [0, 1, 0]]
    img = render(c, cam32(), (0, 0, 0), 32, 32)
    ref = render_naive(c, cam32(), (0, 0, 0), 32, 32)
    assert img.rgb.tobytes() == ref.rgb.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_silhouette_monotone_in_opacity(seed, bump):
    rng = np.random.default_rng(seed)
    c = make_cloud(rng, 40)
    base = render(c, cam32(), (0, 0, 0), 32, 32).silhouette
    i = int(rng.integers(0, 40))
    c.opacity[i] = min(c.opacity[i] + bump, 0.999)
    raised = render(c, cam32(), (0, 0, 0), 32, 32).silhouette
    assert np.all(raised >= base - 1e-15)


def test_ewa_anisotropy():
    cam = look_at([0, 0, -0.5], [0, 0, 0], up=(0, -1, 0), focal=60, width=32, height=32)
    _, cov2, _ = project_gaussian(np.zeros(3), np.log([0.03, 0.005, 0.005]), np.array([1.0, 0, 0, 0]), cam)
    assert cov2[0, 0] > 10 * cov2[1, 1]
    # rotating 90 degrees about the view axis swaps the axes
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    _, rot, _ = project_gaussian(np.zeros(3), np.log([0.03, 0.005, 0.005]), q, cam)
    np.testing.assert_allclose(rot[::-1, ::-1], cov2, rtol=1e-9, atol=1e-12)


def test_focal_doubling():
    cam = cam32()
    mean, ls, q = np.array([0.01, 0.02, 0.0]), np.log([0.01, 0.02, 0.015]), np.array([0.8, 0.1, 0.5, 0.3])
    m1, c1, _ = project_gaussian(mean, ls, q, cam)
    m2, c2, _ = project_gaussian(mean, ls, q, cam.with_focal_scale(2.0))
    pp = cam.K[:2, 2]
    np.testing.assert_allclose(m2 - pp, 2 * (m1 - pp), rtol=1e-12)
    np.testing.assert_allclose(c2 - 0.3 * np.eye(2), 4 * (c1 - 0.3 * np.eye(2)), rtol=1e-10)


def test_tile_parallel_determinism():
    rng = np.random.default_rng(4)
    c = make_cloud(rng, 500)
    a = render(c, cam32(64), (0, 0, 0), 64, 64, workers=1)
    b = render(c, cam32(64), (0, 0, 0), 64, 64, workers=4)
    assert a.rgb.tobytes() == b.rgb.tobytes()


def test_float32_path_close_to_float64():
    rng = np.random.default_rng(5)
    c = make_cloud(rng, 300)
    a = render(c, cam32(64), (0, 0, 0), 64, 64)
    b = render(c, cam32(64), (0, 0, 0), 64, 64, dtype=np.float32)
    assert b.rgb.dtype == np.float32
    assert np.abs(a.rgb - b.rgb).max() < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    res = check_render(np.random.default_rng(seed))
    assert res.n_checked >= 30
    assert res.max_rel_err < 1e-4


def test_backward_color_gradient_is_blend_weight():
    rng = np.random.default_rng(7)
    arrays, cam, bg = random_scene(rng, 20, 32)
    img, st_ = render_arrays(*arrays, cam, bg, 32, 32)
    d = np.zeros((32, 32, 3))
    d[..., 1] = 1.0
    g = render_backward(st_, d)
    # d(sum green)/d(color_g) equals the total blend weight of g; summing over g recovers the silhouette
    np.testing.assert_allclose(g.colors[:, 1].sum(), img.silhouette.sum(), rtol=1e-12)
    np.testing.assert_array_equal(g.colors[:, 0], 0.0)


def test_invalid_size():
    with pytest.raises(ValueError):
        render(make_cloud(np.random.default_rng(0), 3), cam32(), (0, 0, 0), 0, 10)
