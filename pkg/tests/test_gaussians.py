import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handsplat import graph as G
from handsplat.gaussians import (HEAD_DIM, GaussianCloud, RefinementConfig, init_head_weights, inherit_labels,
                                 predict_attributes, quat_to_rotmat, refine, soft_clamp)
from handsplat.interaction import InteractionLabels

from conftest import make_cloud


def test_refinement_defaults_match_published_thresholds():
    cfg = RefinementConfig()
    assert (cfg.prune_threshold, cfg.split_threshold) == (0.1, 0.9)
    with pytest.raises(ValueError):
        RefinementConfig(prune_threshold=0.9, split_threshold=0.9)


def test_zero_network_gives_neutral_attributes():
    w = {k: np.zeros_like(v) for k, v in init_head_weights(np.random.default_rng(0), 8, 6).items()}
    f = G.const(np.random.default_rng(1).normal(size=(5, 8)))
    base = np.random.default_rng(2).normal(size=(5, 3))
    a = predict_attributes(f, base, w)
    np.testing.assert_array_equal(a["offset"].value, 0.0)
    np.testing.assert_array_equal(a["means"].value, base)
    np.testing.assert_array_equal(a["opacity"].value, 0.5)
    np.testing.assert_array_equal(a["validity"].value, 0.5)
    np.testing.assert_array_equal(a["quats"].value, np.tile([1.0, 0, 0, 0], (5, 1)))
    np.testing.assert_allclose(np.exp(a["log_scales"].value), 0.004)


def test_misaligned_features_rejected():
    w = init_head_weights(np.random.default_rng(0), 8, 6)
    with pytest.raises(ValueError):
        predict_attributes(G.const(np.zeros((4, 8))), np.zeros((5, 3)), w)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(1e-4, 0.1))
def test_soft_clamp_stays_inside_radius(x, y, z, r):
    out = soft_clamp(G.const(np.array([[x, y, z]])), r).value
    assert np.linalg.norm(out) < r


def test_attribute_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    w = init_head_weights(rng, 6, 5, scale=3.0)
    f0 = rng.normal(size=(4, 6))
    base = rng.normal(size=(4, 3))
    for key in ("means", "log_scales", "quats", "opacity", "colors", "validity"):
        P = rng.normal(size=predict_attributes(G.const(f0), base, w)[key].shape)
        loss = lambda f: G.sum_(predict_attributes(f, base, w)[key] * P)
        fv = G.param(f0)
        G.backward(loss(fv))
        num = np.zeros_like(f0)
        h = 1e-5
        for i in np.ndindex(f0.shape):
            a, b = f0.copy(), f0.copy()
            a[i] += h
            b[i] -= h
            num[i] = (loss(G.const(a)).value - loss(G.const(b)).value) / (2 * h)
        err = np.abs(fv.grad - num).max() / max(np.abs(num).max(), 1e-12)
        assert err < 1e-4, key


def test_quaternion_rotation_matrix_orthonormal():
    q = np.random.default_rng(0).normal(size=(50, 4))
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.transpose(0, 2, 1), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_all_half_validity_unchanged():
    c = make_cloud(np.random.default_rng(0), 20, validity=np.full(20, 0.5))
    out = refine(c)
    for name in ("means", "log_scales", "quats", "opacity", "colors", "validity", "parent"):
        assert getattr(out, name).tobytes() == getattr(c, name).tobytes()


def test_single_prune():
    phi = np.full(20, 0.5)
    phi[7] = 0.05
    c = make_cloud(np.random.default_rng(1), 20, validity=phi)
    out = refine(c)
    assert len(out) == 19
    assert 7 not in out.parent


def test_single_split_geometry():
    phi = np.full(20, 0.5)
    phi[3] = 0.95
    c = make_cloud(np.random.default_rng(2), 20, validity=phi)
    out, origin = refine(c, return_origin=True)
    assert len(out) == 21
    kids = np.flatnonzero(origin == 3)
    assert len(kids) == 2
    np.testing.assert_allclose(out.means[kids].mean(0), c.means[3], atol=1e-12, rtol=0)
    s = np.exp(c.log_scales[3])
    ax = np.argmax(s)
    R = quat_to_rotmat(c.quats[3])
    np.testing.assert_allclose(out.means[kids[0]] - c.means[3], 0.5 * s[ax] * R[:, ax], atol=1e-15)
    ls = c.log_scales[3].copy()
    ls[ax] -= np.log(1.6)
    np.testing.assert_allclose(out.log_scales[kids], [ls, ls], atol=1e-15)
    np.testing.assert_array_equal(out.validity[kids], 0.5)
    for name in ("colors", "opacity", "quats", "uv", "side"):
        assert getattr(out, name)[kids[0]].tobytes() == getattr(c, name)[3].tobytes()


def test_prune_all_keeps_best():
    phi = np.array([0.01, 0.05, 0.02])
    out = refine(make_cloud(np.random.default_rng(4), 3, validity=phi))
    assert len(out) == 1
    assert out.validity[0] == 0.05


def test_split_cap_prefers_highest_validity():
    phi = np.full(40, 0.5)
    phi[[2, 5, 9, 11, 30]] = [0.91, 0.99, 0.95, 0.97, 0.99]
    c = make_cloud(np.random.default_rng(5), 40, validity=phi)
    out, origin = refine(c, RefinementConfig(max_splits_fraction=0.05), return_origin=True)
    split = sorted(set(origin[np.bincount(origin, minlength=40)[origin] == 2]))
    assert split == [5, 30]          # cap of 2, ties by index


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 80))
def test_refine_accounting(seed, n):
    rng = np.random.default_rng(seed)
    c = make_cloud(rng, n)
    cfg = RefinementConfig(max_splits_fraction=1.0)
    out, origin = refine(c, cfg, return_origin=True)
    pruned = (c.validity < 0.1).sum()
    split = (c.validity > 0.9).sum()
    if pruned == n:
        assert len(out) == 1
    else:
        assert len(out) == n - pruned + split
    survivors = origin[np.bincount(origin, minlength=n)[origin] == 1]
    if pruned < n:
        assert np.all(c.validity[survivors] >= 0.1)
    assert np.all(c.validity[survivors] <= 0.9)
    np.testing.assert_allclose(np.linalg.norm(out.quats, axis=1), 1.0, atol=1e-9)
    out2 = refine(c, cfg)
    assert out2.means.tobytes() == out.means.tobytes()
    out.validate()


def test_inherit_labels():
    phi = np.full(10, 0.5)
    phi[4] = 0.95
    c = make_cloud(np.random.default_rng(6), 10, validity=phi)
    c.parent = np.arange(10)
    labels = InteractionLabels(np.zeros(10, np.uint8), c.side)
    labels.flags[4] = 1
    same = inherit_labels(c, labels)
    np.testing.assert_array_equal(same.flags, labels.flags)
    out = refine(c)
    lab = inherit_labels(out, labels)
    assert len(lab) == len(out)
    assert lab.flags[out.parent == 4].tolist() == [1, 1]
    bad = out.subset(np.arange(len(out)))
    bad.parent = bad.parent + 100
    with pytest.raises(ValueError):
        inherit_labels(bad, labels)


def test_cloud_validation():
    c = make_cloud(np.random.default_rng(7), 4)
    c.validate()
    c.quats = c.quats * 1.01
    with pytest.raises(ValueError):
        c.validate()
