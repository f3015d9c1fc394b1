import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from handsplat import features as F
from handsplat import graph as G
from handsplat.gradcheck import check_features
from handsplat.pipeline import pose_embedding
from handsplat.rasterizer import look_at


def test_default_shape_matches_configured_widths():
    s = F.NetworkShape()
    assert (s.C, s.E, s.bands, s.map_size) == (32, 64, 6, 64)
    assert s.pose_in == 96 + 25 + 2
    with pytest.raises(ValueError):
        F.NetworkShape(C=0).validate()


def test_gamma_encode_closed_form():
    x = np.array([[0.25, -0.5]])
    out = F.gamma_encode(x, 2).value[0]
    expected = []
    for v in x[0]:
        for l in range(2):
            expected += [np.sin(2 ** l * np.pi * v), np.cos(2 ** l * np.pi * v)]
    np.testing.assert_allclose(out, expected, atol=1e-15)
    with pytest.raises(ValueError):
        F.gamma_encode(x, 0)


def test_bilinear_at_texel_centres_is_exact():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 5, 7))
    j, i = np.meshgrid(np.arange(5), np.arange(7), indexing="ij")
    uv = np.c_[(i.ravel() + 0.5) / 7, (j.ravel() + 0.5) / 5]
    out = F.sample_map(m, uv).value
    np.testing.assert_allclose(out, m.reshape(3, -1).T, atol=1e-15)


def test_bilinear_midpoint_and_edges():
    m = np.arange(4.0).reshape(1, 2, 2)
    assert F.sample_map(m, np.array([[0.5, 0.5]])).value[0, 0] == pytest.approx(1.5)
    # outside the centre lattice the value clamps to the border texel
    assert F.sample_map(m, np.array([[0.0, 0.0]])).value[0, 0] == 0.0
    assert F.sample_map(m, np.array([[1.0, 1.0]])).value[0, 0] == 3.0
    with pytest.raises(ValueError):
        F.bilinear_matrix(np.array([[1.2, 0.5]]), 2, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_sample_map_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(2, 2, 6, 6))
    uv = rng.uniform(0, 1, (20, 2))
    lhs = F.sample_map(a * A + b * B, uv).value
    rhs = a * F.sample_map(A, uv).value + b * F.sample_map(B, uv).value
    np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_select_half_picks_hand_channels():
    s = G.const(np.arange(8.0).reshape(2, 4))
    out = F.select_half(s, np.array([0, 1])).value
    np.testing.assert_array_equal(out, [[0, 1], [6, 7]])


def test_camera_vector_layout():
    cam = look_at([0, 0, -1], [0, 0, 0], focal=80, width=64, height=64)
    c = F.camera_vector(cam)
    assert c.shape == (25,)
    np.testing.assert_array_equal(c[:16], cam.E.ravel())
    assert c[16] == 1.0


def test_neighbourhood_rows_sum_to_one():
    adj = sp.csr_matrix(np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], float))
    P = F.neighbourhood_matrix(np.array([0, 0, 1, 2, 2]), adj)
    np.testing.assert_allclose(np.asarray(P.sum(1)).ravel(), 1.0)
    # point on vertex 0 pools itself, its twin and the vertex-1 point
    np.testing.assert_allclose(P.toarray()[0], [1 / 3, 1 / 3, 1 / 3, 0, 0])


def test_weights_have_configured_shapes(small_shape):
    w = F.init_weights(small_shape, np.random.default_rng(0))
    assert w["pose.w1"].shape == (small_shape.pose_in, small_shape.hidden)
    assert w["tex.w3"].shape[1] == 2 * small_shape.C
    assert F.weight_shape(w).C == small_shape.C
    assert all(np.all(np.isfinite(v)) for v in w.values())


def test_encode_pose_deterministic_and_checked(small_shape):
    w = F.init_weights(small_shape, np.random.default_rng(0))
    theta = np.random.default_rng(1).normal(size=96)
    a = F.encode_pose(theta, np.zeros(25), [0.1, 0.2], w).value
    b = F.encode_pose(theta, np.zeros(25), [0.1, 0.2], w).value
    assert a.tobytes() == b.tobytes()
    assert a.shape == (small_shape.E,)
    with pytest.raises(ValueError):
        F.encode_pose(theta, np.zeros(24), [0.1, 0.2], w)


def test_pose_embedding_ignores_shape(small_shape):
    from handsplat.hand_model import PoseParams
    from handsplat.interaction import InteractionLabels
    from handsplat.pipeline import FrameInputs
    w = F.init_weights(small_shape, np.random.default_rng(0))
    cam = look_at([0, 0, -1], [0, 0, 0], focal=80, width=64, height=64)
    pose = PoseParams.zeros()
    pose.theta = np.random.default_rng(2).normal(0, 0.2, pose.theta.shape)
    lab = InteractionLabels(np.zeros(10, np.uint8), np.r_[np.zeros(5, int), np.ones(5, int)])
    a = pose_embedding(w, FrameInputs(pose, cam, lab)).value
    pose.beta[:] = 2.0
    b = pose_embedding(w, FrameInputs(pose, cam, lab)).value
    assert a.tobytes() == b.tobytes()


def test_decode_texture_independent_of_vertex_order(small_shape):
    rng = np.random.default_rng(3)
    w = F.init_weights(small_shape, rng)
    ms = small_shape.map_size
    ident = rng.normal(size=(2 * small_shape.C, ms, ms))
    emb = rng.normal(size=small_shape.E)
    uv = rng.uniform(0, 1, (60, 2))       # 60 vertices on 64 texels: collisions guaranteed in practice
    ids = np.arange(60)
    ref = F.decode_texture(ident, emb, uv, ids, w).value
    perm = rng.permutation(60)
    out = F.decode_texture(ident, emb, uv[perm], ids[perm], w).value
    assert ref.tobytes() == out.tobytes()
    assert ref.shape == (2 * small_shape.C, ms, ms)


def test_decode_texture_scatter_winner_is_highest_id(small_shape):
    rng = np.random.default_rng(4)
    w = F.init_weights(small_shape, rng)
    ms = small_shape.map_size
    ident = rng.normal(size=(2 * small_shape.C, ms, ms))
    emb = rng.normal(size=small_shape.E)
    uv = np.array([[0.01, 0.01], [0.02, 0.02]])
    both = F.decode_texture(ident, emb, uv, np.array([3, 7]), w).value
    only_high = F.decode_texture(ident, emb, uv[1:], np.array([7]), w).value
    assert both.tobytes() == only_high.tobytes()


def test_texture_bias_shifts_both_halves(small_shape):
    rng = np.random.default_rng(5)
    C, ms = small_shape.C, small_shape.map_size
    t = rng.normal(size=(2 * C, ms, ms))
    dt = rng.normal(size=(C, ms, ms))
    uv = rng.uniform(0, 1, (10, 2))
    side = rng.integers(0, 2, 10)
    got = F.texture_features(t, dt, uv, side).value
    ref = F.texture_features(t, None, uv, side).value + F.sample_map(dt, uv).value
    np.testing.assert_allclose(got, ref, atol=1e-12)
    with pytest.raises(ValueError):
        F.texture_features(t, dt[:1], uv, side)


def test_fuse_features_shape_check():
    with pytest.raises(ValueError):
        F.fuse_features(np.zeros((3, 4)), np.zeros((3, 5)))


def _attn_weights(C, seed=0):
    rng = np.random.default_rng(seed)
    return {f"attn.w{k}": rng.normal(size=(C, C)) / np.sqrt(C) for k in "qkv"}


def test_attention_without_flags_is_identity():
    f = np.random.default_rng(0).normal(size=(6, 4))
    out = F.interaction_attention(f, np.zeros(6, int), _attn_weights(4)).value
    assert out.tobytes() == f.tobytes()


def test_attention_singleton_closed_form():
    f = np.random.default_rng(1).normal(size=(6, 4))
    w = _attn_weights(4)
    flags = np.zeros(6, int)
    flags[2] = 1
    out = F.interaction_attention(f, flags, w).value
    np.testing.assert_allclose(out[2], f[2] + f[2] @ w["attn.wv"], atol=1e-14)
    keep = [0, 1, 3, 4, 5]
    assert out[keep].tobytes() == f[keep].tobytes()


def test_attention_permutation_equivariant():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(8, 4))
    w = _attn_weights(4)
    flags = np.array([1, 1, 0, 1, 0, 1, 1, 0])
    perm = rng.permutation(8)
    a = F.interaction_attention(f, flags, w).value
    b = F.interaction_attention(f[perm], flags[perm], w).value
    np.testing.assert_allclose(b, a[perm], atol=1e-13)


def test_attention_label_mismatch():
    with pytest.raises(ValueError):
        F.interaction_attention(np.zeros((4, 4)), np.zeros(3), _attn_weights(4))


@pytest.mark.parametrize("seed", range(5))
def test_learned_pieces_match_finite_differences(seed):
    for res in check_features(np.random.default_rng(seed)):
        assert res.n_checked > 0, res.name
        assert res.max_rel_err < 1e-4, (res.name, res.max_rel_err)
