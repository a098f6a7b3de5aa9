import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stg_avatar.appearance import (SH_C0, ColorMLP, EncodingConfig, color_backward, color_forward,
                                   positional_encoding, positional_encoding_backward, sh_basis, sh_color,
                                   sh_color_backward, view_directions, view_directions_backward)
from stg_avatar.gauss import SpacetimeGaussians


def unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_encoding_config_validation():
    with pytest.raises(ValueError):
        EncodingConfig(pos_freqs=-1)
    with pytest.raises(ValueError):
        EncodingConfig(view_encoding="fourier")


# positional encoding

@given(st.integers(0, 8), st.integers(1, 4))
def test_encoding_of_zero_alternates(L, d):
    out = positional_encoding(np.zeros((1, d)), L)[0]
    assert out.shape == (d * 2 * L,)
    np.testing.assert_array_equal(out, np.tile([0.0, 1.0], d * L))


def test_zero_frequencies_give_empty_vector():
    assert positional_encoding(np.ones((3, 3)), 0).shape == (3, 0)


def test_half_at_one_frequency():
    np.testing.assert_allclose(positional_encoding(np.array([[0.5, 0.5]]), 1)[0], [1, 0, 1, 0], atol=1e-16)


def test_encoding_backward_finite_differences(rng):
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 3 * 2 * 3))
    g = positional_encoding_backward(x, 3, up)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = np.sum(up * (positional_encoding(xp, 3) - positional_encoding(xm, 3))) / (2 * h)
        assert g[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)


# motion feature

def test_zero_coefficients_zero_feature(rng):
    enc = EncodingConfig()
    mlp = ColorMLP.init(enc, 14, 8, 4, rng)
    g = SpacetimeGaussians.create(np.zeros((3, 3)))
    g.rot_coeffs[:] = 0.0
    assert not mlp.motion_feature(g).any()


def test_identity_projection_selects_coefficients(rng):
    enc = EncodingConfig(motion_width=14)
    mlp = ColorMLP.init(enc, 14, 8, 4, rng)
    mlp.params["Wm"] = np.eye(14)
    g = SpacetimeGaussians.create(np.zeros((2, 3)))
    g.motion_coeffs = rng.normal(size=g.motion_coeffs.shape)
    g.rot_coeffs = rng.normal(size=g.rot_coeffs.shape)
    f = mlp.motion_feature(g)
    np.testing.assert_array_equal(f[:, :6], g.motion_coeffs.reshape(2, 6))
    np.testing.assert_array_equal(f[:, 6:], g.rot_coeffs.reshape(2, 8))


def test_motion_feature_gradient_is_projection(rng):
    mlp = ColorMLP.init(EncodingConfig(), 14, 8, 4, rng)
    g = SpacetimeGaussians.create(np.zeros((1, 3)))
    h = 1e-6
    for j in range(6):
        gp, gm = g.copy(), g.copy()
        gp.motion_coeffs.reshape(1, 6)[0, j] += h
        gm.motion_coeffs.reshape(1, 6)[0, j] -= h
        num = (mlp.motion_feature(gp) - mlp.motion_feature(gm))[0] / (2 * h)
        np.testing.assert_allclose(num, mlp.params["Wm"][j], rtol=1e-7, atol=1e-10)


# color head

def color_setup(rng, n=5, enc=None):
    enc = enc or EncodingConfig(hidden=(16, 16))
    g = SpacetimeGaussians.create(rng.normal(size=(n, 3)), feat_dim=4)
    g.motion_coeffs = rng.normal(0, 0.3, size=g.motion_coeffs.shape)
    g.rot_coeffs = rng.normal(size=g.rot_coeffs.shape)
    g.appearance_feat = rng.normal(size=g.appearance_feat.shape)
    mlp = ColorMLP.init(enc, 14, 8, 4, rng)
    for k in mlp.params:
        if k.startswith("b"):
            mlp.params[k] = rng.normal(0, 0.1, size=mlp.params[k].shape)
    return g, mlp, rng.normal(size=8), unit(rng, n)


def test_zero_weights_give_mid_gray(rng):
    g, mlp, pose, dirs = color_setup(rng)
    for k in mlp.params:
        mlp.params[k] = np.zeros_like(mlp.params[k])
    colors, _ = color_forward(g, g.canonical_pos, pose, dirs, mlp)
    np.testing.assert_array_equal(colors, 0.5)


@given(st.integers(0, 10_000))
def test_colors_inside_open_unit_cube(seed):
    rng = np.random.default_rng(seed)
    g, mlp, pose, dirs = color_setup(rng)
    colors, _ = color_forward(g, g.canonical_pos, pose, dirs, mlp)
    assert np.all(colors > 0) and np.all(colors < 1)


def test_parameter_count_of_default_head(rng):
    mlp = ColorMLP.init(EncodingConfig(), 14, 36, 8, rng)
    a = mlp.layer_sizes[0]
    assert mlp.layer_sizes == [a, 64, 64, 3]
    assert mlp.num_params == a * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3 + 14 * 8 + 8
    assert mlp.num_params < 800_000


@pytest.mark.parametrize("view_encoding", ["frequency", "sh"])
def test_color_backward_finite_differences(rng, view_encoding):
    g, mlp, pose, dirs = color_setup(rng, enc=EncodingConfig(hidden=(16, 16), view_encoding=view_encoding))
    pos = g.canonical_pos.copy()
    up = rng.normal(size=(len(g), 3))

    def loss():
        return np.sum(up * color_forward(g, pos, pose, dirs, mlp)[0])

    _, cache = color_forward(g, pos, pose, dirs, mlp)
    grads, d_pos, d_view, d_motion, d_rot, d_feat = color_backward(cache, up, mlp, g.n_p)
    targets = [(pos, d_pos), (dirs, d_view), (g.motion_coeffs, d_motion), (g.rot_coeffs, d_rot),
               (g.appearance_feat, d_feat)] + [(mlp.params[k], grads[k]) for k in mlp.params]
    h = 1e-6
    for arr, ga in targets:
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = loss()
            arr[idx] = old - h
            fm = loss()
            arr[idx] = old
            num = (fp - fm) / (2 * h)
            assert abs(ga[idx] - num) <= 1e-4 * abs(num) + 1e-8


def test_view_direction_backward(rng):
    x = rng.normal(size=(4, 3))
    c = np.array([0.3, -1.0, 5.0])
    up = rng.normal(size=(4, 3))
    g = view_directions_backward(x, c, up)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = np.sum(up * (view_directions(xp, c) - view_directions(xm, c))) / (2 * h)
        assert g[idx] == pytest.approx(num, rel=1e-6, abs=1e-9)


# spherical harmonics

def test_dc_only_color():
    k = np.array([0.2, -0.4, 1.0])
    coeffs = np.zeros((1, 9, 3))
    coeffs[0, 0] = k
    colors, raw = sh_color(coeffs, np.array([[0, 0, 1.0]]))
    np.testing.assert_allclose(raw[0], 0.28209479 * k + 0.5, atol=1e-8)
    np.testing.assert_array_equal(colors[0], np.clip(SH_C0 * k + 0.5, 0, 1))


def test_degree_zero_is_view_independent(rng):
    coeffs = rng.normal(size=(1, 9, 3))
    dirs = unit(rng, 100)
    colors, _ = sh_color(np.broadcast_to(coeffs, (100, 9, 3)), dirs, degree=0)
    assert np.all(colors == colors[0])


def test_full_rotation_leaves_color_unchanged(rng):
    coeffs = rng.normal(0, 0.3, size=(50, 9, 3))
    dirs = unit(rng, 50)
    a = 2 * np.pi
    R = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    np.testing.assert_allclose(sh_color(coeffs, dirs @ R.T)[0], sh_color(coeffs, dirs)[0], atol=1e-14)


def test_view_invariance_switch(rng):
    enc = EncodingConfig(view_freqs=0, hidden=(16,))
    g, mlp, pose, _ = color_setup(rng, n=1, enc=enc)
    pos = np.broadcast_to(g.canonical_pos, (100, 3))
    many = g.subset(np.zeros(100, dtype=int))
    colors, _ = color_forward(many, pos, pose, unit(rng, 100), mlp)
    assert np.all(colors == colors[0])


def test_sh_basis_orthonormal_by_quadrature():
    rng = np.random.default_rng(0)
    d = unit(rng, 400_000)
    B = sh_basis(d)
    gram = 4 * np.pi * B.T @ B / len(d)
    np.testing.assert_allclose(gram, np.eye(9), atol=0.02)


def test_sh_backward_finite_differences(rng):
    coeffs = rng.normal(0, 0.2, size=(6, 9, 3))
    dirs = unit(rng, 6)
    up = rng.normal(size=(6, 3))
    _, raw = sh_color(coeffs, dirs)
    d_coeffs, d_dirs = sh_color_backward(coeffs, dirs, raw, up)
    h = 1e-6
    for arr, ga in ((coeffs, d_coeffs), (dirs, d_dirs)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = np.sum(up * sh_color(coeffs, dirs)[0])
            arr[idx] = old - h
            fm = np.sum(up * sh_color(coeffs, dirs)[0])
            arr[idx] = old
            assert ga[idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-8)
