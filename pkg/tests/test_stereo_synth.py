import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from depthtransfer.imaging import DepthMap, FlowField
from depthtransfer.metrics import psnr
from depthtransfer.stereo_synth import (
    StereoPair,
    compose_anaglyph,
    depth_to_disparity,
    disparity_stack,
    interlaced,
    optimize_disparity,
    render_stereo,
    saliency_weights,
    scaled_wmax,
    side_by_side,
    splat_view,
    warp_energy,
)
from synthetic import rgb_texture, texture


def dense_minimizer(stack):
    """Oracle: assemble and solve the normal equations densely."""
    A = np.zeros((stack.size, stack.size))
    b = np.zeros(stack.size)
    for t in stack.terms:
        M = t.op.matrix.toarray()
        w = t.multiplier * np.broadcast_to(t.weight, (M.shape[0],))
        A += M.T @ (w[:, None] * M)
        b += M.T @ (w * np.broadcast_to(t.target, (M.shape[0],)))
    return np.linalg.solve(A, b)


def two_plane(shape=(40, 60), near=(14, 26)):
    depth = np.full(shape, 20.0)
    depth[:, near[0] : near[1]] = 2.0
    img = texture(shape, 1.0, seed=3, lo=0.2, hi=0.5)
    img[:, near[0] : near[1]] = texture(shape, 1.0, seed=4, lo=0.7, hi=0.9)[:, near[0] : near[1]]
    return depth, img


class TestDisparity:
    def test_unit_depth(self):
        np.testing.assert_allclose(depth_to_disparity(np.ones((2, 2)), 20.0), 19.802, atol=1e-3)

    def test_far_is_zero(self):
        assert depth_to_disparity(np.full((1, 1), 1e6), 20.0)[0, 0] < 1e-4

    @given(st.floats(0.1, 100), st.floats(0.1, 50))
    def test_linear_in_wmax(self, d, wmax):
        D = np.full((2, 3), d)
        np.testing.assert_allclose(depth_to_disparity(D, 2 * wmax), 2 * depth_to_disparity(D, wmax), rtol=1e-14)

    def test_rejects_holes(self):
        with pytest.raises(ValueError):
            depth_to_disparity(np.array([[1.0, 0.0]]), 10.0)
        with pytest.raises(ValueError):
            depth_to_disparity(DepthMap(np.ones((1, 2)), np.array([[True, False]])), 10.0)
        with pytest.raises(ValueError):
            depth_to_disparity(np.ones((1, 1)), 0.0)

    def test_wmax_scaling(self):
        assert scaled_wmax(25.0, 640) == 25.0
        assert scaled_wmax(25.0, 160) == 6.25


class TestSaliency:
    def test_flat_mid_disparity(self):
        l = saliency_weights(np.full((3, 3), 0.4), np.full((3, 3), 10.0), 20.0)
        np.testing.assert_allclose(l, 0.5 + 1 / (1 + np.exp(5)))
        assert l[0, 0] == pytest.approx(0.5067, abs=1e-4)

    def test_edge_and_midpoint(self):
        L = np.zeros((1, 4))
        L[0, 1:] = 0.1
        L[0, 2:] = 0.11
        l = saliency_weights(L, np.zeros((1, 4)), 20.0)
        assert l[0, 0] == pytest.approx(1.0, abs=1e-6)
        assert l[0, 1] == pytest.approx(0.5)

    def test_range(self):
        img = rgb_texture((20, 20), 1.0, seed=1)
        W0 = np.random.default_rng(0).uniform(0, 20, (20, 20))
        l = saliency_weights(img, W0, 20.0)
        assert np.all(l > 0) and np.all(l < 2)


class TestOptimize:
    def test_data_only_returns_w0(self):
        W0 = np.random.default_rng(0).uniform(0, 20, (16, 16))
        l = np.random.default_rng(1).uniform(0.1, 1.9, (16, 16))
        W = optimize_disparity(W0, l, lam=0.0, mu=0.0)
        assert np.abs(W - W0).max() <= 1e-10

    def test_constant_is_fixed_point(self):
        W0 = np.full((12, 14), 7.5)
        l = np.random.default_rng(2).uniform(0.1, 1.9, W0.shape)
        W = optimize_disparity(W0, l, rgb_texture(W0.shape, seed=2), lam=1e3)
        np.testing.assert_allclose(W, 7.5, atol=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        img = rgb_texture((16, 16), 1.0, seed=seed)
        W0 = rng.uniform(0, 20, (16, 16))
        l = saliency_weights(img, W0, 20.0)
        W = optimize_disparity(W0, l, img)
        ref = dense_minimizer(disparity_stack([W0], [l], [img])).reshape(16, 16)
        assert np.abs(W - ref).max() <= 1e-8 * np.abs(ref).max()

    def test_video_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        frames = [rgb_texture((10, 12), 1.0, seed=s) for s in range(3)]
        W0 = [rng.uniform(0, 20, (10, 12)) for _ in range(3)]
        l = [saliency_weights(f, w, 20.0) for f, w in zip(frames, W0)]
        flows = [FlowField(rng.uniform(-1, 1, (10, 12)), rng.uniform(-1, 1, (10, 12))) for _ in range(2)]
        W = optimize_disparity(W0, l, frames, flows=flows)
        ref = dense_minimizer(disparity_stack(W0, l, frames, flows=flows))
        assert np.abs(np.concatenate([w.ravel() for w in W]) - ref).max() <= 1e-8 * np.abs(ref).max()
        assert any(t.name.startswith("temporal") for t in disparity_stack(W0, l, frames, flows=flows).terms)

    @settings(max_examples=10)
    @given(st.integers(0, 2**31))
    def test_energy_not_above_w0(self, seed):
        rng = np.random.default_rng(seed)
        img = rgb_texture((12, 12), 1.0, seed=seed % 1000)
        W0 = rng.uniform(0, 20, (12, 12))
        l = saliency_weights(img, W0, 20.0)
        stack = disparity_stack([W0], [l], [img])
        W = optimize_disparity(W0, l, img)
        assert warp_energy(stack, W) <= warp_energy(stack, W0)

    @settings(max_examples=25)
    @given(st.integers(0, 2**31))
    def test_salient_pixels_move_less(self, seed):
        # Saliency is drawn independently of the disparity field, so both
        # groups face the same smoothing pressure on average.
        rng = np.random.default_rng(seed)
        textured = ndimage.gaussian_filter(rng.random((40, 48)), 4) > 0.5
        img = np.where(textured, texture((40, 48), 1.0, seed % 9973, 0, 1), 0.5)
        W0 = 20 * texture((40, 48), 3.0, seed % 9973 + 1, 0.0, 0.9)
        l = saliency_weights(img, W0, 20.0)
        moved = np.abs(optimize_disparity(W0, l, img) - W0)
        hi, lo = l >= 1, l < 0.6
        if hi.any() and lo.any():
            assert moved[hi].mean() <= moved[lo].mean()


class TestRender:
    def test_zero_disparity_identity(self):
        img = rgb_texture((20, 24), seed=1)
        pair = render_stereo(img, np.zeros((20, 24)))
        np.testing.assert_allclose(pair.left, img, atol=1e-12)
        np.testing.assert_allclose(pair.right, img, atol=1e-12)

    @pytest.mark.parametrize("d", [6.0, 4.6])
    def test_constant_disparity_is_rigid_shift(self, d):
        img = texture((40, 80), 2.0, seed=2)
        pair = render_stereo(img, np.full(img.shape, d), window=False)
        xs = np.arange(80, dtype=float)
        expect_right = np.stack([np.interp(xs + d / 2, xs, row) for row in img])
        expect_left = np.stack([np.interp(xs - d / 2, xs, row) for row in img])
        inner = (slice(None), slice(10, -10))
        assert psnr(pair.right[inner], expect_right[inner]) >= 40.0
        assert psnr(pair.left[inner], expect_left[inner]) >= 40.0

    def test_window_puts_nearest_at_zero(self):
        depth, img = two_plane()
        W = depth_to_disparity(depth, 10.0)
        pair = render_stereo(img, W)
        assert pair.shift == pytest.approx(W.max() / 2)
        near = (slice(None), slice(17, 23))
        np.testing.assert_allclose(pair.left[near], img[near], atol=1e-12)
        np.testing.assert_allclose(pair.right[near], img[near], atol=1e-12)
        # at the occluding edge far cores overlap with weight exp(W_far - W_max)
        strip = (slice(None), slice(14, 26))
        assert np.abs(pair.left[strip] - img[strip]).max() < 0.01
        assert np.abs(pair.right[strip] - img[strip]).max() < 0.01
        # constant disparity under the window: nothing moves
        flat = render_stereo(img, np.full(img.shape, 8.0))
        np.testing.assert_allclose(flat.right, img, atol=1e-12)

    def test_two_plane_near_moves_more(self):
        depth, img = two_plane()
        W = depth_to_disparity(depth, 10.0)
        pair = render_stereo(img, W, window=False)
        bright = pair.left.mean(axis=0) > 0.6
        cols = np.flatnonzero(bright)
        d_near, d_far = W[0, 20] / 2, W[0, 0] / 2
        # leading edge moves with the near plane; the trailing side is the
        # disocclusion, where near blobs win and stretch the strip
        assert cols.max() == pytest.approx(25 + d_near, abs=1)
        assert cols.min() <= 14 + d_near
        far_rows = pair.left[:, 40:55]
        xs = np.arange(60, dtype=float)
        expect = np.stack([np.interp(xs - d_far, xs, row) for row in img])[:, 40:55]
        assert np.abs(far_rows - expect).max() < 0.05
        for v in (pair.left, pair.right):
            assert np.all(np.isfinite(v)) and v.min() >= 0 and v.max() <= 1

    def test_near_wins_overlap(self):
        img = np.zeros((3, 12))
        img[:, 4] = 1.0
        W = np.zeros((3, 12))
        W[:, 4] = 4.0  # the bright pixel moves 2 px onto a far pixel
        left = splat_view(img, W / 2, W - W.max())
        flat = splat_view(img, W / 2, np.zeros_like(W))
        assert left[1, 6] > 0.95 and left[1, 6] > flat[1, 6]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            render_stereo(np.zeros((4, 5)), np.zeros((4, 4)))
        with pytest.raises(ValueError):
            StereoPair(np.zeros((2, 2)), np.zeros((2, 3)))


class TestAnaglyph:
    def test_equal_views_give_original(self):
        img = rgb_texture((6, 7), seed=3)
        np.testing.assert_array_equal(compose_anaglyph(StereoPair(img, img.copy())), img)

    def test_channel_routing(self):
        red = np.zeros((2, 2, 3))
        red[..., 0] = 1
        cyan = np.zeros((2, 2, 3))
        cyan[..., 1:] = 1
        np.testing.assert_array_equal(compose_anaglyph(StereoPair(red, cyan)), np.ones((2, 2, 3)))
        np.testing.assert_array_equal(compose_anaglyph(StereoPair(cyan, red)), np.zeros((2, 2, 3)))

    @pytest.mark.parametrize("d", [4, 6])
    def test_fringe_width(self, d):
        img = np.full((10, 60, 3), 0.2)
        img[:, 25:35] = 0.9
        pair = render_stereo(img, np.full((10, 60), float(d)), window=False)
        ana = compose_anaglyph(pair)
        fringe = np.abs(ana[5, :, 0] - ana[5, :, 1]) > 0.3
        assert fringe.sum() == 2 * d

    def test_other_formats(self):
        a, b = np.zeros((4, 3, 3)), np.ones((4, 3, 3))
        assert side_by_side(StereoPair(a, b)).shape == (4, 6, 3)
        il = interlaced(StereoPair(a, b))
        assert not il[0::2].any() and il[1::2].all()
