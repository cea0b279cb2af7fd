import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthtransfer.correspondence import (
    WarpField,
    align_dense,
    apply_warp,
    confidence_from_distance,
    descriptor_distance,
    warp_confidence,
)
from depthtransfer.features import compute_dense_descriptors
from depthtransfer.imaging import DepthMap, spatial_gradients
from synthetic import texture


@pytest.fixture(scope="module")
def query_img():
    return texture((72, 96), 2.0, seed=11)


@pytest.fixture(scope="module")
def query_desc(query_img):
    return compute_dense_descriptors(query_img)


def test_self_alignment_identity(query_desc):
    warp = align_dense(query_desc, query_desc)
    dx, dy = warp.offsets()
    assert np.mean((dx == 0) & (dy == 0)) >= 0.99
    assert warp.valid.all()


@pytest.mark.parametrize("sx,sy", [(5, 0), (-3, 4)])
def test_planted_shift(query_img, query_desc, sx, sy):
    # cand[y, x] = query[y + sy, x + sx]: query pixel p lives at p - (sx, sy) in the candidate
    cand = np.roll(query_img, (-sy, -sx), axis=(0, 1))
    warp = align_dense(query_desc, compute_dense_descriptors(cand))
    dx, dy = warp.offsets()
    inner = (slice(16, -16), slice(16, -16))
    assert np.mean((dx[inner] == -sx) & (dy[inner] == -sy)) >= 0.9


def test_noise_candidate_low_confidence(query_img, query_desc):
    noise = np.random.default_rng(5).random(query_img.shape)
    nd = compute_dense_descriptors(noise)
    warp = align_dense(query_desc, nd)
    assert warp.shape == query_desc.shape[:2]
    assert warp_confidence(query_desc, nd, warp).mean() < 0.2


def test_shape_mismatch(query_desc):
    with pytest.raises(ValueError):
        align_dense(query_desc, query_desc[:-1])


class TestApplyWarp:
    def test_identity_value_and_gradient(self):
        d = DepthMap.from_array(np.random.default_rng(0).uniform(1, 10, (6, 7)))
        w = WarpField.identity(d.shape)
        v, ok = apply_warp(w, d, "value")
        np.testing.assert_array_equal(v, d.depth)
        assert ok.all()
        gx, gy, vx, vy = apply_warp(w, d, "gradient")
        ex, ey = spatial_gradients(d.depth)
        np.testing.assert_array_equal(gx, ex)
        np.testing.assert_array_equal(gy, ey)
        assert vx[:, :-1].all() and not vx[:, -1].any()
        assert vy[:-1].all() and not vy[-1].any()

    def test_constant_candidate_zero_gradients(self):
        rng = np.random.default_rng(1)
        d = DepthMap.from_array(np.full((8, 9), 4.0))
        w = WarpField.from_offsets(rng.integers(-3, 4, (8, 9)), rng.integers(-3, 4, (8, 9)))
        gx, gy, _, _ = apply_warp(w, d, "gradient")
        assert not gx.any() and not gy.any()

    def test_holes_propagate(self):
        arr = np.full((3, 4), 2.0)
        arr[1, 2] = 0.0
        d = DepthMap.from_array(arr)
        w = WarpField.identity(d.shape)
        _, ok = apply_warp(w, d, "value")
        assert not ok[1, 2] and ok.sum() == 11
        _, _, vx, vy = apply_warp(w, d, "gradient")
        assert not vx[1, 1] and not vx[1, 2] and not vy[0, 2] and not vy[1, 2]

    def test_out_of_frame_offsets_invalid(self):
        w = WarpField.from_offsets(np.full((3, 3), 2), np.zeros((3, 3), dtype=int))
        assert w.valid[:, 0].all() and not w.valid[:, 1:].any()

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            apply_warp(WarpField.identity((2, 2)), DepthMap.from_array(np.ones((2, 2))), "bilinear")

    @given(
        arrays(np.float64, (6, 6), elements=st.floats(0.5, 30.0)),
        arrays(np.int64, (6, 6), elements=st.integers(-4, 4)),
        arrays(np.int64, (6, 6), elements=st.integers(-4, 4)),
    )
    def test_sampling_creates_no_new_extremes(self, depth, dx, dy):
        d = DepthMap.from_array(depth)
        w = WarpField.from_offsets(dx, dy)
        gx, gy, _, _ = apply_warp(w, d, "gradient")
        ex, ey = spatial_gradients(depth)
        assert ex.min() <= gx.min() and gx.max() <= ex.max()
        assert ey.min() <= gy.min() and gy.max() <= ey.max()
        v, _ = apply_warp(w, d, "value")
        assert depth.min() <= v.min() and v.max() <= depth.max()


def test_self_alignment_transfers_depth_identically(query_img, query_desc):
    depth = DepthMap.from_array(1.0 + 10 * texture(query_img.shape, 3.0, seed=2))
    warp = align_dense(query_desc, query_desc)
    v, ok = apply_warp(warp, depth, "value")
    agree = ok & (v == depth.depth)
    assert agree.mean() >= 0.99


class TestConfidence:
    def test_hand_values(self):
        assert confidence_from_distance(0.0) >= 0.999
        assert confidence_from_distance(0.5) == pytest.approx(0.5)
        assert confidence_from_distance(1.0) <= 1e-3

    @given(st.floats(0, 2), st.floats(0, 2))
    def test_monotone_decreasing(self, a, b):
        lo, hi = sorted((a, b))
        assert confidence_from_distance(lo) >= confidence_from_distance(hi)

    def test_identity_warp_full_confidence(self, query_desc):
        w = WarpField.identity(query_desc.shape[:2])
        assert descriptor_distance(query_desc, query_desc, w).max() == 0.0
        assert warp_confidence(query_desc, query_desc, w).min() >= 0.999


def test_warp_dump_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    w = WarpField.from_offsets(rng.integers(-5, 6, (10, 12)), rng.integers(-5, 6, (10, 12)))
    w.save(tmp_path / "w.bin")
    back = WarpField.load(tmp_path / "w.bin")
    np.testing.assert_array_equal(back.x, w.x)
    np.testing.assert_array_equal(back.y, w.y)
    np.testing.assert_array_equal(back.valid, w.valid)
