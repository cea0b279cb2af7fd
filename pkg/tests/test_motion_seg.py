import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from depthtransfer.imaging import to_gray
from depthtransfer.metrics import psnr
from depthtransfer.motion_seg import (
    contact_depth,
    equalize_to_darkest,
    estimate_homographies,
    median_background,
    motion_masks,
    motion_statistic,
    project,
    ransac_homography,
    read_homographies,
    segment_clip,
    warp_homography,
    write_homographies,
)
from synthetic import iou, moving_square_clip, rgb_texture, rotation_about, texture

PLANTED = np.array([[1.02, 0.03, 4.0], [-0.02, 0.98, -3.0], [1e-4, -5e-5, 1.0]])


@pytest.fixture(scope="module")
def moving():
    frames, truth, _ = moving_square_clip()
    return segment_clip(frames), truth


@pytest.fixture(scope="module")
def static():
    frames, _, homs = moving_square_clip(n=6, static=True)
    return segment_clip(frames), homs


class TestEqualize:
    def test_identical_frames_unchanged(self):
        f = rgb_texture((20, 24), seed=1)
        out, ref = equalize_to_darkest([f, f.copy(), f.copy()])
        for o in out:
            np.testing.assert_allclose(o, f, atol=1e-12)

    def test_single_frame(self):
        f = rgb_texture((10, 12), seed=2)
        out, ref = equalize_to_darkest([f])
        assert ref == 0 and out[0] is f

    def test_brightness_offset_matched(self):
        dark = texture((40, 50), seed=3, lo=0.1, hi=0.7)
        bright = dark + 0.2
        out, ref = equalize_to_darkest([bright, dark])
        assert ref == 1 and out[1] is dark
        bins = np.linspace(0, 1, 257)
        h_out, _ = np.histogram(to_gray(out[0]), bins)
        h_ref, _ = np.histogram(to_gray(dark), bins)
        # cumulative histograms agree up to a one-bin shift
        c_out, c_ref = np.cumsum(h_out), np.cumsum(h_ref)
        assert np.all(c_out[1:] >= c_ref[:-1]) and np.all(c_ref[1:] >= c_out[:-1])

    def test_empty(self):
        with pytest.raises(ValueError):
            equalize_to_darkest([])


class TestHomography:
    def test_identical_frames_identity(self):
        f = texture((80, 100), 1.5, seed=4)
        H, flags = estimate_homographies([f, f, f])
        assert not any(flags)
        for h in H:
            assert np.abs(h - np.eye(3)).max() <= 1e-3

    def test_planted_with_half_outliers(self):
        rng = np.random.default_rng(0)
        src = rng.uniform(0, 200, (120, 2))
        dst = project(PLANTED, src) + rng.normal(0, 0.1, (120, 2))
        dst[60:] = rng.uniform(0, 200, (60, 2))
        H, inl = ransac_homography(src, dst)
        assert inl[:60].mean() >= 0.95
        corners = np.array([[0, 0], [200, 0], [0, 200], [200, 200]], dtype=float)
        assert np.linalg.norm(project(H, corners) - project(PLANTED, corners), axis=1).max() <= 0.5

    def test_planted_between_frames(self):
        f = texture((100, 130), 1.5, seed=5)
        g, _ = warp_homography(f, rotation_about(65, 50, 1.5, 2.0, -1.0))
        H, flags = estimate_homographies([f, g], ref=0)
        truth = np.linalg.inv(rotation_about(65, 50, 1.5, 2.0, -1.0))
        corners = np.array([[0, 0], [129, 0], [0, 99], [129, 99]], dtype=float)
        assert not flags[1]
        assert np.linalg.norm(project(H[1], corners) - project(truth, corners), axis=1).max() <= 0.5

    def test_textureless_flagged(self):
        f = np.full((60, 60), 0.5)
        H, flags = estimate_homographies([f, f, f])
        assert flags == [True, False, True]
        for h in H:
            np.testing.assert_array_equal(h, np.eye(3))

    def test_too_few_points(self):
        H, _ = ransac_homography(np.zeros((3, 2)), np.zeros((3, 2)))
        assert H is None

    @settings(max_examples=10)
    @given(st.floats(-3, 3), st.floats(-4, 4), st.floats(-4, 4))
    def test_unwarp_of_warp_is_identity(self, deg, tx, ty):
        f = texture((80, 96), 2.5, seed=6)
        H = rotation_about(48, 40, deg, tx, ty)
        warped, _ = warp_homography(f, H)
        back, cov = warp_homography(warped, np.linalg.inv(H))
        inner = np.zeros(f.shape, dtype=bool)
        inner[12:-12, 12:-12] = True
        assert psnr(back, f, inner & cov) >= 35.0

    def test_csv_round_trip(self, tmp_path):
        Hs = [np.eye(3), PLANTED, np.linalg.inv(PLANTED)]
        write_homographies(tmp_path / "h.csv", Hs)
        header = (tmp_path / "h.csv").read_text().splitlines()[0].split(",")
        assert len(header) == 10
        for a, b in zip(read_homographies(tmp_path / "h.csv"), Hs):
            np.testing.assert_array_equal(a, b)


class TestBackground:
    def test_static_equals_frame(self):
        f = rgb_texture((8, 9), seed=1)
        B, valid = median_background([f, f, f])
        np.testing.assert_array_equal(B, f)
        assert valid.all()

    def test_minority_object_ignored(self):
        frames = [np.full((3, 3), 0.3) for _ in range(5)]
        frames[1][1, 1] = 0.9
        frames[3][1, 1] = 0.8
        B, _ = median_background(frames)
        assert B[1, 1] == 0.3

    def test_two_frames_average(self):
        B, _ = median_background([np.full((2, 2), 0.2), np.full((2, 2), 0.6)])
        np.testing.assert_allclose(B, 0.4)

    def test_uncovered_invalid(self):
        cov = [np.ones((2, 2), dtype=bool), np.ones((2, 2), dtype=bool)]
        cov[0][0, 0] = cov[1][0, 0] = False
        cov[1][1, 1] = False
        frames = [np.full((2, 2), 0.2), np.full((2, 2), 0.6)]
        B, valid = median_background(frames, cov)
        assert not valid[0, 0] and valid[1, 1]
        assert B[1, 1] == 0.2


class TestStatistic:
    def test_hand_values(self):
        s = motion_statistic(np.full((1, 1), 0.6), np.full((1, 1), 0.5), np.ones((1, 1)))
        assert s[0, 0] == pytest.approx(0.02)
        assert motion_statistic(np.full((1, 1), 0.6), np.full((1, 1), 0.5), np.zeros((1, 1)))[0, 0] == 0.0

    def test_threshold(self):
        W = np.full((5, 5), 0.5)
        W[1:4, 1:4] = 0.6
        B = np.full((5, 5), 0.5)

        class Flow:
            def magnitude(self):
                return np.ones((5, 5))

        (m,) = motion_masks([W], B, np.ones((5, 5), dtype=bool), [Flow()], [np.eye(3)])
        # the 3x3 blob survives the cross-shaped opening without its corners
        np.testing.assert_array_equal(m, ndimage.binary_opening(W > 0.55, ndimage.generate_binary_structure(2, 1)))
        (m0,) = motion_masks([W], B, np.ones((5, 5), dtype=bool), [None], [np.eye(3)])
        assert not m0.any()

    def test_invalid_background_masked(self):
        W = np.full((5, 5), 0.9)

        class Flow:
            def magnitude(self):
                return np.ones((5, 5))

        (m,) = motion_masks([W], np.full((5, 5), 0.5), np.zeros((5, 5), dtype=bool), [Flow()], [np.eye(3)])
        assert not m.any()


class TestContactDepth:
    def test_constant_ground(self):
        m = np.zeros((20, 20), dtype=bool)
        m[5:11, 5:11] = True
        (M,) = contact_depth([m], [np.full((20, 20), 5.0)])
        assert np.all(M[m] == 5.0) and np.isnan(M[~m]).all()

    def test_bottom_edge_uses_own_row(self):
        m = np.zeros((12, 12), dtype=bool)
        m[6:, 2:8] = True
        d = np.tile(np.arange(12.0), (12, 1))
        (M,) = contact_depth([m], [d])
        assert np.all(M[m] == np.median(np.arange(2.0, 8.0)))

    def test_two_components(self):
        m = np.zeros((20, 30), dtype=bool)
        m[3:9, 2:8] = True
        m[3:9, 18:24] = True
        d = np.full((20, 30), 1.0)
        d[9:12, :15] = 3.0
        d[9:12, 15:] = 7.0
        (M,) = contact_depth([m], [d])
        assert np.all(M[3:9, 2:8] == 3.0) and np.all(M[3:9, 18:24] == 7.0)

    def test_small_components_dropped(self):
        m = np.zeros((10, 10), dtype=bool)
        m[2:6, 2:6] = True  # 16 px
        (M,) = contact_depth([m], [np.ones((10, 10))])
        assert np.isnan(M).all()

    @settings(max_examples=20)
    @given(st.integers(0, 2**31))
    def test_constant_per_component(self, seed):
        rng = np.random.default_rng(seed)
        m = ndimage.binary_dilation(rng.random((24, 24)) > 0.97, iterations=3)
        (M,) = contact_depth([m], [rng.uniform(1, 10, (24, 24))])
        labels, n = ndimage.label(m, np.ones((3, 3)))
        for lab in range(1, n + 1):
            vals = M[labels == lab]
            assert np.all(vals > 0) or np.isnan(vals).all()
            assert np.unique(vals).size == 1


def test_static_clip_has_empty_masks(static):
    seg, _ = static
    assert max(m.mean() for m in seg.masks) <= 0.01
    assert not any(seg.low_confidence)


def test_static_clip_homographies_recovered(static):
    seg, homs = static
    ref = seg.reference
    corners = np.array([[10, 10], [180, 10], [10, 110], [180, 110]], dtype=float)
    for k, H in enumerate(seg.homographies):
        truth = homs[ref] @ np.linalg.inv(homs[k])
        assert np.linalg.norm(project(H, corners) - project(truth, corners), axis=1).max() <= 0.5


def test_moving_square_iou(moving):
    seg, truth = moving
    scores = [iou(m, t) for m, t in zip(seg.masks, truth)]
    assert min(scores) >= 0.9, scores
