import numpy as np
import pytest

from charanim.augment import (
    AugmentConfig,
    ThinPlateSpline,
    apply_affine,
    apply_tps,
    augment_sample,
    random_affine,
    tps_warp,
    _control_grid,
)
from charanim.dataset import Pose, TrainingSample

from conftest import make_test_sample, make_test_schema


def plant_probe(sample, x, y, color=(0.12, 0.34, 0.56)):
    image = sample.image.copy()
    image[y, x] = color
    return TrainingSample(sample.name, image, sample.pose.copy(), sample.mask), color


def locate_color(image, color, atol=1e-4):
    hits = np.argwhere(np.abs(image - np.asarray(color)).max(axis=2) <= atol)
    assert len(hits) > 0, "probe pixel vanished"
    return hits.mean(axis=0)  # (y, x) centroid


class TestAffine:
    def test_identity(self, sample):
        out = apply_affine(sample, 0, 0, False)
        assert np.array_equal(out.image, sample.image)
        assert np.array_equal(out.mask, sample.mask)
        assert out.pose.positions == sample.pose.positions

    def test_hflip_reflection(self, sample):
        w = sample.image.shape[1]
        out = apply_affine(sample, 0, 0, True)
        assert np.array_equal(out.image, sample.image[:, ::-1])
        for kp_id, (x, y) in sample.pose.positions.items():
            fx, fy = out.pose.positions[kp_id]
            assert fx == w - 1 - x and fy == y

    def test_translate_moves_keypoints_and_probe(self, sample):
        probe_sample, color = plant_probe(sample, 20, 30)
        out = apply_affine(probe_sample, 10, 0, False)
        for kp_id, (x, y) in probe_sample.pose.positions.items():
            ox, oy = out.pose.positions[kp_id]
            assert ox == x + 10 and oy == y
        py, px = locate_color(out.image, color)
        assert (px, py) == (30, 30)

    def test_vacated_pixels_filled_with_background(self, sample):
        bg = (0.25, 0.5, 0.75)
        out = apply_affine(sample, 5, 3, False, background=bg)
        assert np.allclose(out.image[:3, :], bg)
        assert np.allclose(out.image[:, :5], bg)
        assert not out.mask[:3, :].any()

    def test_offcanvas_keypoints_clamped_and_flagged(self, schema):
        sample = make_test_sample(schema)
        sample.pose.positions[0] = (2.0, 2.0)
        out = apply_affine(sample, -10, 0, False)
        assert out.pose.positions[0] == (0.0, 2.0)
        assert 0 in out.clamped_keypoints
        assert 3 not in out.clamped_keypoints

    def test_layer_and_state_untouched(self):
        schema = make_test_schema(with_states=True)
        sample = make_test_sample(schema)
        out = apply_affine(sample, 4, -2, True)
        assert out.pose.active_states == sample.pose.active_states

    def test_random_affine_reproducible(self, sample):
        cfg = AugmentConfig(apply_prob=1.0)
        a = random_affine(sample, cfg, np.random.default_rng(5))
        b = random_affine(sample, cfg, np.random.default_rng(5))
        assert np.array_equal(a.image, b.image)
        assert a.pose.positions == b.pose.positions


class TestThinPlateSpline:
    def test_interpolates_control_points(self):
        rng = np.random.default_rng(0)
        src = _control_grid((64, 64), 4)
        dst = src + rng.uniform(-4, 4, src.shape)
        tps = ThinPlateSpline(src, dst)
        assert np.abs(tps.transform(src) - dst).max() < 1e-6

    def test_uniform_shift_is_pure_translation(self):
        src = _control_grid((64, 64), 4)
        tps = ThinPlateSpline(src, src + np.array([3.0, -2.0]))
        pts = np.array([[10.0, 20.0], [40.0, 50.0], [33.3, 17.7]])
        out = tps.transform(pts)
        assert np.abs(out - (pts + np.array([3.0, -2.0]))).max() < 1e-6

    def test_degenerate_points_raise(self):
        src = np.zeros((16, 2))  # all control points coincide
        with pytest.raises(np.linalg.LinAlgError):
            ThinPlateSpline(src, src + 1.0)


class TestTpsWarp:
    def test_zero_shift_identity(self, sample):
        src = _control_grid((64, 64), 4)
        out = apply_tps(sample, src, src.copy())
        assert np.abs(out.image - sample.image).max() <= 1e-6
        assert np.array_equal(out.mask, sample.mask)
        for kp_id, (x, y) in sample.pose.positions.items():
            ox, oy = out.pose.positions[kp_id]
            assert abs(ox - x) < 1e-6 and abs(oy - y) < 1e-6

    def test_uniform_shift_moves_keypoints_exactly(self, sample):
        src = _control_grid((64, 64), 4)
        out = apply_tps(sample, src, src + np.array([4.0, 2.0]))
        for kp_id, (x, y) in sample.pose.positions.items():
            ox, oy = out.pose.positions[kp_id]
            assert ox == pytest.approx(min(x + 4.0, 63.0), abs=1e-6)
            assert oy == pytest.approx(min(y + 2.0, 63.0), abs=1e-6)

    def test_mask_stays_binary(self, sample):
        cfg = AugmentConfig(apply_prob=1.0, tps_max_shift_frac=0.08)
        out = tps_warp(sample, cfg, np.random.default_rng(3))
        assert set(np.unique(out.mask)) <= {0, 1}

    def test_probe_pixel_consistency_256(self):
        schema = make_test_schema(size=(256, 256))
        cfg = AugmentConfig(apply_prob=1.0)
        rng = np.random.default_rng(11)
        for trial in range(5):
            sample = make_test_sample(schema, seed=trial)
            probes = {}
            image = sample.image.copy()
            for i, (kp_id, (x, y)) in enumerate(sample.pose.positions.items()):
                color = (0.01 + 0.07 * i, 0.93, 0.02 + 0.05 * i)
                yy, xx = int(round(y)), int(round(x))
                image[yy - 1 : yy + 2, xx - 1 : xx + 2] = color
                probes[kp_id] = color
            probed = TrainingSample(sample.name, image, sample.pose.copy(), sample.mask)
            out = tps_warp(probed, cfg, rng)
            for kp_id, color in probes.items():
                py, px = locate_color(out.image, color, atol=1e-3)
                ox, oy = out.pose.positions[kp_id]
                assert np.hypot(ox - px, oy - py) <= 1.5

    def test_reproducible_given_rng_state(self, sample):
        cfg = AugmentConfig(apply_prob=1.0)
        a = tps_warp(sample, cfg, np.random.default_rng(9))
        b = tps_warp(sample, cfg, np.random.default_rng(9))
        assert np.array_equal(a.image, b.image)
        assert a.pose.positions == b.pose.positions

    def test_retry_then_fail_on_degenerate_grids(self, sample, monkeypatch):
        calls = []

        def always_degenerate(*args, **kwargs):
            calls.append(1)
            raise np.linalg.LinAlgError("synthetic failure")

        monkeypatch.setattr("charanim.augment.apply_tps", always_degenerate)
        cfg = AugmentConfig(apply_prob=1.0)
        with pytest.raises(RuntimeError, match="degenerate"):
            tps_warp(sample, cfg, np.random.default_rng(0))
        assert len(calls) == 3


class TestComposite:
    def test_composite_probe_consistency(self):
        schema = make_test_schema(size=(256, 256))
        cfg = AugmentConfig(apply_prob=1.0, max_translate_frac=0.05)
        rng = np.random.default_rng(21)
        for trial in range(5):
            sample = make_test_sample(schema, seed=trial + 10)
            image = sample.image.copy()
            color = (0.05, 0.95, 0.11)
            x, y = sample.pose.positions[0]
            yy, xx = int(round(y)), int(round(x))
            image[yy - 1 : yy + 2, xx - 1 : xx + 2] = color
            probed = TrainingSample(sample.name, image, sample.pose.copy(), sample.mask)
            out = augment_sample(probed, cfg, rng)
            if 0 in out.clamped_keypoints:
                continue  # probe block may be cut at the border
            py, px = locate_color(out.image, color, atol=1e-3)
            ox, oy = out.pose.positions[0]
            # affine parts are exact, so the composite bound stays the TPS one
            assert np.hypot(ox - px, oy - py) <= 1.5

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            AugmentConfig(max_translate_frac=0.7)
        with pytest.raises(ValueError):
            AugmentConfig(tps_grid=1)
        with pytest.raises(ValueError):
            AugmentConfig(apply_prob=1.2)
