import numpy as np
import pytest

from charanim.connectivity import label_components
from charanim.dataset import datasets_equal, load_dataset, save_dataset, validate_pose, validate_schema
from charanim.synthetic import (
    front_occludes_torso,
    FRONT_LIMB_COLOR,
    TORSO_COLOR,
    make_synthetic_character,
    render_figure,
    sample_params,
)


def test_sample_count_and_masks():
    ds = make_synthetic_character(10, (128, 128), seed=0)
    assert len(ds.samples) == 10
    assert ds.has_masks
    validate_schema(ds.schema)
    for s in ds.samples:
        validate_pose(s.pose, ds.schema, context=s.name)


def test_masks_single_4connected_component():
    ds = make_synthetic_character(10, (128, 128), seed=1)
    for s in ds.samples:
        labeling = label_components(s.mask, 4)
        assert labeling.count == 1, s.name


def test_front_limb_never_overwritten_by_torso():
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(10):
        params = sample_params(rng, (128, 128), crossing=True)
        image, mask, coverage, pose = render_figure(params, (128, 128))
        overlap = coverage[2] & coverage[1]
        if not overlap.any():
            continue
        hits += 1
        front = np.asarray(FRONT_LIMB_COLOR, dtype=np.float32) / 255.0
        assert np.allclose(image[overlap], front)
    assert hits >= 3  # crossing draws really do overlap


def test_occlusion_coverage_at_least_30_percent():
    for seed in (0, 1, 2):
        ds = make_synthetic_character(10, (128, 128), seed=seed)
        crossing = sum(front_occludes_torso(s) for s in ds.samples)
        assert crossing >= 3, seed


def test_keypoints_inside_mask():
    ds = make_synthetic_character(8, (128, 128), seed=3)
    for s in ds.samples:
        for kp_id, (x, y) in s.pose.positions.items():
            assert s.mask[int(round(y)), int(round(x))] == 1, (s.name, kp_id)


def test_round_trips_through_dataset_module(tmp_path):
    ds = make_synthetic_character(5, (96, 96), seed=6)
    save_dataset(ds, tmp_path / "char")
    assert datasets_equal(ds, load_dataset(tmp_path / "char"))


def test_determinism():
    a = make_synthetic_character(6, (64, 64), seed=9)
    b = make_synthetic_character(6, (64, 64), seed=9)
    assert datasets_equal(a, b)


def test_minimum_pose_count():
    with pytest.raises(ValueError):
        make_synthetic_character(1, (64, 64), seed=0)
