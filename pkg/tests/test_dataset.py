import json

import numpy as np
import pytest

from charanim.dataset import (
    CharacterDataset,
    DatasetError,
    KeypointDef,
    KeypointSchema,
    Pose,
    TrainingSample,
    auto_assign_colors,
    datasets_equal,
    extract_mask,
    load_dataset,
    resample_dataset,
    save_dataset,
    validate_pose,
    validate_schema,
)
from charanim.synthetic import make_synthetic_character

from conftest import make_test_schema


def write_minimal_dataset(root, with_colors=True, positions=None, n_frames=1):
    """Two keypoints across two layers, 8x8 white frames."""
    schema = {
        "layer_count": 2,
        "reference_resolution": [8, 8],
        "keypoints": [
            {"id": 0, "name": "a", "layer": 0},
            {"id": 1, "name": "b", "layer": 1},
        ],
        "skeleton": [[0, 1]],
    }
    if with_colors:
        schema["keypoints"][0]["color"] = [1.0, 0.0, 0.0]
        schema["keypoints"][1]["color"] = [0.0, 1.0, 0.0]
    (root / "schema.json").write_text(json.dumps(schema))
    frames = root / "frames"
    frames.mkdir()
    from PIL import Image

    for i in range(n_frames):
        Image.new("RGB", (8, 8), (255, 255, 255)).save(frames / f"f{i}.png")
        ann = {"positions": {"0": positions or [2, 2], "1": [5, 5]}, "active_states": {}}
        (frames / f"f{i}.keypoints.json").write_text(json.dumps(ann))
    return root


class TestLoadDataset:
    def test_minimal_valid_input(self, tmp_path):
        write_minimal_dataset(tmp_path)
        ds = load_dataset(tmp_path)
        assert len(ds.samples) == 1
        assert ds.schema.layer_count == 2
        assert not ds.has_masks

    def test_out_of_canvas_position_names_keypoint(self, tmp_path):
        write_minimal_dataset(tmp_path, positions=[-5, 10])
        with pytest.raises(DatasetError, match="keypoint 0"):
            load_dataset(tmp_path)

    def test_missing_schema_fatal(self, tmp_path):
        with pytest.raises(DatasetError, match="schema"):
            load_dataset(tmp_path)

    def test_unknown_keypoint_id_names_file(self, tmp_path):
        write_minimal_dataset(tmp_path)
        ann_path = tmp_path / "frames" / "f0.keypoints.json"
        ann = json.loads(ann_path.read_text())
        ann["positions"]["7"] = [1, 1]
        ann_path.write_text(json.dumps(ann))
        with pytest.raises(DatasetError, match="f0.keypoints.json"):
            load_dataset(tmp_path)

    def test_image_size_mismatch_fatal(self, tmp_path):
        from PIL import Image

        write_minimal_dataset(tmp_path)
        Image.new("RGB", (9, 8), (255, 255, 255)).save(tmp_path / "frames" / "f0.png")
        with pytest.raises(DatasetError, match="f0.png"):
            load_dataset(tmp_path)

    def test_mask_size_mismatch_fatal(self, tmp_path):
        from PIL import Image

        write_minimal_dataset(tmp_path)
        (tmp_path / "masks").mkdir()
        Image.new("L", (4, 4), 255).save(tmp_path / "masks" / "f0.png")
        with pytest.raises(DatasetError, match="mask"):
            load_dataset(tmp_path)

    def test_partial_masks_fatal(self, tmp_path):
        from PIL import Image

        write_minimal_dataset(tmp_path, n_frames=2)
        (tmp_path / "masks").mkdir()
        Image.new("L", (8, 8), 255).save(tmp_path / "masks" / "f0.png")
        with pytest.raises(DatasetError, match="masks"):
            load_dataset(tmp_path)

    def test_mask_thresholded_at_128(self, tmp_path):
        from PIL import Image

        write_minimal_dataset(tmp_path)
        (tmp_path / "masks").mkdir()
        arr = np.zeros((8, 8), dtype=np.uint8)
        arr[0, 0] = 127
        arr[0, 1] = 128
        arr[0, 2] = 255
        Image.fromarray(arr, mode="L").save(tmp_path / "masks" / "f0.png")
        ds = load_dataset(tmp_path)
        mask = ds.samples[0].mask
        assert mask[0, 0] == 0 and mask[0, 1] == 1 and mask[0, 2] == 1
        assert set(np.unique(mask)) <= {0, 1}

    def test_color_autoassignment_deterministic(self, tmp_path):
        write_minimal_dataset(tmp_path, with_colors=False)
        first = load_dataset(tmp_path, color_seed=7)
        second = load_dataset(tmp_path, color_seed=7)
        colors_a = [kp.color for kp in first.schema.keypoints]
        colors_b = [kp.color for kp in second.schema.keypoints]
        assert colors_a == colors_b
        third = load_dataset(tmp_path, color_seed=8)
        assert colors_a != [kp.color for kp in third.schema.keypoints]

    def test_autoassigned_colors_separated(self):
        colors = auto_assign_colors(12, [], seed=0)
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                sep = max(abs(a - b) for a, b in zip(colors[i], colors[j]))
                assert sep >= 0.1


class TestSchemaValidation:
    def test_close_colors_rejected(self):
        schema = make_test_schema()
        bad = list(schema.keypoints)
        bad[1] = KeypointDef(1, "a1", 0, (1.0, 0.05, 0.0), 2.0, 6.0)
        with pytest.raises(DatasetError, match="indistinguishable"):
            validate_schema(KeypointSchema(tuple(bad), 2, schema.skeleton, (64, 64)))

    def test_radius_below_sigma_rejected(self):
        kp = [KeypointDef(0, "a", 0, (1.0, 0.0, 0.0), sigma=4.0, radius=2.0)]
        with pytest.raises(DatasetError, match="radius"):
            validate_schema(KeypointSchema(tuple(kp), 1, (), (8, 8)))

    def test_empty_layer_rejected(self):
        kp = [KeypointDef(0, "a", 0, (1.0, 0.0, 0.0), 2.0, 6.0)]
        with pytest.raises(DatasetError, match="layer 1"):
            validate_schema(KeypointSchema(tuple(kp), 2, (), (8, 8)))

    def test_skeleton_self_edge_rejected(self):
        kp = [
            KeypointDef(0, "a", 0, (1.0, 0.0, 0.0), 2.0, 6.0),
            KeypointDef(1, "b", 0, (0.0, 1.0, 0.0), 2.0, 6.0),
        ]
        with pytest.raises(DatasetError, match="self-edge"):
            validate_schema(KeypointSchema(tuple(kp), 1, ((0, 0),), (8, 8)))

    def test_skeleton_unknown_id_rejected(self):
        kp = [
            KeypointDef(0, "a", 0, (1.0, 0.0, 0.0), 2.0, 6.0),
            KeypointDef(1, "b", 0, (0.0, 1.0, 0.0), 2.0, 6.0),
        ]
        with pytest.raises(DatasetError, match="unknown keypoint 9"):
            validate_schema(KeypointSchema(tuple(kp), 1, ((0, 9),), (8, 8)))


class TestPoseValidation:
    def test_state_group_needs_exactly_one_active(self):
        schema = make_test_schema(with_states=True)
        pose = Pose(
            positions={0: (1, 1), 1: (2, 2), 2: (3, 3), 3: (4, 4), 4: (5, 5)},
            active_states={},
        )
        with pytest.raises(DatasetError, match="state group 0"):
            validate_pose(pose, schema)

    def test_missing_position_rejected(self):
        schema = make_test_schema()
        pose = Pose(positions={0: (1, 1), 1: (2, 2), 2: (3, 3)})
        with pytest.raises(DatasetError, match="keypoint 3"):
            validate_pose(pose, schema)

    def test_inactive_state_member_needs_no_position(self):
        schema = make_test_schema(with_states=True)
        pose = Pose(
            positions={0: (1, 1), 1: (2, 2), 2: (3, 3), 3: (4, 4), 4: (5, 5)},
            active_states={0: 4},
        )
        validate_pose(pose, schema)


class TestRoundTrip:
    def test_save_load_round_trip(self, tmp_path):
        ds = make_synthetic_character(4, (64, 64), seed=5)
        save_dataset(ds, tmp_path / "char")
        reloaded = load_dataset(tmp_path / "char")
        assert datasets_equal(ds, reloaded)

    def test_double_round_trip(self, tmp_path):
        ds = make_synthetic_character(3, (64, 64), seed=2)
        save_dataset(ds, tmp_path / "a")
        first = load_dataset(tmp_path / "a")
        save_dataset(first, tmp_path / "b")
        second = load_dataset(tmp_path / "b")
        assert datasets_equal(first, second)


class TestExtractMask:
    def test_uniform_background_all_zero_warns(self):
        image = np.ones((8, 8, 3), dtype=np.float32)
        with pytest.warns(UserWarning, match="all-background"):
            mask = extract_mask(image, (1.0, 1.0, 1.0), 0.05)
        assert not mask.any()

    def test_red_square_exact_pixel_count(self):
        image = np.ones((32, 32, 3), dtype=np.float32)
        image[10:20, 5:15] = (1.0, 0.0, 0.0)
        mask = extract_mask(image, (1.0, 1.0, 1.0), 0.05)

        # independent per-pixel scan
        expected = 0
        for y in range(32):
            for x in range(32):
                if max(abs(image[y, x, c] - 1.0) for c in range(3)) > 0.05:
                    expected += 1
        assert expected == 100
        assert int(mask.sum()) == expected
        assert mask[15, 10] == 1 and mask[0, 0] == 0

    def test_saturating_tolerance_all_zero(self):
        rng = np.random.default_rng(0)
        image = rng.random((16, 16, 3)).astype(np.float32)
        with pytest.warns(UserWarning):
            mask = extract_mask(image, (0.5, 0.5, 0.5), 1.0)
        assert not mask.any()

    def test_exact_on_two_color_image(self):
        image = np.ones((16, 16, 3), dtype=np.float32)
        image[4:8, 4:8] = (0.2, 0.4, 0.6)
        mask = extract_mask(image, (1.0, 1.0, 1.0), 0.0)
        expected = np.zeros((16, 16), dtype=np.uint8)
        expected[4:8, 4:8] = 1
        assert np.array_equal(mask, expected)

    def test_negative_tolerance_rejected(self):
        with pytest.raises(ValueError):
            extract_mask(np.ones((4, 4, 3), dtype=np.float32), (1, 1, 1), -0.1)


class TestResample:
    def test_resample_scales_positions(self):
        ds = make_synthetic_character(2, (128, 128), seed=0)
        half = resample_dataset(ds, (64, 64))
        assert half.schema.reference_resolution == (64, 64)
        assert half.samples[0].image.shape == (64, 64, 3)
        for kp_id, (x, y) in ds.samples[0].pose.positions.items():
            hx, hy = half.samples[0].pose.positions[kp_id]
            assert hx == pytest.approx(x * 0.5, abs=1e-2)
            assert hy == pytest.approx(y * 0.5, abs=1e-2)

    def test_identity_resample_returns_same(self):
        ds = make_synthetic_character(2, (64, 64), seed=0)
        assert resample_dataset(ds, (64, 64)) is ds
