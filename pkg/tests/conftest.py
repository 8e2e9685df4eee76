import numpy as np
import pytest

from charanim.dataset import (
    CharacterDataset,
    KeypointDef,
    KeypointSchema,
    Pose,
    TrainingSample,
)


def make_test_schema(size=(64, 64), layer_count=2, with_states=False):
    """Small hand-built schema: two keypoints per layer, optional 2-way state group."""
    w, h = size
    keypoints = [
        KeypointDef(0, "a0", 0, (1.0, 0.0, 0.0), sigma=2.0, radius=6.0),
        KeypointDef(1, "a1", 0, (0.0, 1.0, 0.0), sigma=2.0, radius=6.0),
        KeypointDef(2, "b0", layer_count - 1, (0.0, 0.0, 1.0), sigma=2.0, radius=6.0),
        KeypointDef(3, "b1", layer_count - 1, (1.0, 1.0, 0.0), sigma=2.0, radius=6.0),
    ]
    if with_states:
        keypoints += [
            KeypointDef(4, "smile", 0, (1.0, 0.0, 1.0), sigma=2.0, radius=6.0, state_group=0),
            KeypointDef(5, "frown", 0, (0.0, 1.0, 1.0), sigma=2.0, radius=6.0, state_group=0),
        ]
    return KeypointSchema(
        keypoints=tuple(keypoints),
        layer_count=layer_count,
        skeleton=((0, 1), (2, 3)),
        reference_resolution=(w, h),
    )


def make_test_pose(schema, jitter=0.0, rng=None):
    w, h = schema.reference_resolution
    spots = {
        0: (w * 0.25, h * 0.25),
        1: (w * 0.75, h * 0.25),
        2: (w * 0.25, h * 0.75),
        3: (w * 0.75, h * 0.75),
        4: (w * 0.5, h * 0.5),
        5: (w * 0.5, h * 0.4),
    }
    positions = {}
    for kp in schema.keypoints:
        x, y = spots[kp.id]
        if jitter and rng is not None:
            x += rng.uniform(-jitter, jitter)
            y += rng.uniform(-jitter, jitter)
        positions[kp.id] = (float(np.clip(x, 0, w - 1)), float(np.clip(y, 0, h - 1)))
    states = {}
    if schema.state_groups():
        states = {g: members[0] for g, members in schema.state_groups().items()}
        positions = {
            k: v
            for k, v in positions.items()
            if schema.keypoint_by_id(k).state_group is None
            or states.get(schema.keypoint_by_id(k).state_group) == k
        }
    return Pose(positions=positions, active_states=states)


def make_test_sample(schema, seed=0, with_mask=True):
    rng = np.random.default_rng(seed)
    w, h = schema.reference_resolution
    image = (rng.integers(0, 256, size=(h, w, 3)) / 255.0).astype(np.float32)
    mask = None
    if with_mask:
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[h // 4 : 3 * h // 4, w // 4 : 3 * w // 4] = 1
    pose = make_test_pose(schema)
    return TrainingSample(name=f"s{seed}", image=image, pose=pose, mask=mask)


@pytest.fixture
def schema():
    return make_test_schema()


@pytest.fixture
def sample(schema):
    return make_test_sample(schema)


@pytest.fixture
def small_dataset(schema):
    samples = [make_test_sample(schema, seed=i) for i in range(3)]
    return CharacterDataset(schema=schema, samples=samples)
