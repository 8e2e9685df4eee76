"""Procedural articulated test character with exact keypoints, masks, and occlusion.

The figure has three depth layers drawn back-to-front in flat colors:
layer 0 a rear arm, layer 1 the torso and head, layer 2 a front arm. Because
every part is drawn with hard edges, wrong-layer pixels in generated images
show up as exact color mismatches. A configurable share of poses swings the
front arm across the torso so occlusion handling is actually exercised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import (
    CharacterDataset,
    KeypointDef,
    KeypointSchema,
    Pose,
    TrainingSample,
    validate_schema,
)

# Flat part colors, exact uint8 values so save/load round-trips bit-for-bit.
BACKGROUND = (255, 255, 255)
BACK_LIMB_COLOR = (200, 60, 60)
TORSO_COLOR = (60, 90, 200)
FRONT_LIMB_COLOR = (60, 180, 80)

KP_BACK_ELBOW = 0
KP_BACK_HAND = 1
KP_NECK = 2
KP_HIP = 3
KP_HEAD = 4
KP_FRONT_ELBOW = 5
KP_FRONT_HAND = 6

_KP_COLORS = {
    KP_BACK_ELBOW: (1.0, 0.0, 0.0),
    KP_BACK_HAND: (1.0, 1.0, 0.0),
    KP_NECK: (0.0, 1.0, 0.0),
    KP_HIP: (0.0, 1.0, 1.0),
    KP_HEAD: (1.0, 0.0, 1.0),
    KP_FRONT_ELBOW: (0.0, 0.0, 1.0),
    KP_FRONT_HAND: (1.0, 1.0, 1.0),
}

_KP_NAMES = {
    KP_BACK_ELBOW: "back_elbow",
    KP_BACK_HAND: "back_hand",
    KP_NECK: "neck",
    KP_HIP: "hip",
    KP_HEAD: "head",
    KP_FRONT_ELBOW: "front_elbow",
    KP_FRONT_HAND: "front_hand",
}

_KP_LAYERS = {
    KP_BACK_ELBOW: 0,
    KP_BACK_HAND: 0,
    KP_NECK: 1,
    KP_HIP: 1,
    KP_HEAD: 1,
    KP_FRONT_ELBOW: 2,
    KP_FRONT_HAND: 2,
}

_SKELETON = (
    (KP_HEAD, KP_NECK),
    (KP_NECK, KP_HIP),
    (KP_NECK, KP_BACK_ELBOW),
    (KP_BACK_ELBOW, KP_BACK_HAND),
    (KP_NECK, KP_FRONT_ELBOW),
    (KP_FRONT_ELBOW, KP_FRONT_HAND),
)


@dataclass
class FigureParams:
    """Joint configuration of one pose, in canvas pixels / radians."""

    sway_x: float
    sway_y: float
    back_upper: float  # shoulder->elbow angle, 0 = +x, pi/2 = down
    back_lower: float
    front_upper: float
    front_lower: float
    head_dx: float


def make_schema(size: tuple[int, int]) -> KeypointSchema:
    w, h = size
    sigma = 0.02 * h
    keypoints = tuple(
        KeypointDef(
            id=kp_id,
            name=_KP_NAMES[kp_id],
            layer_index=_KP_LAYERS[kp_id],
            color=_KP_COLORS[kp_id],
            sigma=sigma,
            radius=3.0 * sigma,
        )
        for kp_id in sorted(_KP_NAMES)
    )
    schema = KeypointSchema(
        keypoints=keypoints,
        layer_count=3,
        skeleton=_SKELETON,
        reference_resolution=(w, h),
        background_color=tuple(c / 255.0 for c in BACKGROUND),
    )
    validate_schema(schema)
    return schema


def _capsule(
    cover: np.ndarray, p0: tuple[float, float], p1: tuple[float, float], radius: float
) -> None:
    """Mark pixels within `radius` of segment p0-p1 in the boolean buffer."""
    h, w = cover.shape
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    px, py = p0
    qx, qy = p1
    dx, dy = qx - px, qy - py
    seg2 = dx * dx + dy * dy
    if seg2 == 0:
        d2 = (xs - px) ** 2 + (ys - py) ** 2
    else:
        t = ((xs - px) * dx + (ys - py) * dy) / seg2
        t = np.clip(t, 0.0, 1.0)
        d2 = (xs - (px + t * dx)) ** 2 + (ys - (py + t * dy)) ** 2
    cover |= d2 <= radius * radius


def _joints(params: FigureParams, size: tuple[int, int]) -> dict[str, tuple[float, float]]:
    w, h = size
    cx = w / 2.0 + params.sway_x
    neck = (cx, 0.34 * h + params.sway_y)
    hip = (cx, 0.72 * h + params.sway_y)
    head = (cx + params.head_dx, neck[1] - 0.14 * h)
    torso_r = 0.075 * w
    shoulder_y = neck[1] + 0.06 * h
    back_shoulder = (cx - 0.8 * torso_r, shoulder_y)
    front_shoulder = (cx + 0.8 * torso_r, shoulder_y)
    upper_len, lower_len = 0.16 * h, 0.14 * h

    def chain(anchor, a_upper, a_lower):
        elbow = (anchor[0] + upper_len * math.cos(a_upper), anchor[1] + upper_len * math.sin(a_upper))
        hand = (elbow[0] + lower_len * math.cos(a_lower), elbow[1] + lower_len * math.sin(a_lower))
        return elbow, hand

    back_elbow, back_hand = chain(back_shoulder, params.back_upper, params.back_lower)
    front_elbow, front_hand = chain(front_shoulder, params.front_upper, params.front_lower)
    return {
        "neck": neck,
        "hip": hip,
        "head": head,
        "back_shoulder": back_shoulder,
        "front_shoulder": front_shoulder,
        "back_elbow": back_elbow,
        "back_hand": back_hand,
        "front_elbow": front_elbow,
        "front_hand": front_hand,
    }


def render_figure(
    params: FigureParams, size: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray], Pose]:
    """Rasterize one pose.

    Returns (image float32 [0,1], mask uint8, per-layer coverage buffers,
    pose). Coverage buffers record which pixels each layer painted before
    later layers drew over them, so occlusion ground truth stays exact.
    """
    w, h = size
    joints = _joints(params, size)
    torso_r = 0.075 * w
    limb_r = 0.035 * h
    head_r = 0.09 * h

    coverage = [np.zeros((h, w), dtype=bool) for _ in range(3)]
    _capsule(coverage[0], joints["back_shoulder"], joints["back_elbow"], limb_r)
    _capsule(coverage[0], joints["back_elbow"], joints["back_hand"], limb_r)
    _capsule(coverage[1], joints["neck"], joints["hip"], torso_r)
    _capsule(coverage[1], joints["neck"], joints["head"], 0.45 * torso_r)
    _capsule(coverage[1], joints["head"], joints["head"], head_r)
    _capsule(coverage[2], joints["front_shoulder"], joints["front_elbow"], limb_r)
    _capsule(coverage[2], joints["front_elbow"], joints["front_hand"], limb_r)

    image = np.empty((h, w, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    for cover, color in zip(coverage, (BACK_LIMB_COLOR, TORSO_COLOR, FRONT_LIMB_COLOR)):
        image[cover] = color

    mask = (coverage[0] | coverage[1] | coverage[2]).astype(np.uint8)
    pose = Pose(
        positions={
            KP_BACK_ELBOW: joints["back_elbow"],
            KP_BACK_HAND: joints["back_hand"],
            KP_NECK: joints["neck"],
            KP_HIP: joints["hip"],
            KP_HEAD: joints["head"],
            KP_FRONT_ELBOW: joints["front_elbow"],
            KP_FRONT_HAND: joints["front_hand"],
        }
    )
    return image.astype(np.float32) / 255.0, mask, coverage, pose


def sample_params(
    rng: np.random.Generator, size: tuple[int, int], crossing: bool
) -> FigureParams:
    w, h = size
    back_upper = rng.uniform(0.55, 0.95) * math.pi
    front_upper = (
        rng.uniform(0.62, 0.92) * math.pi if crossing else rng.uniform(0.08, 0.38) * math.pi
    )
    return FigureParams(
        sway_x=rng.uniform(-0.05, 0.05) * w,
        sway_y=rng.uniform(-0.03, 0.03) * h,
        back_upper=back_upper,
        back_lower=back_upper + rng.uniform(-0.2, 0.2) * math.pi,
        front_upper=front_upper,
        front_lower=front_upper + rng.uniform(-0.2, 0.2) * math.pi,
        head_dx=rng.uniform(-0.03, 0.03) * w,
    )


def front_occludes_torso(sample: TrainingSample, min_pixels: int = 20) -> bool:
    """True when the front limb visibly covers torso area in this sample.

    The torso capsule is reconstructed exactly from the neck/hip/head
    keypoints, so front-limb pixels inside it mean the torso was overdrawn.
    """
    h, w = sample.image.shape[:2]
    torso = np.zeros((h, w), dtype=bool)
    neck = sample.pose.positions[KP_NECK]
    hip = sample.pose.positions[KP_HIP]
    head = sample.pose.positions[KP_HEAD]
    torso_r = 0.075 * w
    _capsule(torso, neck, hip, torso_r)
    _capsule(torso, neck, head, 0.45 * torso_r)
    _capsule(torso, head, head, 0.09 * h)
    front = np.asarray(FRONT_LIMB_COLOR, dtype=np.float32) / 255.0
    is_front = np.abs(sample.image - front).max(axis=2) < 1e-3
    return int((is_front & torso).sum()) >= min_pixels


def make_synthetic_character(
    n_poses: int,
    size: tuple[int, int] = (128, 128),
    seed: int = 0,
    crossing_frac: float = 0.4,
) -> CharacterDataset:
    """Generate a synthetic character dataset with exact annotations and masks.

    At least `crossing_frac` of the poses have the front arm crossing the
    torso (verified on pixels, redrawn if a sampled pose misses).
    """
    if n_poses < 2:
        raise ValueError(f"need at least 2 poses, got {n_poses}")
    rng = np.random.default_rng(seed)
    schema = make_schema(size)

    n_crossing = max(1, round(crossing_frac * n_poses))
    crossing_flags = np.zeros(n_poses, dtype=bool)
    crossing_flags[rng.permutation(n_poses)[:n_crossing]] = True

    samples = []
    for i in range(n_poses):
        for _ in range(20):
            params = sample_params(rng, size, crossing=bool(crossing_flags[i]))
            image, mask, coverage, pose = render_figure(params, size)
            overlap = int((coverage[2] & coverage[1]).sum())
            if not crossing_flags[i] or overlap >= 20:
                break
        samples.append(
            TrainingSample(name=f"pose_{i:03d}", image=image, pose=pose, mask=mask)
        )
    return CharacterDataset(schema=schema, samples=samples)
