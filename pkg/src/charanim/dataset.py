"""Character dataset: keypoint schema, poses, images, masks and their on-disk format.

Directory layout::

    character/
      schema.json                     layer count, resolution, keypoint defs, skeleton
      frames/<name>.png               RGB image at the schema's reference resolution
      frames/<name>.keypoints.json    {"positions": {id: [x, y]}, "active_states": {group: id}}
      masks/<name>.png                optional 8-bit grayscale, thresholded at 128

Masks are all-or-nothing across the dataset: a mix of masked and unmasked
frames would make mask-supervised training ill-posed, so the loader rejects it.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

# Minimum pairwise L-inf distance between keypoint colors; closer colors make
# the rendered condition ambiguous.
MIN_COLOR_SEPARATION = 0.1


class DatasetError(ValueError):
    """A schema, annotation, or image failed validation."""


@dataclass(frozen=True)
class KeypointDef:
    """One keypoint definition: identity, depth layer, blob appearance."""

    id: int
    name: str
    layer_index: int
    color: tuple[float, float, float]
    sigma: float
    radius: float
    state_group: int | None = None


@dataclass(frozen=True)
class KeypointSchema:
    """Per-character contract all poses validate against."""

    keypoints: tuple[KeypointDef, ...]
    layer_count: int
    skeleton: tuple[tuple[int, int], ...]
    reference_resolution: tuple[int, int]  # (width, height)
    background_color: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def keypoint_by_id(self, kp_id: int) -> KeypointDef:
        for kp in self.keypoints:
            if kp.id == kp_id:
                return kp
        raise DatasetError(f"unknown keypoint id {kp_id}")

    def state_groups(self) -> dict[int, list[int]]:
        """Map state_group -> member keypoint ids, in schema order."""
        groups: dict[int, list[int]] = {}
        for kp in self.keypoints:
            if kp.state_group is not None:
                groups.setdefault(kp.state_group, []).append(kp.id)
        return groups

    def layer_keypoints(self, layer: int) -> list[KeypointDef]:
        return [kp for kp in self.keypoints if kp.layer_index == layer]

    def to_json_dict(self) -> dict:
        out: dict = {
            "layer_count": self.layer_count,
            "reference_resolution": list(self.reference_resolution),
            "background_color": list(self.background_color),
            "keypoints": [],
            "skeleton": [list(e) for e in self.skeleton],
        }
        for kp in self.keypoints:
            entry: dict = {
                "id": kp.id,
                "name": kp.name,
                "layer": kp.layer_index,
                "color": list(kp.color),
                "sigma": kp.sigma,
                "radius": kp.radius,
            }
            if kp.state_group is not None:
                entry["state_group"] = kp.state_group
            out["keypoints"].append(entry)
        return out

    def content_hash(self) -> str:
        """Stable hash binding checkpoints to the schema they were trained on."""
        canon = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class Pose:
    """One concrete keypoint layout: positions plus discrete state selections.

    Positions are (x, y) in pixels at the schema's reference resolution.
    Inactive state-group members need no position.
    """

    positions: dict[int, tuple[float, float]]
    active_states: dict[int, int] = field(default_factory=dict)

    def copy(self) -> "Pose":
        return Pose(dict(self.positions), dict(self.active_states))

    def active_keypoints(self, schema: KeypointSchema) -> list[KeypointDef]:
        """Keypoints that contribute to rendering: non-state ones plus the
        selected member of each state group."""
        out = []
        for kp in schema.keypoints:
            if kp.state_group is None or self.active_states.get(kp.state_group) == kp.id:
                out.append(kp)
        return out


@dataclass
class TrainingSample:
    """One dataset atom: image, its pose, and an optional foreground mask."""

    name: str
    image: np.ndarray  # float32 (H, W, 3) in [0, 1]
    pose: Pose
    mask: np.ndarray | None = None  # uint8 (H, W), values {0, 1}
    # Keypoints an augmentation pushed off-canvas and clamped to the border.
    clamped_keypoints: tuple[int, ...] = ()


@dataclass
class CharacterDataset:
    schema: KeypointSchema
    samples: list[TrainingSample]

    @property
    def has_masks(self) -> bool:
        return bool(self.samples) and all(s.mask is not None for s in self.samples)


def validate_schema(schema: KeypointSchema) -> None:
    if schema.layer_count < 1:
        raise DatasetError(f"layer_count must be >= 1, got {schema.layer_count}")
    w, h = schema.reference_resolution
    if w < 1 or h < 1:
        raise DatasetError(f"bad reference_resolution {schema.reference_resolution}")

    ids = [kp.id for kp in schema.keypoints]
    if len(ids) != len(set(ids)):
        raise DatasetError("duplicate keypoint ids in schema")
    if not ids:
        raise DatasetError("schema has no keypoints")

    layers_seen = set()
    for kp in schema.keypoints:
        if not 0 <= kp.layer_index < schema.layer_count:
            raise DatasetError(
                f"keypoint {kp.id} ({kp.name}): layer {kp.layer_index} outside "
                f"[0, {schema.layer_count})"
            )
        if kp.sigma <= 0:
            raise DatasetError(f"keypoint {kp.id} ({kp.name}): sigma must be > 0")
        if kp.radius < kp.sigma:
            raise DatasetError(f"keypoint {kp.id} ({kp.name}): radius < sigma")
        if not all(0.0 <= c <= 1.0 for c in kp.color):
            raise DatasetError(f"keypoint {kp.id} ({kp.name}): color outside [0, 1]")
        layers_seen.add(kp.layer_index)

    for layer in range(schema.layer_count):
        if layer not in layers_seen:
            raise DatasetError(f"layer {layer} has no keypoints")

    for a, b in schema.skeleton:
        if a == b:
            raise DatasetError(f"skeleton self-edge on keypoint {a}")
        for end in (a, b):
            if end not in ids:
                raise DatasetError(f"skeleton edge ({a}, {b}) references unknown keypoint {end}")

    kps = schema.keypoints
    for i in range(len(kps)):
        for j in range(i + 1, len(kps)):
            sep = max(abs(x - y) for x, y in zip(kps[i].color, kps[j].color))
            if sep < MIN_COLOR_SEPARATION:
                raise DatasetError(
                    f"keypoints {kps[i].id} and {kps[j].id} have indistinguishable "
                    f"colors (L-inf {sep:.3f} < {MIN_COLOR_SEPARATION})"
                )


def validate_pose(pose: Pose, schema: KeypointSchema, context: str = "pose") -> None:
    """Check a pose against its schema; raises DatasetError naming the offender."""
    w, h = schema.reference_resolution
    groups = schema.state_groups()

    for group, members in groups.items():
        selected = pose.active_states.get(group)
        if selected is None:
            raise DatasetError(f"{context}: no active keypoint for state group {group}")
        if selected not in members:
            raise DatasetError(
                f"{context}: active keypoint {selected} is not a member of state group {group}"
            )
    for group in pose.active_states:
        if group not in groups:
            raise DatasetError(f"{context}: unknown state group {group}")

    known = {kp.id for kp in schema.keypoints}
    for kp_id in pose.positions:
        if kp_id not in known:
            raise DatasetError(f"{context}: position for unknown keypoint id {kp_id}")

    for kp in pose.active_keypoints(schema):
        if kp.id not in pose.positions:
            raise DatasetError(f"{context}: keypoint {kp.id} ({kp.name}) has no position")
        x, y = pose.positions[kp.id]
        if not (0 <= x < w and 0 <= y < h):
            raise DatasetError(
                f"{context}: keypoint {kp.id} ({kp.name}) at ({x}, {y}) is outside "
                f"the {w}x{h} canvas"
            )


def auto_assign_colors(
    count: int, taken: list[tuple[float, float, float]], seed: int
) -> list[tuple[float, float, float]]:
    """Pick `count` colors maximally separated (greedy max-min L-inf) from the
    RGB cube, avoiding `taken`. Pure function of (count, taken, seed)."""
    rng = np.random.default_rng(seed)
    candidates = rng.uniform(0.0, 1.0, size=(4096, 3))
    # Dim colors render as near-invisible blobs; keep at least one bright channel.
    candidates = candidates[candidates.max(axis=1) >= 0.25]

    chosen: list[np.ndarray] = [np.asarray(c, dtype=float) for c in taken]
    out: list[tuple[float, float, float]] = []
    for _ in range(count):
        if chosen:
            ref = np.stack(chosen)  # (k, 3)
            dists = np.abs(candidates[:, None, :] - ref[None, :, :]).max(axis=2).min(axis=1)
            pick = candidates[int(np.argmax(dists))]
        else:
            pick = candidates[0]
        chosen.append(pick)
        out.append((float(pick[0]), float(pick[1]), float(pick[2])))
    return out


def _parse_schema(raw: dict, path: Path, color_seed: int) -> KeypointSchema:
    try:
        layer_count = int(raw["layer_count"])
        ref_res = tuple(int(v) for v in raw["reference_resolution"])
        kp_entries = raw["keypoints"]
    except KeyError as exc:
        raise DatasetError(f"{path}: missing required schema field {exc}") from exc
    if len(ref_res) != 2:
        raise DatasetError(f"{path}: reference_resolution must be [width, height]")

    _, height = ref_res
    default_sigma = 0.02 * height
    background = tuple(float(v) for v in raw.get("background_color", (1.0, 1.0, 1.0)))

    missing_color_idx = [i for i, e in enumerate(kp_entries) if "color" not in e]
    taken = [tuple(float(v) for v in e["color"]) for e in kp_entries if "color" in e]
    assigned = auto_assign_colors(len(missing_color_idx), taken, color_seed)
    colors: list[tuple[float, float, float]] = []
    auto_iter = iter(assigned)
    for i, entry in enumerate(kp_entries):
        colors.append(next(auto_iter) if i in set(missing_color_idx) else tuple(float(v) for v in entry["color"]))

    keypoints = []
    for entry, color in zip(kp_entries, colors):
        sigma = float(entry.get("sigma", default_sigma))
        keypoints.append(
            KeypointDef(
                id=int(entry["id"]),
                name=str(entry.get("name", f"kp{entry['id']}")),
                layer_index=int(entry["layer"]),
                color=color,
                sigma=sigma,
                radius=float(entry.get("radius", 3.0 * sigma)),
                state_group=int(entry["state_group"]) if "state_group" in entry else None,
            )
        )

    schema = KeypointSchema(
        keypoints=tuple(keypoints),
        layer_count=layer_count,
        skeleton=tuple((int(a), int(b)) for a, b in raw.get("skeleton", [])),
        reference_resolution=(ref_res[0], ref_res[1]),
        background_color=(background[0], background[1], background[2]),
    )
    validate_schema(schema)
    return schema


def _parse_pose(raw: dict, path: Path) -> Pose:
    try:
        positions = {int(k): (float(v[0]), float(v[1])) for k, v in raw["positions"].items()}
    except (KeyError, TypeError, IndexError) as exc:
        raise DatasetError(f"{path}: malformed positions") from exc
    states = {int(k): int(v) for k, v in raw.get("active_states", {}).items()}
    return Pose(positions=positions, active_states=states)


def pose_to_json_dict(pose: Pose) -> dict:
    return {
        "positions": {str(k): [float(x), float(y)] for k, (x, y) in sorted(pose.positions.items())},
        "active_states": {str(g): int(k) for g, k in sorted(pose.active_states.items())},
    }


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"))
    return (gray >= 128).astype(np.uint8)


def save_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def load_dataset(root: str | Path, color_seed: int = 0) -> CharacterDataset:
    """Load and validate a character dataset directory.

    Keypoint colors missing from the schema are auto-assigned; the assignment
    is a pure function of (schema, color_seed).
    """
    root = Path(root)
    schema_path = root / "schema.json"
    if not schema_path.is_file():
        raise DatasetError(f"missing schema file {schema_path}")
    schema = _parse_schema(json.loads(schema_path.read_text()), schema_path, color_seed)

    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise DatasetError(f"missing frames directory {frames_dir}")

    w, h = schema.reference_resolution
    known_ids = {kp.id for kp in schema.keypoints}
    samples = []
    for img_path in sorted(frames_dir.glob("*.png")):
        name = img_path.stem
        ann_path = frames_dir / f"{name}.keypoints.json"
        if not ann_path.is_file():
            raise DatasetError(f"frame {img_path.name} has no annotation {ann_path.name}")
        pose = _parse_pose(json.loads(ann_path.read_text()), ann_path)
        for kp_id in pose.positions:
            if kp_id not in known_ids:
                raise DatasetError(f"{ann_path}: unknown keypoint id {kp_id}")
        validate_pose(pose, schema, context=str(ann_path))

        image = load_image(img_path)
        if image.shape[:2] != (h, w):
            raise DatasetError(
                f"{img_path}: image is {image.shape[1]}x{image.shape[0]}, "
                f"schema expects {w}x{h}"
            )

        mask = None
        mask_path = root / "masks" / f"{name}.png"
        if mask_path.is_file():
            mask = load_mask(mask_path)
            if mask.shape != (h, w):
                raise DatasetError(
                    f"{mask_path}: mask is {mask.shape[1]}x{mask.shape[0]}, "
                    f"image is {w}x{h}"
                )
        samples.append(TrainingSample(name=name, image=image, pose=pose, mask=mask))

    if not samples:
        raise DatasetError(f"no frames found under {frames_dir}")

    with_mask = sum(1 for s in samples if s.mask is not None)
    if 0 < with_mask < len(samples):
        raise DatasetError(
            f"masks must cover all frames or none: {with_mask}/{len(samples)} have one"
        )
    return CharacterDataset(schema=schema, samples=samples)


def save_dataset(dataset: CharacterDataset, root: str | Path) -> None:
    """Write a dataset in the standard directory format (inverse of load_dataset)."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if dataset.has_masks:
        (root / "masks").mkdir(parents=True, exist_ok=True)

    (root / "schema.json").write_text(json.dumps(dataset.schema.to_json_dict(), indent=2))
    for sample in dataset.samples:
        save_image(sample.image, root / "frames" / f"{sample.name}.png")
        (root / "frames" / f"{sample.name}.keypoints.json").write_text(
            json.dumps(pose_to_json_dict(sample.pose), indent=2)
        )
        if sample.mask is not None:
            save_mask(sample.mask, root / "masks" / f"{sample.name}.png")


def extract_mask(
    image: np.ndarray, background_color: tuple[float, float, float], tolerance: float
) -> np.ndarray:
    """Foreground mask from a uniform-color background: pixels within L-inf
    `tolerance` of `background_color` become 0, everything else 1."""
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    bg = np.asarray(background_color, dtype=np.float32).reshape(1, 1, 3)
    mask = (np.abs(image - bg).max(axis=2) > tolerance).astype(np.uint8)
    if not mask.any():
        warnings.warn("extract_mask produced an all-background mask", stacklevel=2)
    return mask


def poses_equal(a: Pose, b: Pose) -> bool:
    return a.positions == b.positions and a.active_states == b.active_states


def datasets_equal(a: CharacterDataset, b: CharacterDataset) -> bool:
    """Field-by-field equality, used to verify save/load round-trips."""
    if a.schema != b.schema or len(a.samples) != len(b.samples):
        return False
    for sa, sb in zip(a.samples, b.samples):
        if sa.name != sb.name or not poses_equal(sa.pose, sb.pose):
            return False
        if not np.array_equal(sa.image, sb.image):
            return False
        if (sa.mask is None) != (sb.mask is None):
            return False
        if sa.mask is not None and not np.array_equal(sa.mask, sb.mask):
            return False
    return True


def resample_dataset(dataset: CharacterDataset, size: tuple[int, int]) -> CharacterDataset:
    """Rescale images, masks, and keypoint positions to `size` (width, height).

    The returned dataset's schema has `size` as its reference resolution with
    sigma/radius scaled to match, so downstream consumers see a consistent
    coordinate system.
    """
    w0, h0 = dataset.schema.reference_resolution
    w1, h1 = size
    if (w1, h1) == (w0, h0):
        return dataset
    sx, sy = w1 / w0, h1 / h0
    s_blob = min(sx, sy)

    keypoints = tuple(
        replace(kp, sigma=kp.sigma * s_blob, radius=kp.radius * s_blob)
        for kp in dataset.schema.keypoints
    )
    schema = replace(dataset.schema, keypoints=keypoints, reference_resolution=(w1, h1))

    samples = []
    for sample in dataset.samples:
        img = Image.fromarray(np.clip(np.rint(sample.image * 255), 0, 255).astype(np.uint8))
        image = np.asarray(img.resize((w1, h1), Image.BILINEAR), dtype=np.float32) / 255.0
        mask = None
        if sample.mask is not None:
            m = Image.fromarray((sample.mask * 255).astype(np.uint8), mode="L")
            mask = (np.asarray(m.resize((w1, h1), Image.NEAREST)) >= 128).astype(np.uint8)
        positions = {
            k: (min(x * sx, w1 - 1e-3), min(y * sy, h1 - 1e-3))
            for k, (x, y) in sample.pose.positions.items()
        }
        samples.append(
            TrainingSample(
                name=sample.name,
                image=image,
                pose=Pose(positions, dict(sample.pose.active_states)),
                mask=mask,
            )
        )
    return CharacterDataset(schema=schema, samples=samples)
