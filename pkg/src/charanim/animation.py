"""Keypoint interpolation, timeline compilation, frame rendering, and export.

Positions interpolate linearly between bracketing keyframes; discrete state
selections switch at the segment midpoint (they do not blend). A timeline of
duration D at F fps compiles to ceil(D*F)+1 frames with exact timestamps.
"""

from __future__ import annotations

import json
import math
import zipfile
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .connectivity import RefinementResult, refine_pose
from .dataset import DatasetError, KeypointSchema, Pose, save_image, validate_pose
from .inference import InferenceSession


@dataclass
class Keyframe:
    time: float
    pose: Pose


@dataclass
class AnimationTimeline:
    keyframes: list[Keyframe]
    fps: float = 10.0
    loop: bool = False
    mask_fix: bool = False


def validate_timeline(timeline: AnimationTimeline, schema: KeypointSchema | None = None) -> None:
    if not timeline.keyframes:
        raise ValueError("timeline has no keyframes")
    if timeline.fps <= 0:
        raise ValueError(f"fps must be > 0, got {timeline.fps}")
    times = [k.time for k in timeline.keyframes]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError(f"keyframe times must be strictly increasing, got {times}")
    if schema is not None:
        for i, kf in enumerate(timeline.keyframes):
            validate_pose(kf.pose, schema, context=f"keyframe {i}")


def interpolate(a: Pose, b: Pose, t: float, schema: KeypointSchema | None = None) -> Pose:
    """Linear interpolation of positions; discrete states switch at t = 0.5."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    if schema is not None:
        validate_pose(a, schema, context="interpolation start")
        validate_pose(b, schema, context="interpolation end")

    positions: dict[int, tuple[float, float]] = {}
    for kp_id in a.positions.keys() | b.positions.keys():
        pa = a.positions.get(kp_id)
        pb = b.positions.get(kp_id)
        if pa is None or pb is None:
            # positioned in only one pose (e.g. a state member active on one
            # side only): take the side that has it
            positions[kp_id] = pa if pa is not None else pb
            continue
        positions[kp_id] = (
            (1.0 - t) * pa[0] + t * pb[0],
            (1.0 - t) * pa[1] + t * pb[1],
        )
    states = dict(a.active_states) if t < 0.5 else dict(b.active_states)
    return Pose(positions=positions, active_states=states)


def frame_times(timeline: AnimationTimeline) -> list[float]:
    """Exact timestamps: ceil(duration * fps) + 1 frames from first to last keyframe."""
    t0 = timeline.keyframes[0].time
    t1 = timeline.keyframes[-1].time
    duration = t1 - t0
    count = math.ceil(duration * timeline.fps - 1e-9) + 1
    return [min(t0 + k / timeline.fps, t1) for k in range(count)]


def pose_at(timeline: AnimationTimeline, t: float, schema: KeypointSchema | None = None) -> Pose:
    keyframes = timeline.keyframes
    if len(keyframes) == 1:
        return keyframes[0].pose.copy()
    times = [k.time for k in keyframes]
    j = bisect_right(times, t) - 1
    j = max(0, min(j, len(keyframes) - 2))
    a, b = keyframes[j], keyframes[j + 1]
    u = (t - a.time) / (b.time - a.time)
    return interpolate(a.pose, b.pose, min(max(u, 0.0), 1.0), schema)


@dataclass
class Frame:
    index: int
    time: float
    pose: Pose
    image: np.ndarray  # (H, W, 3) float32 [0, 1]
    refinement: RefinementResult | None = None

    @property
    def flagged(self) -> bool:
        return self.refinement is not None and not self.refinement.converged


def _dominant_move(pose: Pose, reference: Pose) -> tuple[int, tuple[float, float]]:
    """Largest keypoint displacement of `pose` relative to `reference`; used
    as the repair anchor for non-interactive (timeline) mask fixing."""
    best_id, best_vec, best_len = None, (0.0, 0.0), -1.0
    for kp_id, (x, y) in pose.positions.items():
        ref = reference.positions.get(kp_id)
        if ref is None:
            continue
        vec = (x - ref[0], y - ref[1])
        length = math.hypot(*vec)
        if length > best_len:
            best_id, best_vec, best_len = kp_id, vec, length
    return best_id, best_vec


def render_timeline(
    timeline: AnimationTimeline,
    session: InferenceSession,
    delta: float = 0.5,
    max_fix_iters: int = 5,
) -> list[Frame]:
    """Compile the timeline to poses and generate every frame.

    With mask_fix on, each frame's interpolated pose is repaired
    independently before generation; non-converged repairs flag the frame
    and rendering continues.
    """
    schema = session.schema
    validate_timeline(timeline, schema)
    if timeline.mask_fix and not session.predicts_mask:
        raise ValueError("timeline requests mask_fix but the checkpoint has no mask head")

    frames: list[Frame] = []
    keyframes = timeline.keyframes
    times = [k.time for k in keyframes]
    for index, t in enumerate(frame_times(timeline)):
        pose = pose_at(timeline, t, schema)
        refinement = None
        if timeline.mask_fix:
            j = max(0, min(bisect_right(times, t) - 1, len(keyframes) - 1))
            moved_kp, move_vec = _dominant_move(pose, keyframes[j].pose)
            refinement = refine_pose(
                session.predict_mask,
                pose,
                moved_kp,
                move_vec,
                delta=delta,
                max_iters=max_fix_iters,
            )
            pose = refinement.pose
        image = session.generate(pose)
        frames.append(Frame(index=index, time=t, pose=pose, image=image, refinement=refinement))
    return frames


def export_frames(
    frames: list[Frame],
    format: str,
    path: str | Path,
    fps: float = 10.0,
    loop: bool = True,
) -> list[Path]:
    """Write frames as a zero-padded PNG sequence or an animated GIF."""
    if not frames:
        raise ValueError("no frames to export")
    path = Path(path)
    if format == "png_sequence":
        path.mkdir(parents=True, exist_ok=True)
        written = []
        for frame in frames:
            out = path / f"{frame.index:04d}.png"
            save_image(frame.image, out)
            written.append(out)
        return written
    if format == "gif":
        path.parent.mkdir(parents=True, exist_ok=True)
        images = [
            Image.fromarray(np.clip(np.rint(f.image * 255), 0, 255).astype(np.uint8))
            for f in frames
        ]
        kwargs = dict(
            save_all=True,
            append_images=images[1:],
            duration=max(int(round(1000.0 / fps)), 20),
            disposal=2,
        )
        if loop:
            kwargs["loop"] = 0
        images[0].save(path, **kwargs)
        return [path]
    raise ValueError(f"unknown export format {format!r}")


def frames_to_zip(frames: list[Frame], path: str | Path) -> Path:
    """PNG sequence packed into a zip archive (the service's frame format)."""
    if not frames:
        raise ValueError("no frames to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        for frame in frames:
            buf = _png_bytes(frame.image)
            zf.writestr(f"{frame.index:04d}.png", buf)
    return path


def _png_bytes(image: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)).save(buf, "PNG")
    return buf.getvalue()


def timeline_from_json(raw: dict, base_dir: Path | None = None) -> AnimationTimeline:
    """Parse the timeline file format: {fps, loop, mask_fix, keyframes:
    [{time, pose | pose_file}]}. Poses may be inline or file references."""
    try:
        entries = raw["keyframes"]
    except KeyError as exc:
        raise DatasetError("timeline is missing 'keyframes'") from exc
    keyframes = []
    for i, entry in enumerate(entries):
        if "pose" in entry:
            pose_raw = entry["pose"]
        elif "pose_file" in entry:
            ref = Path(entry["pose_file"])
            if base_dir is not None and not ref.is_absolute():
                ref = base_dir / ref
            pose_raw = json.loads(ref.read_text())
        else:
            raise DatasetError(f"keyframe {i} has neither 'pose' nor 'pose_file'")
        pose = Pose(
            positions={int(k): (float(v[0]), float(v[1])) for k, v in pose_raw["positions"].items()},
            active_states={int(k): int(v) for k, v in pose_raw.get("active_states", {}).items()},
        )
        keyframes.append(Keyframe(time=float(entry["time"]), pose=pose))
    return AnimationTimeline(
        keyframes=keyframes,
        fps=float(raw.get("fps", 10.0)),
        loop=bool(raw.get("loop", False)),
        mask_fix=bool(raw.get("mask_fix", False)),
    )
