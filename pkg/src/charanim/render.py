"""Rasterize poses into layered RGB Gaussian-blob conditioning maps.

Each active keypoint contributes ``color * exp(-d^2 / (2 sigma^2))`` inside a
hard radius cutoff; overlapping blobs sum and the result is clamped to [0, 1].
Per-layer maps isolate depth groups; the combined map is the clamped sum of
all layers and feeds the generator's global embedding and the discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import KeypointSchema, Pose, save_image

# Below this canvas size blobs keep the absolute pixel size they would have on
# a 64 px canvas instead of shrinking further, so the condition stays visible.
_MIN_BLOB_CANVAS = 64.0


@dataclass
class ConditioningStack:
    """L per-layer condition maps plus their combined map, all (H, W, 3) in [0, 1]."""

    layer_maps: list[np.ndarray]
    combined_map: np.ndarray


def _scale_factors(schema: KeypointSchema, size: tuple[int, int]) -> tuple[float, float, float]:
    w_ref, h_ref = schema.reference_resolution
    w, h = size
    sx, sy = w / w_ref, h / h_ref
    s_blob = min(sx, sy) * max(1.0, _MIN_BLOB_CANVAS / min(w, h))
    return sx, sy, s_blob


def render_layer(
    pose: Pose, schema: KeypointSchema, layer: int, size: tuple[int, int]
) -> np.ndarray:
    """Render the blobs of one depth layer onto a (H, W, 3) float32 canvas."""
    if not 0 <= layer < schema.layer_count:
        raise ValueError(f"layer {layer} outside [0, {schema.layer_count})")
    w, h = size
    sx, sy, s_blob = _scale_factors(schema, size)

    canvas = np.zeros((h, w, 3), dtype=np.float64)
    for kp in pose.active_keypoints(schema):
        if kp.layer_index != layer:
            continue
        x, y = pose.positions[kp.id]
        cx, cy = x * sx, y * sy
        sigma = kp.sigma * s_blob
        radius = kp.radius * s_blob

        x0 = max(int(np.floor(cx - radius)), 0)
        x1 = min(int(np.ceil(cx + radius)) + 1, w)
        y0 = max(int(np.floor(cy - radius)), 0)
        y1 = min(int(np.ceil(cy + radius)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue

        xs = np.arange(x0, x1, dtype=np.float64) - cx
        ys = np.arange(y0, y1, dtype=np.float64) - cy
        d2 = ys[:, None] ** 2 + xs[None, :] ** 2
        weight = np.exp(-d2 / (2.0 * sigma * sigma))
        weight[d2 > radius * radius] = 0.0
        canvas[y0:y1, x0:x1] += weight[:, :, None] * np.asarray(kp.color, dtype=np.float64)

    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def render_stack(pose: Pose, schema: KeypointSchema, size: tuple[int, int]) -> ConditioningStack:
    layer_maps = [render_layer(pose, schema, i, size) for i in range(schema.layer_count)]
    combined = np.clip(np.sum(layer_maps, axis=0), 0.0, 1.0).astype(np.float32)
    return ConditioningStack(layer_maps=layer_maps, combined_map=combined)


def dump_stack(stack: ConditioningStack, out_dir: str | Path) -> list[Path]:
    """Write the stack as L+1 PNGs (layer_0..layer_{L-1}, combined) for inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, layer_map in enumerate(stack.layer_maps):
        path = out_dir / f"layer_{i}.png"
        save_image(layer_map, path)
        written.append(path)
    path = out_dir / "combined.png"
    save_image(stack.combined_map, path)
    written.append(path)
    return written
