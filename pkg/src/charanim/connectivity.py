"""Connected-component analysis on predicted masks and keypoint repair.

When a keypoint is dragged far outside the training distribution the
generator tends to rip the character apart or spawn artifacts; both show up
as extra components in the predicted foreground mask. The repair loop moves
the keypoint nearest to the user's last move by a fraction of the user's
displacement and regenerates until the mask is a single component again.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import Pose

# Components below this fraction of the foreground are generation noise, not
# detached body parts, and do not count against connectedness.
SPECK_FRACTION = 0.001

MaskFn = Callable[[Pose], np.ndarray]


@dataclass
class ComponentLabeling:
    labels: np.ndarray  # int32 (H, W), 0 = background
    count: int
    pixel_counts: np.ndarray  # (count,), pixel_counts[i] is the size of label i+1
    component_keypoints: dict[int, tuple[int, ...]]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:  # path compression
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # Keep the smaller id as root so labels follow first-pixel order.
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def _row_runs(row: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of 1s as (start, end) half-open column intervals."""
    padded = np.concatenate([[0], row, [0]])
    diff = np.diff(padded)
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1)
    return list(zip(starts.tolist(), ends.tolist()))


def label_components(
    mask: np.ndarray,
    connectivity: int = 4,
    keypoint_positions: dict[int, tuple[float, float]] | None = None,
) -> ComponentLabeling:
    """Label foreground components of a binary mask (run-based union-find).

    Labels are 1..count assigned in row-major order of each component's first
    pixel, so the labeling is fully deterministic. With `keypoint_positions`,
    reports which keypoints fall inside which component (nearest pixel).
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2D")
    h, w = mask.shape
    binary = (mask != 0).astype(np.uint8)

    # Collect runs row by row; run ids increase in row-major first-pixel order.
    runs: list[tuple[int, int, int]] = []  # (row, start, end)
    rows: list[list[int]] = []
    for y in range(h):
        ids = []
        for start, end in _row_runs(binary[y]):
            ids.append(len(runs))
            runs.append((y, start, end))
        rows.append(ids)

    uf = _UnionFind(len(runs))
    reach = 1 if connectivity == 8 else 0  # diagonal contact for 8-connectivity
    for y in range(1, h):
        above = rows[y - 1]
        here = rows[y]
        if not above or not here:
            continue
        i = j = 0
        while i < len(here) and j < len(above):
            _, s0, e0 = runs[here[i]]
            _, s1, e1 = runs[above[j]]
            if s0 < e1 + reach and s1 < e0 + reach:
                uf.union(here[i], above[j])
            if e0 <= e1:
                i += 1
            else:
                j += 1

    root_to_label: dict[int, int] = {}
    labels = np.zeros((h, w), dtype=np.int32)
    counts: list[int] = []
    for run_id, (y, start, end) in enumerate(runs):
        root = uf.find(run_id)
        label = root_to_label.get(root)
        if label is None:
            label = len(root_to_label) + 1
            root_to_label[root] = label
            counts.append(0)
        labels[y, start:end] = label
        counts[label - 1] += end - start

    component_keypoints: dict[int, tuple[int, ...]] = {}
    if keypoint_positions:
        per_label: dict[int, list[int]] = {}
        for kp_id, (x, y) in keypoint_positions.items():
            px = int(np.clip(round(x), 0, w - 1))
            py = int(np.clip(round(y), 0, h - 1))
            label = int(labels[py, px])
            if label > 0:
                per_label.setdefault(label, []).append(kp_id)
        component_keypoints = {lbl: tuple(sorted(ids)) for lbl, ids in per_label.items()}

    return ComponentLabeling(
        labels=labels,
        count=len(counts),
        pixel_counts=np.asarray(counts, dtype=np.int64),
        component_keypoints=component_keypoints,
    )


def is_connected(
    labeling: ComponentLabeling, speck_frac: float = SPECK_FRACTION
) -> bool:
    """True when at most one component is above the speck threshold."""
    if labeling.count == 0:
        return True
    threshold = speck_frac * int(labeling.pixel_counts.sum())
    significant = int((labeling.pixel_counts >= threshold).sum())
    return significant <= 1


@dataclass
class RefinementResult:
    pose: Pose
    iterations: int  # automatic moves performed
    moves: list[tuple[int, tuple[float, float]]]  # (keypoint id, displacement)
    converged: bool


def refine_pose(
    mask_fn: MaskFn,
    pose: Pose,
    moved_kp: int,
    move_vec: tuple[float, float],
    delta: float = 0.5,
    max_iters: int = 5,
    connectivity: int = 4,
    speck_frac: float = SPECK_FRACTION,
) -> RefinementResult:
    """Repair a disconnected predicted mask by propagating the user's move.

    While the mask is disconnected, the keypoint nearest to the most recently
    moved one (the user's own keypoint and already-moved ones excluded) is
    displaced by delta * move_vec, and the mask is re-predicted. delta = 0 is
    a fixed point, so it short-circuits after a single evaluation.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [0, 1], got {delta}")
    if moved_kp not in pose.positions:
        raise ValueError(f"moved keypoint {moved_kp} has no position in the pose")

    current = pose.copy()
    if _connected(mask_fn, current, connectivity, speck_frac):
        return RefinementResult(pose=current, iterations=0, moves=[], converged=True)
    if delta == 0.0:
        return RefinementResult(pose=current, iterations=0, moves=[], converged=False)

    step = (delta * move_vec[0], delta * move_vec[1])
    excluded = {moved_kp}
    last_moved = moved_kp
    moves: list[tuple[int, tuple[float, float]]] = []
    for _ in range(max_iters):
        candidates = [k for k in current.positions if k not in excluded]
        if not candidates:
            break
        ref = np.asarray(current.positions[last_moved])
        nearest = min(
            candidates,
            key=lambda k: float(np.hypot(*(np.asarray(current.positions[k]) - ref))),
        )
        x, y = current.positions[nearest]
        current.positions[nearest] = (x + step[0], y + step[1])
        moves.append((nearest, step))
        excluded.add(nearest)
        last_moved = nearest
        if _connected(mask_fn, current, connectivity, speck_frac):
            return RefinementResult(
                pose=current, iterations=len(moves), moves=moves, converged=True
            )
    return RefinementResult(pose=current, iterations=len(moves), moves=moves, converged=False)


def _connected(mask_fn: MaskFn, pose: Pose, connectivity: int, speck_frac: float) -> bool:
    return is_connected(label_components(mask_fn(pose), connectivity), speck_frac)
