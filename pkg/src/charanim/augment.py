"""Training-time augmentation: random translation/flip and thin-plate-spline warps.

Every transform is applied jointly to the image, the mask, and the keypoint
positions so the pose always describes the augmented image. Callers own the
RNG; given the same generator state the output is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .dataset import Pose, TrainingSample

Color = tuple[float, float, float]

WHITE: Color = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class AugmentConfig:
    """max_translate_frac is a fraction of image size; tps_max_shift_frac is a
    fraction of the control-grid spacing, which keeps the warp fold-free and
    the forward/backward spline pair consistent for any grid size."""

    max_translate_frac: float = 0.1
    allow_hflip: bool = True
    tps_grid: int = 4
    tps_max_shift_frac: float = 0.05
    apply_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.max_translate_frac <= 0.5:
            raise ValueError("max_translate_frac must be in [0, 0.5]")
        if not 0.0 <= self.tps_max_shift_frac <= 0.5:
            raise ValueError("tps_max_shift_frac must be in [0, 0.5]")
        if self.tps_grid < 2:
            raise ValueError("tps_grid must be >= 2")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must be in [0, 1]")


def _clamp_positions(
    positions: dict[int, tuple[float, float]], size: tuple[int, int]
) -> tuple[dict[int, tuple[float, float]], tuple[int, ...]]:
    w, h = size
    clamped = []
    out = {}
    for kp_id, (x, y) in positions.items():
        cx = float(np.clip(x, 0.0, w - 1.0))
        cy = float(np.clip(y, 0.0, h - 1.0))
        if (cx, cy) != (x, y):
            clamped.append(kp_id)
        out[kp_id] = (cx, cy)
    return out, tuple(clamped)


def apply_affine(
    sample: TrainingSample,
    dx: int,
    dy: int,
    hflip: bool,
    background: Color = WHITE,
) -> TrainingSample:
    """Deterministic core of random_affine: flip, then translate by (dx, dy).

    Vacated image pixels are filled with `background`; vacated mask pixels
    become 0. Keypoints pushed off-canvas are clamped to the border and
    recorded in the returned sample's `clamped_keypoints`.
    """
    h, w = sample.image.shape[:2]
    image = sample.image
    mask = sample.mask
    positions = dict(sample.pose.positions)

    if hflip:
        image = image[:, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]
        positions = {k: (w - 1.0 - x, y) for k, (x, y) in positions.items()}

    if dx or dy:
        out_img = np.empty_like(image)
        out_img[:] = np.asarray(background, dtype=image.dtype)
        out_mask = np.zeros_like(mask) if mask is not None else None

        sy0, sy1 = max(0, -dy), min(h, h - dy)
        sx0, sx1 = max(0, -dx), min(w, w - dx)
        if sy0 < sy1 and sx0 < sx1:
            out_img[sy0 + dy : sy1 + dy, sx0 + dx : sx1 + dx] = image[sy0:sy1, sx0:sx1]
            if out_mask is not None:
                out_mask[sy0 + dy : sy1 + dy, sx0 + dx : sx1 + dx] = mask[sy0:sy1, sx0:sx1]
        image, mask = out_img, out_mask
        positions = {k: (x + dx, y + dy) for k, (x, y) in positions.items()}
    else:
        image = np.ascontiguousarray(image)
        mask = np.ascontiguousarray(mask) if mask is not None else None

    positions, clamped = _clamp_positions(positions, (w, h))
    return replace(
        sample,
        image=image,
        mask=mask,
        pose=Pose(positions, dict(sample.pose.active_states)),
        clamped_keypoints=clamped,
    )


def random_affine(
    sample: TrainingSample,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    background: Color = WHITE,
) -> TrainingSample:
    """Randomly flip and translate; each sub-transform fires with cfg.apply_prob."""
    h, w = sample.image.shape[:2]
    dx = dy = 0
    hflip = False
    if cfg.allow_hflip and rng.random() < cfg.apply_prob:
        hflip = True
    if cfg.max_translate_frac > 0 and rng.random() < cfg.apply_prob:
        max_dx = int(round(cfg.max_translate_frac * w))
        max_dy = int(round(cfg.max_translate_frac * h))
        dx = int(rng.integers(-max_dx, max_dx + 1))
        dy = int(rng.integers(-max_dy, max_dy + 1))
    return apply_affine(sample, dx, dy, hflip, background)


class ThinPlateSpline:
    """2D thin-plate spline interpolating src -> dst control points.

    Uses the kernel U(d) = d^2 log(d^2) with U(0) = 0. Fitting solves the
    standard augmented linear system; the fit reproduces the control points
    exactly, which doubles as the degeneracy check.
    """

    def __init__(self, src: np.ndarray, dst: np.ndarray):
        src = np.asarray(src, dtype=np.float64)
        dst = np.asarray(dst, dtype=np.float64)
        n = src.shape[0]
        k = self._kernel(src, src)
        p = np.hstack([np.ones((n, 1)), src])
        a = np.zeros((n + 3, n + 3))
        a[:n, :n] = k
        a[:n, n:] = p
        a[n:, :n] = p.T
        b = np.zeros((n + 3, 2))
        b[:n] = dst
        sol = np.linalg.solve(a, b)  # raises LinAlgError on degenerate control points
        self._src = src
        self._weights = sol[:n]
        self._affine = sol[n:]

        fit_err = np.abs(self.transform(src) - dst).max()
        if fit_err > 1e-6:
            raise np.linalg.LinAlgError(
                f"ill-conditioned TPS system (control point error {fit_err:.3g})"
            )

    @staticmethod
    def _kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = d2 * np.log(d2)
        u[d2 == 0.0] = 0.0
        return u

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        u = self._kernel(points, self._src)
        return (
            self._affine[0]
            + points @ self._affine[1:]
            + u @ self._weights
        )


def _control_grid(size: tuple[int, int], n: int) -> np.ndarray:
    w, h = size
    xs = np.linspace(0.0, w - 1.0, n)
    ys = np.linspace(0.0, h - 1.0, n)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def apply_tps(
    sample: TrainingSample,
    src_points: np.ndarray,
    dst_points: np.ndarray,
    background: Color = WHITE,
) -> TrainingSample:
    """Warp a sample with the spline pair fitted to src -> dst control points.

    The forward spline (src -> dst) moves keypoints; the backward spline
    (dst -> src) pulls image samples, bilinear for RGB and nearest for the
    mask so it stays binary. The two fits are not exact inverses; keypoint vs
    image discrepancy stays within ~1.5 px for mild warps.
    """
    h, w = sample.image.shape[:2]
    forward = ThinPlateSpline(src_points, dst_points)
    backward = ThinPlateSpline(dst_points, src_points)

    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pixels = np.stack([gx.ravel(), gy.ravel()], axis=1)
    source = backward.transform(pixels)
    # snap solver noise to the pixel grid so an identity spline resamples exactly
    nearest = np.rint(source)
    snap = np.abs(source - nearest) < 1e-6
    source[snap] = nearest[snap]
    coords = [source[:, 1].reshape(h, w), source[:, 0].reshape(h, w)]  # (rows, cols)

    image = np.empty_like(sample.image)
    for c in range(3):
        image[:, :, c] = map_coordinates(
            sample.image[:, :, c].astype(np.float64),
            coords,
            order=1,
            mode="constant",
            cval=background[c],
        ).astype(sample.image.dtype)

    mask = None
    if sample.mask is not None:
        mask = map_coordinates(sample.mask, coords, order=0, mode="constant", cval=0)

    kp_ids = list(sample.pose.positions.keys())
    pts = np.asarray([sample.pose.positions[k] for k in kp_ids], dtype=np.float64)
    warped = forward.transform(pts)
    positions = {k: (float(x), float(y)) for k, (x, y) in zip(kp_ids, warped)}
    positions, clamped = _clamp_positions(positions, (w, h))

    return replace(
        sample,
        image=image,
        mask=mask,
        pose=Pose(positions, dict(sample.pose.active_states)),
        clamped_keypoints=clamped,
    )


def tps_warp(
    sample: TrainingSample,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    background: Color = WHITE,
    max_retries: int = 3,
) -> TrainingSample:
    """Random elastic warp: shift an n x n control grid by uniform offsets and
    smooth with a thin-plate spline. Degenerate grids are redrawn."""
    if rng.random() >= cfg.apply_prob:
        return sample
    h, w = sample.image.shape[:2]
    src = _control_grid((w, h), cfg.tps_grid)
    max_sx = cfg.tps_max_shift_frac * (w - 1) / (cfg.tps_grid - 1)
    max_sy = cfg.tps_max_shift_frac * (h - 1) / (cfg.tps_grid - 1)

    last_error: Exception | None = None
    for _ in range(max_retries):
        shifts = np.stack(
            [
                rng.uniform(-max_sx, max_sx, size=len(src)),
                rng.uniform(-max_sy, max_sy, size=len(src)),
            ],
            axis=1,
        )
        try:
            return apply_tps(sample, src, src + shifts, background)
        except np.linalg.LinAlgError as exc:
            last_error = exc
    raise RuntimeError(f"TPS control grid degenerate after {max_retries} draws") from last_error


def augment_sample(
    sample: TrainingSample,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    background: Color = WHITE,
) -> TrainingSample:
    """One training-iteration augmentation draw: affine subset, then TPS."""
    out = random_affine(sample, cfg, rng, background)
    return tps_warp(out, cfg, rng, background)
