"""Line normalization for offline rasters and online pen trajectories.

Rasters are 2-D float arrays in [0, 1] with 1 = white paper. Coordinates
are (x, y) with x to the right and y downward, for both input kinds.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

INK_THRESHOLD = 0.5


class DegenerateTilt(UserWarning):
    """Tilt regression had fewer than two distinct x coordinates."""


@dataclass
class Trajectory:
    strokes: list[np.ndarray]  # each (k, 2), k >= 1

    def __post_init__(self):
        self.strokes = [np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in self.strokes]
        for s in self.strokes:
            if len(s) == 0:
                raise ValueError("empty stroke")
            if not np.all(np.isfinite(s)):
                raise ValueError("non-finite trajectory coordinate")

    def points(self) -> np.ndarray:
        if not self.strokes:
            return np.zeros((0, 2))
        return np.concatenate(self.strokes)

    def copy(self) -> "Trajectory":
        return Trajectory([s.copy() for s in self.strokes])

    def bounds(self):
        p = self.points()
        return p[:, 0].min(), p[:, 1].min(), p[:, 0].max(), p[:, 1].max()

    def to_json(self) -> dict:
        return {"strokes": [s.tolist() for s in self.strokes]}

    @classmethod
    def from_json(cls, obj) -> "Trajectory":
        return cls([np.array(s, dtype=np.float64) for s in obj["strokes"]])


def save_trajectory(path, traj: Trajectory):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(traj.to_json(), fh)


def load_trajectory(path) -> Trajectory:
    with open(path, encoding="utf-8") as fh:
        return Trajectory.from_json(json.load(fh))


def save_raster(path, raster):
    img = np.clip(np.round(np.asarray(raster) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def load_raster(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _ink_xy(x, threshold):
    if isinstance(x, Trajectory):
        return x.points()
    rows, cols = np.nonzero(np.asarray(x) < threshold)
    return np.stack([cols, rows], axis=1).astype(np.float64)


def tilt_estimate(x, threshold=INK_THRESHOLD) -> float:
    """Angle (radians) of the least-squares line through the ink coordinates."""
    xy = _ink_xy(x, threshold)
    if len(xy) < 2 or np.ptp(xy[:, 0]) == 0:
        warnings.warn("tilt estimate degenerate (vertical or empty ink); using 0", DegenerateTilt)
        return 0.0
    xs = xy[:, 0] - xy[:, 0].mean()
    ys = xy[:, 1] - xy[:, 1].mean()
    return math.atan(float(xs @ ys) / float(xs @ xs))


def _rotate_points(p, angle, center):
    c, s = math.cos(angle), math.sin(angle)
    d = p - center
    return np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]], axis=1) + center


def rotate(x, angle, center=None, threshold=INK_THRESHOLD):
    """Rotate by ``angle`` about ``center`` (default: ink centroid)."""
    if isinstance(x, Trajectory):
        pts = x.points()
        ctr = pts.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
        return Trajectory([_rotate_points(s, angle, ctr) for s in x.strokes])
    raster = np.asarray(x, dtype=np.float64)
    if angle == 0:
        return raster.copy()
    if center is None:
        ink = _ink_xy(raster, threshold)
        ctr = ink.mean(axis=0) if len(ink) else np.array([raster.shape[1] / 2, raster.shape[0] / 2])
    else:
        ctr = np.asarray(center, dtype=np.float64)
    # output pixel p samples the source at R(-angle)(p - c) + c
    rows, cols = np.mgrid[0:raster.shape[0], 0:raster.shape[1]].astype(np.float64)
    grid = np.stack([cols.ravel(), rows.ravel()], axis=1)
    src = _rotate_points(grid, -angle, ctr)
    out = ndimage.map_coordinates(raster, [src[:, 1], src[:, 0]], order=1, mode="constant", cval=1.0)
    return out.reshape(raster.shape)


def deskew(x, angle, center=None, threshold=INK_THRESHOLD):
    """Undo a tilt of ``angle``: rotate by -angle about the ink centroid."""
    return rotate(x, -angle, center=center, threshold=threshold)


def trim_vertical(raster, threshold=INK_THRESHOLD) -> np.ndarray:
    raster = np.asarray(raster)
    ink_rows = np.nonzero((raster < threshold).any(axis=1))[0]
    if len(ink_rows) == 0:
        raise ValueError("blank raster: nothing to trim to")
    return raster[ink_rows[0]:ink_rows[-1] + 1].copy()


def normalize_height(x, target_h=32):
    """Scale to ``target_h`` rows (raster) or y-extent (trajectory), keeping aspect."""
    if isinstance(x, Trajectory):
        x0, y0, _, y1 = x.bounds()
        h = y1 - y0
        if h <= 0:
            raise ValueError("trajectory has zero height")
        f = target_h / h
        origin = np.array([x0, y0])
        return Trajectory([(s - origin) * f for s in x.strokes])
    raster = np.asarray(x, dtype=np.float64)
    h, w = raster.shape
    if h < 1:
        raise ValueError("raster height must be >= 1")
    if h == target_h:
        return raster.copy()
    new_w = max(1, int(round(w * target_h / h)))
    img = Image.fromarray(raster.astype(np.float32), mode="F")
    return np.asarray(img.resize((new_w, target_h), Image.BILINEAR), dtype=np.float64)


def _resample_stroke(s, step):
    if len(s) == 1:
        return s.copy()
    out = [s[0].copy()]
    p = s[0].copy()
    for a, b in zip(s[:-1], s[1:]):
        d = b - a
        dd = float(d @ d)
        if dd == 0:
            continue
        while float((b - p) @ (b - p)) >= step * step:
            # exit point of the circle |q - p| = step along a + u d
            ap = a - p
            bq = 2.0 * float(d @ ap)
            cq = float(ap @ ap) - step * step
            u = (-bq + math.sqrt(max(bq * bq - 4 * dd * cq, 0.0))) / (2 * dd)
            p = a + u * d
            out.append(p.copy())
    if float((s[-1] - out[-1]) @ (s[-1] - out[-1])) > (1e-9 * step) ** 2:
        out.append(s[-1].copy())
    else:
        out[-1] = s[-1].copy()
    return np.array(out)


def resample_equidistant(t: Trajectory, step=1.0) -> Trajectory:
    """Walk each stroke emitting points exactly ``step`` apart (Euclidean);
    stroke endpoints are kept."""
    if step <= 0:
        raise ValueError("step must be positive")
    return Trajectory([_resample_stroke(s, step) for s in t.strokes])


def preprocess_raster(raster, target_h=32, threshold=INK_THRESHOLD) -> np.ndarray:
    """Tilt regression, deskew, vertical trim, height normalization."""
    angle = tilt_estimate(raster, threshold)
    straight = deskew(raster, angle, threshold=threshold)
    return normalize_height(trim_vertical(straight, threshold), target_h)


def trajectory_transform(t: Trajectory, target_h=32):
    """Similarity transform (deskew, then shift to the origin and scale to
    ``target_h``) as a function on (k, 2) point arrays."""
    angle = tilt_estimate(t)
    center = t.points().mean(axis=0)
    straight = deskew(t, angle, center=center)
    x0, y0, _, y1 = straight.bounds()
    if y1 - y0 <= 0:
        raise ValueError("trajectory has zero height")
    f = target_h / (y1 - y0)
    origin = np.array([x0, y0])

    def apply(p):
        return (_rotate_points(np.asarray(p, dtype=np.float64).reshape(-1, 2), -angle, center) - origin) * f

    return apply


def preprocess_trajectory(t: Trajectory, target_h=32, step=1.0) -> Trajectory:
    """Tilt regression, deskew, height normalization, equidistant resampling."""
    apply = trajectory_transform(t, target_h)
    return resample_equidistant(Trajectory([apply(s) for s in t.strokes]), step)
