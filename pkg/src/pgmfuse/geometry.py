"""Polar Grid Map projection and camera sampling.

Grid convention: row 0 is the top of the vertical field of view (``pitch_up``),
column 0 is its left edge (``yaw_left``), matching image orientation.  Channel
order is fixed: ``[x, y, z, intensity, range]``, then ``[r, g, b]``, then
``[l1, l2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CHANNELS = ("x", "y", "z", "intensity", "range", "r", "g", "b", "l1", "l2")
VALID_CHANNEL_COUNTS = (5, 8, 10)
NUM_SCORED = 15


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class FovSpec:
    """Angular window in degrees; yaw is measured counter-clockwise from +x."""

    yaw_left: float = 40.0
    yaw_right: float = -40.0
    pitch_up: float = 2.0
    pitch_down: float = -18.0

    def __post_init__(self):
        if not self.yaw_left > self.yaw_right:
            raise ContractError("yaw_left must exceed yaw_right")
        if not self.pitch_up > self.pitch_down:
            raise ContractError("pitch_up must exceed pitch_down")

    def radians(self):
        return (math.radians(self.yaw_left), math.radians(self.yaw_right),
                math.radians(self.pitch_up), math.radians(self.pitch_down))


@dataclass(eq=False)
class PgmFrame:
    data: np.ndarray  # (h, w, c) float32
    mask: np.ndarray  # (h, w) bool
    labels: np.ndarray  # (h, w) uint32, reduced class ids
    point_index: Optional[np.ndarray] = None  # (h, w) int32, -1 where unmasked
    stats: dict = field(default_factory=dict)

    @property
    def h(self):
        return self.data.shape[0]

    @property
    def w(self):
        return self.data.shape[1]

    @property
    def c(self):
        return self.data.shape[2]

    @classmethod
    def empty(cls, h, w, c=5, with_index=True):
        return cls(
            data=np.zeros((h, w, c), np.float32),
            mask=np.zeros((h, w), bool),
            labels=np.zeros((h, w), np.uint32),
            point_index=np.full((h, w), -1, np.int32) if with_index else None,
        )

    def validate(self):
        if self.c not in VALID_CHANNEL_COUNTS:
            raise ContractError(f"channel count {self.c} not in {VALID_CHANNEL_COUNTS}")
        if self.mask.shape != (self.h, self.w) or self.labels.shape != (self.h, self.w):
            raise ContractError("mask/labels shape does not match data")
        on = self.data[self.mask]
        if not np.all(np.isfinite(on)) or np.any(on[:, 4] <= 0):
            raise ContractError("masked cells need finite values and positive range")
        off = ~self.mask
        if np.any(self.data[off] != 0) or np.any(self.labels[off] != 0):
            raise ContractError("unmasked cells must be all zero")
        return self

    def bitwise_equal(self, other):
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (same(self.data, other.data) and same(self.mask, other.mask)
                and same(self.labels, other.labels) and same(self.point_index, other.point_index))

    def with_data(self, data, **stats):
        return PgmFrame(np.ascontiguousarray(data, dtype=np.float32), self.mask.copy(), self.labels.copy(),
                        None if self.point_index is None else self.point_index.copy(),
                        {**self.stats, **stats})


# ---------------------------------------------------------------- projection

def cell_coords(points, fov, h, w):
    """Return (keep, row, col, range) for an (n, >=3) array of points."""
    pts = np.asarray(points, dtype=np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rng = np.sqrt(x * x + y * y + z * z)
    yl, yr, pu, pd = fov.radians()
    pos = rng > 0
    theta = np.arctan2(y, x)
    phi = np.arcsin(np.divide(z, rng, out=np.zeros_like(rng), where=pos))
    keep = pos & (theta <= yl) & (theta >= yr) & (phi <= pu) & (phi >= pd)
    col = np.floor((yl - theta) / (yl - yr) * w)
    row = np.floor((pu - phi) / (pu - pd) * h)
    col = np.clip(np.where(keep, col, 0), 0, w - 1).astype(np.int64)
    row = np.clip(np.where(keep, row, 0), 0, h - 1).astype(np.int64)
    return keep, row, col, rng


def fov_mask(points, fov):
    keep, _, _, _ = cell_coords(points, fov, 1, 1)
    return keep


def spherical_project(cloud, fov=FovSpec(), h=64, w=512, label_map=None):
    """Project a point cloud onto an h x w grid with 5 channels.

    On collisions the point with the smallest range wins, ties going to the lower
    point index.  ``label_map`` (raw id -> reduced id lookup array) is applied to
    ``cloud.labels`` when given; otherwise labels are stored as-is.
    """
    if h < 1 or w < 1:
        raise ContractError("grid dims must be >= 1")
    frame = PgmFrame.empty(h, w, 5)
    n = len(cloud.points)
    if n == 0:
        return frame
    keep, row, col, rng = cell_coords(cloud.points, fov, h, w)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return frame
    cell = row[idx] * w + col[idx]
    order = np.lexsort((idx, rng[idx], cell))
    cs = cell[order]
    first = np.ones(cs.size, bool)
    first[1:] = cs[1:] != cs[:-1]
    win = idx[order[first]]
    wcell = cs[first]
    rr, cc = np.divmod(wcell, w)

    pts = cloud.points
    frame.data[rr, cc, 0:4] = pts[win, 0:4]
    frame.data[rr, cc, 4] = rng[win].astype(np.float32)
    frame.mask[rr, cc] = True
    if cloud.labels is not None:
        lab = cloud.labels[win]
        if label_map is not None:
            lab = label_map[lab]
        frame.labels[rr, cc] = lab.astype(np.uint32)
    src = cloud.index if getattr(cloud, "index", None) is not None else np.arange(n)
    frame.point_index[rr, cc] = src[win].astype(np.int32)
    frame.stats["projected"] = int(win.size)
    frame.stats["in_fov"] = int(idx.size)
    return frame


def spherical_project_reference(cloud, fov, h, w):
    """Per-point scalar projection; returns {(row, col): winning point index}."""
    yl, yr, pu, pd = fov.radians()
    best = {}
    for i, p in enumerate(np.asarray(cloud.points, dtype=np.float64)):
        x, y, z = float(p[0]), float(p[1]), float(p[2])
        r = math.sqrt(x * x + y * y + z * z)
        if not r > 0:
            continue
        theta = math.atan2(y, x)
        phi = math.asin(z / r)
        if theta > yl or theta < yr or phi > pu or phi < pd:
            continue
        u = min(max(math.floor((yl - theta) / (yl - yr) * w), 0), w - 1)
        v = min(max(math.floor((pu - phi) / (pu - pd) * h), 0), h - 1)
        cur = best.get((v, u))
        if cur is None or r < cur[1]:
            best[(v, u)] = (i, r)
    return {cell: i for cell, (i, _) in best.items()}


# ---------------------------------------------------------------- camera

def camera_pixels(xyz, calib, image_size):
    """Project LiDAR-frame points to integer pixel coords.

    Pixel ``i`` spans ``[i, i+1)``, so sampling is ``floor(u)``.  Returns
    ``(col, row, valid)``; invalid points lie behind the camera or off-image.
    """
    width, height = image_size
    pts = np.asarray(xyz, dtype=np.float64)
    tr = np.asarray(calib.tr_velo_to_cam, dtype=np.float64)
    proj = np.asarray(calib.proj, dtype=np.float64)
    cam = pts @ tr[:, :3].T + tr[:, 3]
    p = cam @ proj[:, :3].T + proj[:, 3]
    front = p[:, 2] > 0
    denom = np.where(front, p[:, 2], 1.0)
    u = p[:, 0] / denom
    v = p[:, 1] / denom
    valid = front & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    col = np.where(valid, np.floor(np.where(valid, u, 0)), 0).astype(np.int64)
    row = np.where(valid, np.floor(np.where(valid, v, 0)), 0).astype(np.int64)
    return col, row, valid


def _image_size(image, calib):
    height, width = image.shape[:2]
    if calib.image_size is not None and tuple(calib.image_size) != (width, height):
        raise ContractError(f"calibration image size {calib.image_size} != image {(width, height)}")
    return width, height


def colorize(frame, image, calib):
    """Append nearest-pixel (r, g, b) to each masked cell of a 5-channel frame."""
    if frame.c != 5:
        raise ContractError(f"colorize expects a 5-channel frame, got {frame.c}")
    size = _image_size(image, calib)
    rr, cc = np.nonzero(frame.mask)
    col, row, valid = camera_pixels(frame.data[rr, cc, 0:3], calib, size)
    data = np.zeros((frame.h, frame.w, 8), np.float32)
    data[..., :5] = frame.data
    data[rr[valid], cc[valid], 5:8] = image[row[valid], col[valid], :3]
    return frame.with_data(data, uncolored=int((~valid).sum()), colored=int(valid.sum()))


def sample_cells(frame, image_map, calib):
    """Sample a per-pixel map (labels or colors) at every masked cell's camera pixel.

    Returns an (h, w, ...) array, zero where the cell is unmasked or unprojectable.
    """
    height, width = image_map.shape[:2]
    rr, cc = np.nonzero(frame.mask)
    col, row, valid = camera_pixels(frame.data[rr, cc, 0:3], calib, (width, height))
    out = np.zeros((frame.h, frame.w) + image_map.shape[2:], image_map.dtype)
    out[rr[valid], cc[valid]] = image_map[row[valid], col[valid]]
    return out


def cell_rays(fov, h, w):
    """Unit direction of every cell centre, (h, w, 3)."""
    yl, yr, pu, pd = fov.radians()
    theta = yl - (np.arange(w) + 0.5) / w * (yl - yr)
    phi = pu - (np.arange(h) + 0.5) / h * (pu - pd)
    th, ph = np.meshgrid(theta, phi)
    return np.stack([np.cos(ph) * np.cos(th), np.cos(ph) * np.sin(th), np.sin(ph)], axis=-1)


def image_to_grid(frame, image, calib, fov=FovSpec(), nominal_range=10.0):
    """Resample an RGB image onto the grid: one nearest pixel per cell ray.

    Masked cells sample at their own point; empty cells sample at
    ``nominal_range`` along the cell-centre ray.  Returns (h, w, 3) float32.
    """
    size = _image_size(image, calib)
    pts = cell_rays(fov, frame.h, frame.w) * nominal_range
    pts[frame.mask] = frame.data[frame.mask][:, 0:3]
    col, row, valid = camera_pixels(pts.reshape(-1, 3), calib, size)
    out = np.zeros((frame.h * frame.w, 3), np.float32)
    out[valid] = image[row[valid], col[valid], :3]
    return out.reshape(frame.h, frame.w, 3)


def attach_label_channels(frame, l1, l2, num_scored=NUM_SCORED):
    """Add normalized class-index channels l1 (image model) and l2 (point model)."""
    if frame.c != 8:
        raise ContractError(f"attach_label_channels expects an 8-channel frame, got {frame.c}")
    l1, l2 = np.asarray(l1), np.asarray(l2)
    if l1.shape != (frame.h, frame.w) or l2.shape != (frame.h, frame.w):
        raise ContractError(f"label maps must have shape {(frame.h, frame.w)}, got {l1.shape} and {l2.shape}")
    data = np.zeros((frame.h, frame.w, 10), np.float32)
    data[..., :8] = frame.data
    scale = np.float32(num_scored)
    data[..., 8] = np.where(frame.mask, l1.astype(np.float32) / scale, 0)
    data[..., 9] = np.where(frame.mask, l2.astype(np.float32) / scale, 0)
    return frame.with_data(data)


def backproject_predictions(frame, pred):
    """(point_index, class id) pairs for every masked cell, in row-major order."""
    if frame.point_index is None:
        raise ContractError("frame carries no point_index")
    pred = np.asarray(pred)
    rr, cc = np.nonzero(frame.mask)
    return np.stack([frame.point_index[rr, cc].astype(np.int64), pred[rr, cc].astype(np.int64)], axis=1)


def point_predictions(frame, pred, n_points):
    """Per-point class ids; points that did not win a cell get class 0."""
    out = np.zeros(n_points, np.uint32)
    pairs = backproject_predictions(frame, pred)
    out[pairs[:, 0]] = pairs[:, 1]
    return out
