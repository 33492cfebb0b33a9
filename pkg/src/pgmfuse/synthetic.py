"""Synthetic SemanticKITTI-style sequences for tests, demos and benchmarks.

A street scene of axis-aligned boxes over a ground plane is ray-cast twice: once
by a 64-beam spinning LiDAR and once by a pinhole camera whose calibration is
written next to the scans.  Output follows the dataset layout::

    <root>/sequences/<NN>/{velodyne,labels,image_2,image_labels,calib.txt}

``image_labels`` holds 8-bit CityScapes label ids rendered from the same scene,
standing in for an external image segmenter.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kitti_io
from .kitti_io import CalibrationSet

SENSOR_HEIGHT = 1.73
MAX_RANGE = 80.0

# raw SemanticKITTI id -> (CityScapes id, rgb, intensity)
APPEARANCE = {
    10: (26, (0.15, 0.25, 0.75), 0.45),
    11: (33, (0.85, 0.35, 0.10), 0.30),
    15: (32, (0.55, 0.10, 0.55), 0.35),
    18: (27, (0.85, 0.85, 0.20), 0.40),
    20: (31, (0.20, 0.60, 0.60), 0.38),
    30: (24, (0.95, 0.10, 0.15), 0.25),
    31: (25, (0.95, 0.55, 0.65), 0.27),
    40: (7, (0.30, 0.30, 0.32), 0.10),
    44: (9, (0.55, 0.45, 0.55), 0.12),
    48: (8, (0.75, 0.65, 0.70), 0.18),
    50: (11, (0.60, 0.40, 0.25), 0.22),
    51: (13, (0.70, 0.70, 0.45), 0.20),
    70: (21, (0.15, 0.55, 0.15), 0.08),
    71: (21, (0.40, 0.25, 0.10), 0.12),
    72: (22, (0.55, 0.65, 0.30), 0.06),
    80: (17, (0.95, 0.95, 0.95), 0.50),
    81: (20, (1.00, 0.85, 0.00), 0.85),
}
SKY_RGB, SKY_CITYSCAPES = (0.55, 0.75, 0.95), 23

# KITTI odometry-like camera (image_2) and LiDAR -> camera transform
KITTI_P2 = np.array([[718.856, 0.0, 607.1928, 45.38225],
                     [0.0, 718.856, 185.2157, -0.1130887],
                     [0.0, 0.0, 1.0, 0.003779761]])
KITTI_TR = np.array([[0.0, -1.0, 0.0, -0.004069766],
                     [0.0, 0.0, -1.0, -0.07631618],
                     [1.0, 0.0, 0.0, -0.2717806]])
KITTI_SIZE = (1241, 376)


def kitti_like_calib(scale=1.0):
    proj = KITTI_P2.copy()
    proj[:2] *= scale
    size = (int(round(KITTI_SIZE[0] * scale)), int(round(KITTI_SIZE[1] * scale)))
    return CalibrationSet(proj, KITTI_TR.copy(), size)


@dataclass
class Scene:
    boxes: np.ndarray  # (m, 6) xmin xmax ymin ymax zmin zmax
    box_label: np.ndarray  # (m,) raw ids
    box_instance: np.ndarray  # (m,)
    parking: tuple  # (xmin, xmax, ymin, ymax) ground patch


def _box(x0, dx, y0, dy, z0, dz):
    return [x0, x0 + dx, y0, y0 + dy, z0, z0 + dz]


def random_scene(rng):
    g = -SENSOR_HEIGHT
    boxes, labels = [], []

    def add(label, box):
        boxes.append(box)
        labels.append(label)

    for side in (1, -1):
        x = rng.uniform(2, 8)
        while x < 70:
            length = rng.uniform(8, 18)
            y0 = side * rng.uniform(10, 13)
            add(50, _box(x, length, min(y0, y0 + side * 6), 6, g, rng.uniform(5, 10)))
            x += length + rng.uniform(3, 8)
            if rng.random() < 0.7:
                # tree: trunk plus crown in the gap
                ty = side * rng.uniform(7.5, 8.5)
                add(71, _box(x - 3.2, 0.4, ty - 0.2, 0.4, g, 2.2))
                add(70, _box(x - 4.5, 3.0, ty - 1.5, 3.0, g + 2.2, 2.5))
        if rng.random() < 0.8:
            fx = rng.uniform(4, 20)
            add(51, _box(fx, rng.uniform(6, 14), side * 6.9 - 0.05, 0.1, g, 1.2))
        for _ in range(rng.integers(1, 3)):
            px = rng.uniform(6, 30)
            add(80, _box(px, 0.25, side * 6.0 - 0.12, 0.25, g, 5.0))
            if rng.random() < 0.7:
                add(81, _box(px - 0.05, 0.1, side * 6.0 - 0.45, 0.9, g + 2.6, 0.9))

    occupied = []

    def place(label, length, width, height, ylo, yhi, tries=20):
        for _ in range(tries):
            x0 = rng.uniform(5, 35)
            y0 = rng.uniform(ylo, yhi - width)
            fp = (x0, x0 + length, y0, y0 + width)
            if all(fp[1] < o[0] - 0.5 or fp[0] > o[1] + 0.5 or fp[3] < o[2] - 0.3 or fp[2] > o[3] + 0.3
                   for o in occupied):
                occupied.append(fp)
                add(label, _box(x0, length, y0, width, g, height))
                return

    for _ in range(rng.integers(2, 5)):
        place(10, 4.2, 1.8, 1.5, -3.8, 3.8)
    if rng.random() < 0.6:
        place(18, 8.0, 2.5, 3.2, -3.8, 3.8)
    if rng.random() < 0.6:
        place(20, 6.0, 2.3, 2.6, -3.8, 3.8)
    for _ in range(rng.integers(1, 4)):
        place(30, 0.6, 0.6, 1.75, 4.2, 6.3)
    for _ in range(rng.integers(0, 3)):
        place(30, 0.6, 0.6, 1.75, -6.3, -4.2)
    if rng.random() < 0.7:
        place(31, 1.7, 0.6, 1.7, -3.5, 3.5)
    if rng.random() < 0.7:
        place(11, 1.7, 0.5, 1.0, -6.3, 6.3)
    if rng.random() < 0.6:
        place(15, 2.0, 0.8, 1.2, -3.5, 3.5)

    side = rng.choice([-1, 1])
    px = rng.uniform(8, 30)
    parking = (px, px + rng.uniform(6, 12), *sorted((side * 4.0, side * 6.5)))
    return Scene(np.array(boxes, np.float64), np.array(labels, np.int64),
                 np.arange(1, len(boxes) + 1), parking)


def ground_label(scene, x, y):
    ay = np.abs(y)
    lab = np.where(ay < 4.0, 40, np.where(ay < 6.5, 48, 72))
    px0, px1, py0, py1 = scene.parking
    park = (x >= px0) & (x <= px1) & (y >= py0) & (y <= py1)
    return np.where(park, 44, lab)


def cast(scene, origin, dirs, chunk=65536):
    """Nearest hit per ray: returns (t, raw label, instance, normal axis); t=inf on miss."""
    n = len(dirs)
    t_best = np.full(n, np.inf)
    lab = np.zeros(n, np.int64)
    inst = np.zeros(n, np.int64)
    axis = np.full(n, 2, np.int64)
    b = scene.boxes
    for s in range(0, n, chunk):
        d = dirs[s : s + chunk]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            tmin = np.full((len(d), len(b)), -np.inf)
            tmax = np.full((len(d), len(b)), np.inf)
            enter_axis = np.zeros((len(d), len(b)), np.int64)
            for k in range(3):
                lo = (b[:, 2 * k] - origin[k])[None, :] * inv[:, k : k + 1]
                hi = (b[:, 2 * k + 1] - origin[k])[None, :] * inv[:, k : k + 1]
                near, far = np.minimum(lo, hi), np.maximum(lo, hi)
                par = d[:, k : k + 1] == 0
                inside = ((b[:, 2 * k] <= origin[k]) & (origin[k] <= b[:, 2 * k + 1]))[None, :]
                near = np.where(par, np.where(inside, -np.inf, np.inf), near)
                far = np.where(par, np.where(inside, np.inf, -np.inf), far)
                enter_axis = np.where(near > tmin, k, enter_axis)
                tmin = np.maximum(tmin, near)
                tmax = np.minimum(tmax, far)
        hit = (tmax >= tmin) & (tmin > 1e-6)
        tb = np.where(hit, tmin, np.inf)
        j = tb.argmin(axis=1)
        rows = np.arange(len(d))
        tj = tb[rows, j]
        # ground plane z = -SENSOR_HEIGHT
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(d[:, 2] < 0, (-SENSOR_HEIGHT - origin[2]) / d[:, 2], np.inf)
        gpt = origin[None, :] + tg[:, None] * d
        glab = ground_label(scene, gpt[:, 0], gpt[:, 1])
        use_box = tj < tg
        t = np.where(use_box, tj, tg)
        t_best[s : s + chunk] = t
        lab[s : s + chunk] = np.where(use_box, scene.box_label[j], glab)
        inst[s : s + chunk] = np.where(use_box, scene.box_instance[j], 0)
        axis[s : s + chunk] = np.where(use_box, enter_axis[rows, j], 2)
    return t_best, lab, inst, axis


def lidar_scan(scene, rng, beams=64, azimuth_step=0.4):
    """Spinning 64-beam sensor, pitch +2.0 .. -24.8 degrees, full revolution."""
    pitch = np.radians(np.linspace(2.0, -24.8, beams))
    yaw = np.radians(np.arange(-180.0, 180.0, azimuth_step))
    ph, th = np.meshgrid(pitch, yaw, indexing="ij")
    dirs = np.stack([np.cos(ph) * np.cos(th), np.cos(ph) * np.sin(th), np.sin(ph)], -1).reshape(-1, 3)
    t, lab, inst, _ = cast(scene, np.zeros(3), dirs)
    ok = np.isfinite(t) & (t < MAX_RANGE)
    t = t[ok] + rng.normal(0, 0.01, ok.sum())
    pts = dirs[ok] * t[:, None]
    lab, inst = lab[ok], inst[ok]
    base = np.array([APPEARANCE[int(v)][2] for v in lab])
    inten = np.clip(base + rng.normal(0, 0.03, len(base)), 0, 1)
    cloud = np.concatenate([pts, inten[:, None]], axis=1).astype(np.float32)
    return cloud, lab.astype(np.uint16), inst.astype(np.uint16)


def render_camera(scene, calib, rng):
    """RGB image in [0, 1] and a CityScapes label map from the same scene."""
    width, height = calib.image_size
    proj = calib.proj
    k = proj[:, :3]
    kinv = np.linalg.inv(k)
    center_cam = -kinv @ proj[:, 3]
    rot, trans = calib.tr_velo_to_cam[:, :3], calib.tr_velo_to_cam[:, 3]
    origin = rot.T @ (center_cam - trans)
    uu, vv = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    pix = np.stack([uu, vv, np.ones_like(uu)], -1).reshape(-1, 3)
    dirs = (pix @ kinv.T) @ rot  # camera -> lidar frame (rot.T applied on the right)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, lab, inst, axis = cast(scene, origin, dirs)
    miss = ~np.isfinite(t) | (t > 200)
    rgb = np.array([APPEARANCE[int(v)][1] if v in APPEARANCE else SKY_RGB for v in np.where(miss, 0, lab)])
    shade = np.choose(axis, [0.85, 0.7, 1.0])
    inst_tint = 1.0 + 0.08 * np.sin(inst * 1.7)
    rgb = rgb * (shade * inst_tint)[:, None]
    rgb[miss] = SKY_RGB
    rgb = np.clip(rgb + rng.normal(0, 0.02, rgb.shape), 0, 1)
    cs = np.array([APPEARANCE[int(v)][0] if v in APPEARANCE else 0 for v in lab])
    cs[miss] = SKY_CITYSCAPES
    return rgb.reshape(height, width, 3), cs.reshape(height, width).astype(np.uint8)


def write_sequence(root, seq, n_scans, seed=0, image_scale=1.0, azimuth_step=0.4):
    """Generate ``n_scans`` frames of one sequence under ``root``; returns the sequence dir."""
    rng = np.random.default_rng([seed, int(seq)])
    calib = kitti_like_calib(image_scale)
    sdir = kitti_io.sequence_dir(root, seq)
    sdir.mkdir(parents=True, exist_ok=True)
    kitti_io.write_calib(kitti_io.calib_path(root, seq), calib)
    for i in range(n_scans):
        sid = f"{i:06d}"
        scene = random_scene(rng)
        pts, lab, inst = lidar_scan(scene, rng, azimuth_step=azimuth_step)
        kitti_io.write_scan(kitti_io.scan_path(root, seq, sid), pts)
        kitti_io.write_labels(kitti_io.label_path(root, seq, sid), lab, inst)
        rgb, cs = render_camera(scene, calib, rng)
        kitti_io.write_image(kitti_io.image_path(root, seq, sid), rgb)
        kitti_io.write_label_image(sdir / "image_labels" / f"{sid}.png", cs)
    return sdir


def write_dataset(root, sequences, n_scans, seed=0, image_scale=1.0, azimuth_step=0.4):
    for seq in sequences:
        write_sequence(root, seq, n_scans, seed, image_scale, azimuth_step)
    return Path(root)


def main(argv=None):
    ap = argparse.ArgumentParser(description="Write a synthetic SemanticKITTI-style dataset.",
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seq", nargs="+", default=["07"])
    ap.add_argument("--scans", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--image-scale", type=float, default=1.0)
    args = ap.parse_args(argv)
    write_dataset(args.out, args.seq, args.scans, args.seed, args.image_scale)


if __name__ == "__main__":
    main()
