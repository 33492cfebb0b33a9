"""Readers and writers for SemanticKITTI files and the package's own binary formats."""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .geometry import PgmFrame

log = logging.getLogger(__name__)

DEFAULT_TRAIN = ("00", "01", "02", "03", "04", "05", "06", "09", "10")
DEFAULT_VAL = ("07",)
DEFAULT_TEST = ("08",)
# scan totals of the default splits on the complete dataset
FULL_SPLIT_TOTALS = {"train": 18029, "val": 1101, "test": 4071}


class FormatError(ValueError):
    """A file does not follow its binary or text layout."""


class ConsistencyError(ValueError):
    """Two companion files disagree (e.g. scan and label point counts)."""


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 4) float32: x, y, z, intensity
    labels: Optional[np.ndarray] = None  # (n,) uint16 raw semantic ids
    instances: Optional[np.ndarray] = None  # (n,) uint16
    index: Optional[np.ndarray] = None  # (n,) original row of each point in the file
    n_raw: int = 0
    dropped: int = 0
    clamped: int = 0

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.points):
            raise ConsistencyError(f"{len(self.points)} points but {len(self.labels)} labels")
        if self.index is None:
            self.index = np.arange(len(self.points), dtype=np.int64)
        if not self.n_raw:
            self.n_raw = len(self.points)


@dataclass
class CalibrationSet:
    proj: np.ndarray  # (3, 4)
    tr_velo_to_cam: np.ndarray  # (3, 4)
    image_size: Optional[tuple] = None  # (width, height)

    def validate(self):
        if self.proj[0, 0] == 0 or self.proj[1, 1] == 0:
            raise FormatError("projection matrix has zero focal entries")
        det = float(np.linalg.det(self.tr_velo_to_cam[:, :3]))
        if abs(det - 1.0) > 1e-3:
            raise FormatError(f"Tr rotation determinant {det:.6f} is not 1")
        return self


@dataclass
class SplitManifest:
    train: tuple = DEFAULT_TRAIN
    val: tuple = DEFAULT_VAL
    test: tuple = DEFAULT_TEST
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("train/val/test sequences must be disjoint")

    def sequences(self, split):
        return {"train": self.train, "val": self.val, "test": self.test}[split]

    def total(self, split):
        return sum(self.counts.get(s, 0) for s in self.sequences(split))


# ---------------------------------------------------------------- raw dataset files

def read_raw_scan(path):
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 (trailing bytes at offset {len(raw) - len(raw) % 16})")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)


def read_scan(path):
    """Read a velodyne ``.bin``: little-endian float32 x, y, z, intensity per point.

    Non-finite points are dropped and intensities outside [0, 1] clamped; both
    counts are kept on the returned cloud.
    """
    pts = read_raw_scan(path)
    finite = np.all(np.isfinite(pts), axis=1)
    index = np.flatnonzero(finite)
    dropped = int(pts.shape[0] - index.size)
    if dropped:
        log.warning("%s: dropped %d non-finite points", path, dropped)
    kept = pts[index]
    inten = kept[:, 3]
    clamped = int(np.count_nonzero((inten < 0) | (inten > 1)))
    if clamped:
        kept[:, 3] = np.clip(inten, 0.0, 1.0)
    return PointCloud(kept, index=index, n_raw=pts.shape[0], dropped=dropped, clamped=clamped)


def read_labels(path, expected=None):
    """Return (semantic, instance) uint16 arrays from a ``.label`` file."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 4")
    words = np.frombuffer(raw, dtype="<u4")
    if expected is not None and words.size != expected:
        raise ConsistencyError(f"{path}: {words.size} labels but scan has {expected} points")
    return (words & 0xFFFF).astype(np.uint16), (words >> 16).astype(np.uint16)


def write_labels(path, semantic, instance=None):
    sem = np.asarray(semantic, dtype=np.uint32) & 0xFFFF
    inst = np.zeros_like(sem) if instance is None else (np.asarray(instance, dtype=np.uint32) & 0xFFFF)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes((sem | (inst << 16)).astype("<u4").tobytes())


def write_scan(path, points):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(np.asarray(points, dtype="<f4").reshape(-1, 4).tobytes())


def load_scan(scan_path, label_path=None):
    """Read a scan and, optionally, its labels, keeping them aligned after filtering."""
    cloud = read_scan(scan_path)
    if label_path is not None:
        sem, inst = read_labels(label_path, expected=cloud.n_raw)
        cloud.labels = sem[cloud.index]
        cloud.instances = inst[cloud.index]
    return cloud


def read_calib(path, proj_key="P2", tr_key="Tr", image_size=None):
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected 'KEY: values'")
        try:
            entries[key.strip()] = [float(tok) for tok in rest.split()]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric token ({exc})") from None
    mats = []
    for key in (proj_key, tr_key):
        if key not in entries:
            raise FormatError(f"missing calibration key {key}")
        vals = entries[key]
        if len(vals) != 12:
            raise FormatError(f"{path}: key {key} has {len(vals)} values, expected 12")
        mats.append(np.array(vals, dtype=np.float64).reshape(3, 4))
    return CalibrationSet(mats[0], mats[1], image_size).validate()


def write_calib(path, calib, extra=None):
    lines = []
    for key, mat in (extra or {}).items():
        lines.append(f"{key}: " + " ".join(f"{v:.12e}" for v in np.ravel(mat)))
    lines.append("P2: " + " ".join(f"{v:.12e}" for v in np.ravel(calib.proj)))
    lines.append("Tr: " + " ".join(f"{v:.12e}" for v in np.ravel(calib.tr_velo_to_cam)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_image(path):
    """8-bit RGB raster -> (height, width, 3) float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise FormatError(f"{path}: expected RGB raster, got mode {img.mode}")
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: unreadable raster ({exc})") from None
    return (arr / 255.0).astype(np.float32)


def write_image(path, rgb):
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "RGB").save(path)


def read_label_image(path):
    """Single-channel 8-bit label raster -> (height, width) uint16 ids."""
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise FormatError(f"{path}: expected 8-bit label raster, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8).astype(np.uint16)


def write_label_image(path, ids):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(ids, dtype=np.uint8), "L").save(path)


# ---------------------------------------------------------------- dataset layout

def sequence_dir(root, seq):
    return Path(root) / "sequences" / f"{int(seq):02d}"


def scan_ids(root, seq):
    vdir = sequence_dir(root, seq) / "velodyne"
    if not vdir.is_dir():
        return []
    return sorted(p.stem for p in vdir.glob("*.bin"))


def scan_path(root, seq, sid):
    return sequence_dir(root, seq) / "velodyne" / f"{sid}.bin"


def label_path(root, seq, sid):
    return sequence_dir(root, seq) / "labels" / f"{sid}.label"


def image_path(root, seq, sid):
    return sequence_dir(root, seq) / "image_2" / f"{sid}.png"


def calib_path(root, seq):
    return sequence_dir(root, seq) / "calib.txt"


def build_manifest(root, train=DEFAULT_TRAIN, val=DEFAULT_VAL, test=DEFAULT_TEST):
    man = SplitManifest(tuple(train), tuple(val), tuple(test))
    for seq in (*man.train, *man.val, *man.test):
        man.counts[seq] = len(scan_ids(root, seq))
    return man


# ---------------------------------------------------------------- PGM frame files

PGM_MAGIC = b"PGMF"
PGM_VERSION = 1
PGM_HEADER = struct.Struct("<4sHIIII")
FLAG_POINT_INDEX = 1
_MAX_DIM = 1 << 16


def pgm_bytes(frame):
    frame.validate()
    h, w, c = frame.data.shape
    flags = FLAG_POINT_INDEX if frame.point_index is not None else 0
    parts = [
        np.ascontiguousarray(frame.data, dtype="<f4").tobytes(),
        frame.mask.astype(np.uint8).tobytes(),
        np.ascontiguousarray(frame.labels, dtype="<u4").tobytes(),
    ]
    if flags & FLAG_POINT_INDEX:
        parts.append(np.ascontiguousarray(frame.point_index, dtype="<i4").tobytes())
    payload = b"".join(parts)
    return PGM_HEADER.pack(PGM_MAGIC, PGM_VERSION, h, w, c, flags) + payload + struct.pack("<I", zlib.crc32(payload))


def write_pgm(frame, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(pgm_bytes(frame))


def parse_pgm(raw, name="<bytes>"):
    if len(raw) < PGM_HEADER.size + 4:
        raise FormatError(f"{name}: file too short")
    magic, version, h, w, c, flags = PGM_HEADER.unpack_from(raw)
    if magic != PGM_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != PGM_VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if not (0 < h < _MAX_DIM and 0 < w < _MAX_DIM and 0 < c <= 64):
        raise FormatError(f"{name}: dimension overflow ({h}x{w}x{c})")
    cells = h * w
    size = cells * c * 4 + cells + cells * 4 + (cells * 4 if flags & FLAG_POINT_INDEX else 0)
    payload = raw[PGM_HEADER.size : -4]
    if len(payload) != size:
        raise FormatError(f"{name}: payload is {len(payload)} bytes, expected {size}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{name}: checksum failure")
    off = 0
    data = np.frombuffer(payload, "<f4", cells * c, off).reshape(h, w, c).astype(np.float32)
    off += cells * c * 4
    mask = np.frombuffer(payload, np.uint8, cells, off).reshape(h, w).astype(bool)
    off += cells
    labels = np.frombuffer(payload, "<u4", cells, off).reshape(h, w).astype(np.uint32)
    off += cells * 4
    pidx = None
    if flags & FLAG_POINT_INDEX:
        pidx = np.frombuffer(payload, "<i4", cells, off).reshape(h, w).astype(np.int32)
    return PgmFrame(data, mask, labels, pidx)


def read_pgm(path):
    return parse_pgm(Path(path).read_bytes(), str(path))
