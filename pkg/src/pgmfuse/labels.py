"""Reduced 15-class label space, raw-id remapping, class frequencies and loss weights."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import kitti_io

CLASSES = (
    "unlabeled", "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person", "rider",
    "road", "sidewalk", "building", "fence", "vegetation", "terrain", "pole", "traffic-sign",
)
NUM_CLASSES = len(CLASSES)
CLASS_ID = {name: i for i, name in enumerate(CLASSES)}
DEFAULT_EPS = 1.02

SEMANTICKITTI_NAMES = {
    0: "unlabeled", 1: "outlier", 10: "car", 11: "bicycle", 13: "bus", 15: "motorcycle",
    16: "on-rails", 18: "truck", 20: "other-vehicle", 30: "person", 31: "bicyclist",
    32: "motorcyclist", 40: "road", 44: "parking", 48: "sidewalk", 49: "other-ground",
    50: "building", 51: "fence", 52: "other-structure", 60: "lane-marking", 70: "vegetation",
    71: "trunk", 72: "terrain", 80: "pole", 81: "traffic-sign", 99: "other-object",
    252: "moving-car", 253: "moving-bicyclist", 254: "moving-person", 255: "moving-motorcyclist",
    256: "moving-on-rails", 257: "moving-bus", 258: "moving-truck", 259: "moving-other-vehicle",
}
CITYSCAPES_NAMES = {
    0: "unlabeled", 1: "ego vehicle", 2: "rectification border", 3: "out of roi", 4: "static",
    5: "dynamic", 6: "ground", 7: "road", 8: "sidewalk", 9: "parking", 10: "rail track",
    11: "building", 12: "wall", 13: "fence", 14: "guard rail", 15: "bridge", 16: "tunnel",
    17: "pole", 18: "polegroup", 19: "traffic light", 20: "traffic sign", 21: "vegetation",
    22: "terrain", 23: "sky", 24: "person", 25: "rider", 26: "car", 27: "truck", 28: "bus",
    29: "caravan", 30: "trailer", 31: "train", 32: "motorcycle", 33: "bicycle",
}
SOURCES = {"semantickitti": "semantickitti.tsv", "cityscapes": "cityscapes.tsv"}


def parse_class_map(text):
    """Parse ``raw_id<TAB>reduced_name`` lines into {raw_id: reduced_id}."""
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        raw, _, name = line.partition("\t")
        name = name.strip()
        if name not in CLASS_ID:
            raise ValueError(f"line {lineno}: unknown reduced class {name!r}")
        table[int(raw)] = CLASS_ID[name]
    return table


def read_class_map(path):
    return parse_class_map(Path(path).read_text())


def _builtin(source):
    return resources.files("pgmfuse.data").joinpath(SOURCES[source]).read_text()


@dataclass
class ClassSpec:
    kitti_map: dict
    cityscapes_map: dict
    classes: tuple = CLASSES

    @classmethod
    def default(cls, kitti_path=None, cityscapes_path=None):
        kmap = read_class_map(kitti_path) if kitti_path else parse_class_map(_builtin("semantickitti"))
        cmap = read_class_map(cityscapes_path) if cityscapes_path else parse_class_map(_builtin("cityscapes"))
        return cls(kmap, cmap)

    def table(self, source):
        return {"semantickitti": self.kitti_map, "cityscapes": self.cityscapes_map}[source]

    def lookup(self, source):
        """Dense uint8 lookup over all 16-bit ids plus a known-id mask."""
        lut = np.zeros(1 << 16, np.uint8)
        known = np.zeros(1 << 16, bool)
        for raw, red in self.table(source).items():
            lut[raw] = red
            known[raw] = True
        return lut, known


_DEFAULT = None


def default_spec():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = ClassSpec.default()
    return _DEFAULT


def remap(raw, source="semantickitti", spec=None, return_unknown=False):
    """Map raw dataset ids to reduced ids; ids missing from the table become 0."""
    lut, known = (spec or default_spec()).lookup(source)
    raw = np.asarray(raw).astype(np.int64) & 0xFFFF
    out = lut[raw]
    if return_unknown:
        return out, int(np.count_nonzero(~known[raw]))
    return out


def count_labels(label_files, spec=None, threads=1):
    """Reduced-class point counts over a list of ``.label`` files."""
    lut, _ = (spec or default_spec()).lookup("semantickitti")

    def one(path):
        sem, _ = kitti_io.read_labels(path)
        return np.bincount(lut[sem], minlength=NUM_CLASSES).astype(np.int64)

    total = np.zeros(NUM_CLASSES, np.int64)
    with ThreadPoolExecutor(max(1, threads)) as pool:
        for c in pool.map(one, label_files):
            total += c
    return total


def split_label_files(root, manifest, split):
    files = []
    for seq in manifest.sequences(split):
        for sid in kitti_io.scan_ids(root, seq):
            path = kitti_io.label_path(root, seq, sid)
            if not path.exists():
                raise FileNotFoundError(f"missing label file for scan {seq}/{sid}: {path}")
            files.append(path)
    return files


def class_frequencies(root, manifest, split="train", spec=None, threads=1):
    """Fraction of raw points per reduced class (unlabeled included, sums to 1)."""
    counts = count_labels(split_label_files(root, manifest, split), spec, threads)
    total = counts.sum()
    if total == 0:
        return np.zeros(NUM_CLASSES)
    return counts / total


def loss_weights(freqs, eps=DEFAULT_EPS):
    """w_c = 1 / ln(f_c + eps) for scored classes; the unlabeled weight is 0."""
    f = np.asarray(freqs, dtype=np.float64)
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("class frequencies must be finite and non-negative")
    if eps <= 1.0 - f[1:].min():
        raise ValueError(f"eps={eps} gives a non-positive log for frequency {f[1:].min()}")
    w = 1.0 / np.log(f + eps)
    w[0] = 0.0
    return w


def write_fixture(path, values, names=CLASSES):
    lines = [f"{name} {float(v)!r}" for name, v in zip(names, values)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_fixture(path):
    vals = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            name, val = line.rsplit(" ", 1)
            vals[name] = float(val)
    return np.array([vals[name] for name in CLASSES])

