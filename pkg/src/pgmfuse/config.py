"""Flat ``key = value`` run configuration with ``#`` comments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import kitti_io
from .geometry import FovSpec
from .labels import DEFAULT_EPS
from .models import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _seqs(v):
    if isinstance(v, (tuple, list)):
        return tuple(f"{int(s):02d}" for s in v)
    return tuple(f"{int(s):02d}" for s in str(v).replace(",", " ").split())


@dataclass
class Config:
    root: str | None = None
    out: str = "pgmfuse-out"
    # grid
    grid_h: int = 64
    grid_w: int = 512
    yaw_left: float = 40.0
    yaw_right: float = -40.0
    pitch_up: float = 2.0
    pitch_down: float = -18.0
    # labels
    kitti_map: str | None = None
    cityscapes_map: str | None = None
    eps: float = DEFAULT_EPS
    # calibration keys
    proj_key: str = "P2"
    tr_key: str = "Tr"
    # splits
    train_seqs: tuple = kitti_io.DEFAULT_TRAIN
    val_seqs: tuple = kitti_io.DEFAULT_VAL
    test_seqs: tuple = kitti_io.DEFAULT_TEST
    frames: int = 0  # per-sequence cap, 0 = all scans
    # training
    epochs: int = 350
    batch: int = 0  # 0 = per-kind default
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    stop_at: float | None = None
    width: float = 1.0

    def fov(self):
        return FovSpec(self.yaw_left, self.yaw_right, self.pitch_up, self.pitch_down)

    def model_config(self):
        return ModelConfig(h=self.grid_h, w=self.grid_w, width=self.width)

    def train_config(self, kind):
        kw = dict(epochs=self.epochs, lr=self.lr, momentum=self.momentum, seed=self.seed, stop_at=self.stop_at)
        if self.batch:
            kw["batch"] = self.batch
        return TrainConfig.for_kind(kind, **kw)

    def sequences(self, split):
        try:
            return {"train": self.train_seqs, "val": self.val_seqs, "test": self.test_seqs}[split]
        except KeyError:
            raise ConfigError(f"unknown split {split!r}") from None

    def validate(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError("grid dims must be positive")
        self.fov()
        for key in ("kitti_map", "cityscapes_map"):
            path = getattr(self, key)
            if path and not Path(path).is_file():
                raise FileNotFoundError(f"{key}: no such file {path}")
        if self.root is not None and not Path(self.root).is_dir():
            raise FileNotFoundError(f"root: no such directory {self.root}")
        return self

    def as_text(self):
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(v)
            lines.append(f"{k} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(Config)}


def parse_text(text):
    """Return {key: raw string} from ``key = value`` lines."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        out[key.strip()] = val.strip()
    return out


def _coerce(key, raw):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if raw is None or raw == "":
        return None if key in ("root", "kitti_map", "cityscapes_map", "stop_at") else _FIELDS[key].default
    kind = str(_FIELDS[key].type)
    try:
        if key.endswith("_seqs"):
            return _seqs(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return str(raw)


def load(path=None, overrides=None):
    """Read a config file (optional) and apply overrides; None-valued overrides are ignored."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_text(p.read_text()))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return Config(**{k: _coerce(k, v) for k, v in values.items()})
