"""Fusion network builders, checkpoints, training and inference.

All kinds share one fire-module encoder/decoder layout: a stride (1, 2) conv
plus a 1x1 input skip, three width-only pools between fire stages (512 -> 32
columns), and four upsampling fire modules with additive skips back to 512.

kinds
    lidar   5-channel grid (x, y, z, intensity, range)
    early   8-channel grid (+ r, g, b)
    late    10-channel grid (+ l1, l2 label channels)
    mid     5-channel grid and a 3-channel image resampled on the grid; two
            encoders, concatenated and passed through two more fire modules
    image   3-channel image grid only (the image segmenter used for l1)
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, nn_core
from .geometry import PgmFrame
from .kitti_io import FormatError
from .labels import NUM_CLASSES
from .nn_core import ConvBlock, Fire, MaxPoolW, Module, Tape

KINDS = ("lidar", "early", "mid", "late", "image")
KIND_CODE = {k: i for i, k in enumerate(KINDS)}
GRID_CHANNELS = {"lidar": 5, "early": 8, "late": 10, "mid": 5, "image": 0}
IMAGE_CHANNELS = 3
QUANTIZED_FLAG = 0x80

# per-channel normalization of x, y, z, intensity, range, r, g, b, l1, l2
CHANNEL_MEAN = (10.88, 0.23, -1.04, 0.21, 12.12, 0.5, 0.5, 0.5, 0.0, 0.0)
CHANNEL_STD = (11.47, 6.91, 0.86, 0.16, 12.32, 0.25, 0.25, 0.25, 1.0, 1.0)
IMAGE_MEAN, IMAGE_STD = 0.5, 0.25

ENCODER_FIRES = (  # (name, squeeze, expand) per stage; pools between stages
    (("fire2", 16, 64), ("fire3", 16, 64)),
    (("fire4", 32, 128), ("fire5", 32, 128)),
    (("fire6", 48, 192), ("fire7", 48, 192), ("fire8", 64, 256), ("fire9", 64, 256)),
)
DECODER_FIRES = (("fire10", 64, 128), ("fire11", 32, 64), ("fire12", 16, 32), ("fire13", 16, 32))
FUSION_FIRES = (("fuse1", 64, 256), ("fuse2", 64, 256))
CONV1_FILTERS = 64
TOTAL_STRIDE = 16


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    h: int = 64
    w: int = 512
    num_classes: int = NUM_CLASSES
    width: float = 1.0
    bn: bool = True

    def scale(self, n):
        return max(1, int(round(n * self.width)))


# ---------------------------------------------------------------- architecture

class Encoder(Module):
    """conv1 (stride (1,2)) + 1x1 skip, then fire stages separated by width pools.

    With ``residual=True`` the second fire of every pair is a fire-residual
    module (the image encoder); channel layout is identical either way.
    """

    def __init__(self, cin, cfg, residual=False):
        super().__init__()
        sc = cfg.scale
        c1 = sc(CONV1_FILTERS)
        self.conv1 = ConvBlock(cin, c1, 3, stride=(1, 2), pad=1, bn=cfg.bn)
        self.conv1_skip = ConvBlock(cin, c1, 1, bn=cfg.bn)
        self.pools = [MaxPoolW(3, 2, 1) for _ in range(3)]
        self.stages = []
        c = c1
        for stage in ENCODER_FIRES:
            fires = []
            for i, (name, s, e) in enumerate(stage):
                res = residual and i % 2 == 1
                fires.append((name, Fire(c, sc(s), sc(e), sc(e), bn=cfg.bn, residual=res)))
                c = 2 * sc(e)
            self.stages.append(fires)
        self.cout = c

    def children(self):
        out = [("conv1", self.conv1), ("conv1_skip", self.conv1_skip)]
        for stage in self.stages:
            out.extend(stage)
        return out

    def run(self, ex, x):
        a = ex.block(self.conv1, x)
        skips = {"w1": ex.block(self.conv1_skip, x), "w2": a}
        y = a
        for level, (pool, stage) in enumerate(zip(self.pools, self.stages)):
            y = ex.pool(pool, y)
            for _, fire in stage:
                y = fire.run(ex, y)
            if level < 2:
                skips[f"w{4 << level}"] = y
        return y, skips


class Decoder(Module):
    """Four x2 upsampling fire modules with additive encoder skips, then a 3x3 head."""

    def __init__(self, cin, cfg):
        super().__init__()
        sc = cfg.scale
        self.fires = []
        c = cin
        for name, s, e in DECODER_FIRES:
            self.fires.append((name, Fire(c, sc(s), sc(e), sc(e), bn=cfg.bn, upsample=True)))
            c = 2 * sc(e)
        self.head = ConvBlock(c, cfg.num_classes, 3, pad=1, bn=False, relu=False)

    def children(self):
        return [*self.fires, ("head", self.head)]

    def run(self, ex, x, skips):
        y = x
        for (name, fire), key in zip(self.fires, ("w8", "w4", "w2", "w1")):
            y = fire.run(ex, y)
            y = ex.add(y, skips[key], f"{self.name}.{name}.skip")
        return ex.block(self.head, y)


class FusionNet(Module):
    def __init__(self, kind, cfg=None):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        cfg = cfg or ModelConfig()
        if cfg.w % TOTAL_STRIDE:
            raise ValueError(f"grid width {cfg.w} is not divisible by the total stride {TOTAL_STRIDE}")
        if cfg.h < 1:
            raise ValueError("grid height must be >= 1")
        self.kind, self.cfg = kind, cfg
        self.lidar = Encoder(GRID_CHANNELS[kind], cfg) if kind != "image" else None
        self.image = Encoder(IMAGE_CHANNELS, cfg, residual=True) if kind in ("mid", "image") else None
        self.fusion = []
        enc_out = (self.lidar or self.image).cout
        if kind == "mid":
            c = self.lidar.cout + self.image.cout
            for name, s, e in FUSION_FIRES:
                self.fusion.append((name, Fire(c, cfg.scale(s), cfg.scale(e), cfg.scale(e), bn=cfg.bn)))
                c = 2 * cfg.scale(e)
            enc_out = c
        self.decoder = Decoder(enc_out, cfg)
        self.assign_names()

    @property
    def input_channels(self):
        return GRID_CHANNELS[self.kind]

    @property
    def uses_image(self):
        return self.image is not None

    def children(self):
        out = []
        if self.lidar is not None:
            out.append(("lidar", self.lidar))
        if self.image is not None:
            out.append(("image", self.image))
        return out + self.fusion + [("decoder", self.decoder)]

    def forward_with(self, ex, inputs):
        if self.kind == "image":
            y, skips = self.image.run(ex, ex.input(inputs["image"], "input.image"))
        else:
            y, skips = self.lidar.run(ex, ex.input(inputs["grid"], "input.grid"))
        if self.kind == "mid":
            z, _ = self.image.run(ex, ex.input(inputs["image"], "input.image"))
            y = ex.concat([y, z], "fusion.cat")
            for _, fire in self.fusion:
                y = fire.run(ex, y)
        return ex.output(self.decoder.run(ex, y, skips))

    def forward(self, inputs, train=False):
        return self.forward_with(Tape(train, record=False), inputs)


def build(kind, cfg=None, seed=0):
    model = FusionNet(kind, cfg)
    nn_core.init_params(model, np.random.default_rng(seed))
    return model


def param_count(model):
    return model.param_count()


def conv1_widening_delta(cfg, extra_channels):
    """Parameters added when the grid input gains ``extra_channels`` channels.

    Both input-reading convolutions widen: the 3x3 conv1 and its 1x1 skip.
    """
    n = cfg.scale(CONV1_FILTERS)
    return extra_channels * (3 * 3 * n + 1 * 1 * n)


# ---------------------------------------------------------------- inputs

@dataclass
class Sample:
    frame: PgmFrame
    image: np.ndarray | None = None  # (h, w, 3) image resampled on the grid


def normalize_grid(data, mask, nch):
    mean = np.asarray(CHANNEL_MEAN[:nch], np.float32)
    std = np.asarray(CHANNEL_STD[:nch], np.float32)
    return ((data[..., :nch] - mean) / std * mask[..., None]).astype(np.float32)


def model_inputs(kind, samples):
    """Stack samples into the network's normalized (n, h, w, c) inputs."""
    out = {}
    nch = GRID_CHANNELS[kind]
    if nch:
        for s in samples:
            if s.frame.c < nch:
                raise ValueError(f"{kind} model needs {nch}-channel frames, got {s.frame.c}")
        out["grid"] = np.stack([normalize_grid(s.frame.data, s.frame.mask, nch) for s in samples])
    if kind in ("mid", "image"):
        for s in samples:
            if s.image is None:
                raise ValueError(f"{kind} model needs an image grid for every sample")
        out["image"] = np.stack([((s.image - IMAGE_MEAN) / IMAGE_STD).astype(np.float32) for s in samples])
    return out


def targets(samples):
    return np.stack([s.frame.labels.astype(np.int64) for s in samples])


def masks(samples):
    return np.stack([s.frame.mask for s in samples])


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    kind: str
    tensors: dict
    meta: dict = field(default_factory=dict)
    quantized: bool = False
    qparams: dict = field(default_factory=dict)  # name -> (scale, zero_point) for integer tensors

    def param_count(self):
        return int(self.meta.get("param_count", 0))


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def to_checkpoint(model, **meta):
    tensors = {name: arr.astype(np.float32).copy() for name, arr in model.named_tensors()}
    info = {"model_config": asdict(model.cfg), "param_count": model.param_count()}
    info.update(meta)
    return Checkpoint(model.kind, tensors, info)


def from_checkpoint(ckpt):
    if ckpt.quantized:
        raise CheckpointError("quantized checkpoints run through pgmfuse.quantize")
    cfg = ModelConfig(**ckpt.meta["model_config"])
    model = FusionNet(ckpt.kind, cfg)
    names = [name for name, _ in model.named_tensors()]
    if set(names) != set(ckpt.tensors):
        missing = sorted(set(names) - set(ckpt.tensors))[:3]
        raise CheckpointError(f"checkpoint does not match a {ckpt.kind} model (missing {missing})")
    _load_tensors(model, ckpt.tensors)
    if model.param_count() != ckpt.param_count():
        raise CheckpointError(f"parameter count {model.param_count()} != recorded {ckpt.param_count()}")
    return model


def _load_tensors(module, tensors, prefix=""):
    for d in (module.params, module.buffers):
        for key in d:
            arr = tensors[prefix + key]
            if arr.shape != d[key].shape:
                raise CheckpointError(f"{prefix + key}: shape {arr.shape} != {d[key].shape}")
            d[key] = arr.astype(np.float32).copy()
    for cname, child in module.children():
        _load_tensors(child, tensors, prefix + cname + ".")


CKPT_MAGIC = b"PFCK"
CKPT_VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i4")}
DTYPE_CODE = {np.dtype("float32"): 0, np.dtype("int8"): 1, np.dtype("int32"): 2}


def checkpoint_bytes(ckpt):
    """Serialize: header, JSON metadata, then per tensor name/rank/dims/payload; CRC32 trailer."""
    buf = io.BytesIO()
    code = KIND_CODE[ckpt.kind] | (QUANTIZED_FLAG if ckpt.quantized else 0)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    buf.write(struct.pack("<4sHBI", CKPT_MAGIC, CKPT_VERSION, code, len(ckpt.tensors)))
    buf.write(struct.pack("<I", len(meta)) + meta)
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        if ckpt.quantized:
            buf.write(struct.pack("<B", DTYPE_CODE[arr.dtype]))
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        if ckpt.quantized and arr.dtype != np.float32:
            scale, zp = ckpt.qparams[name]
            buf.write(struct.pack("<fi", scale, zp))
        dt = DTYPES[DTYPE_CODE[arr.dtype]] if ckpt.quantized else DTYPES[0]
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(raw, name="<bytes>"):
    if len(raw) < 15 or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{name}: not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{name}: checksum failure")
    _, version, code, count = struct.unpack_from("<4sHBI", body)
    if version != CKPT_VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version}")
    quantized = bool(code & QUANTIZED_FLAG)
    kind_code = code & ~QUANTIZED_FLAG
    if kind_code >= len(KINDS):
        raise FormatError(f"{name}: unknown model kind code {kind_code}")
    off = struct.calcsize("<4sHBI")
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off : off + mlen].decode())
    off += mlen
    tensors, qparams = {}, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            tname = body[off + 2 : off + 2 + nlen].decode()
            off += 2 + nlen
            dcode = 0
            if quantized:
                (dcode,) = struct.unpack_from("<B", body, off)
                off += 1
            (rank,) = struct.unpack_from("<B", body, off)
            dims = struct.unpack_from(f"<{rank}I", body, off + 1)
            off += 1 + 4 * rank
            if quantized and dcode != 0:
                qparams[tname] = struct.unpack_from("<fi", body, off)
                off += 8
            dt = DTYPES[dcode]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + size > len(body):
                raise FormatError(f"{name}: tensor {tname} runs past end of file")
            arr = np.frombuffer(body, dt, int(np.prod(dims, dtype=np.int64)), off).reshape(dims)
            tensors[tname] = arr.astype(dt.newbyteorder("="))
            off += size
    except struct.error as exc:
        raise FormatError(f"{name}: truncated checkpoint ({exc})") from None
    if off != len(body):
        raise FormatError(f"{name}: {len(body) - off} trailing bytes")
    return Checkpoint(KINDS[kind_code], tensors, meta, quantized, qparams)


def write_checkpoint(ckpt, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def read_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def payload_bytes(ckpt):
    return sum(arr.nbytes for arr in ckpt.tensors.values())


# ---------------------------------------------------------------- inference

def predict(model, samples, batch=8):
    """Argmax class per cell (lowest index on ties); unmasked cells get class 0."""
    preds = []
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        logits = model.forward(model_inputs(model.kind, chunk), train=False)
        p = np.argmax(logits, axis=-1).astype(np.uint8)
        preds.append(np.where(masks(chunk), p, 0).astype(np.uint8))
    return np.concatenate(preds) if preds else np.zeros((0,), np.uint8)


def infer(ckpt_or_model, sample):
    model = from_checkpoint(ckpt_or_model) if isinstance(ckpt_or_model, Checkpoint) else ckpt_or_model
    if isinstance(sample, PgmFrame):
        sample = Sample(sample)
    return predict(model, [sample])[0]


def evaluate_model(model, samples, batch=8):
    from .evaluate import ConfusionMatrix, miou

    cm = ConfusionMatrix()
    preds = predict(model, samples, batch)
    for s, p in zip(samples, preds):
        cm.accumulate(s.frame.labels, p, s.frame.mask)
    return miou(cm)[0], cm


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 350
    batch: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    stop_at: float | None = None  # stop once validation mIoU reaches this value

    @classmethod
    def for_kind(cls, kind, **kw):
        if kind == "mid":
            kw.setdefault("batch", 32)
        return cls(**kw)


def train_step(model, opt, samples, weights):
    tape = Tape(train=True)
    logits = model.forward_with(tape, model_inputs(model.kind, samples))
    loss, grad = nn_core.weighted_ce_loss(logits, targets(samples), weights)
    if not np.isfinite(loss):
        raise FloatingPointError("training loss is not finite")
    tape.backward(logits, grad)
    opt.step()
    return loss


def train(kind, train_samples, val_samples, weights, tcfg=None, mcfg=None, log=None):
    """Minibatch SGD on the weighted loss; keeps the best-validation checkpoint.

    Returns ``(best_checkpoint, log_lines)`` with one ``epoch loss val_miou`` line
    per epoch.  ``log`` is called with each line as it is produced.
    """
    tcfg = tcfg or TrainConfig.for_kind(kind)
    if not train_samples:
        raise ValueError("training set is empty")
    model = build(kind, mcfg, tcfg.seed)
    opt = nn_core.SGD(model, tcfg.lr, tcfg.momentum)
    rng = np.random.default_rng(tcfg.seed + 1)
    val_samples = val_samples or train_samples
    run_meta = {"seed": tcfg.seed, "train_config": asdict(tcfg)}
    run_meta["config_hash"] = config_hash({**run_meta, "model_config": asdict(model.cfg), "kind": kind})
    best, best_miou, lines = None, -1.0, []
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train_samples))
        losses = []
        for i in range(0, len(order), tcfg.batch):
            batch = [train_samples[j] for j in order[i : i + tcfg.batch]]
            losses.append(train_step(model, opt, batch, weights))
        val_miou, _ = evaluate_model(model, val_samples)
        line = f"{epoch} {float(np.mean(losses)):.6f} {val_miou:.6f}"
        lines.append(line)
        if log:
            log(line)
        if val_miou > best_miou:
            best_miou = val_miou
            best = to_checkpoint(model, epoch=epoch, val_miou=val_miou, **run_meta)
        if tcfg.stop_at is not None and val_miou >= tcfg.stop_at:
            break
    return best, lines


# ---------------------------------------------------------------- late fusion

def point_model_sample(frame5, frame8, kind):
    return Sample(frame8 if kind == "early" else frame5)


def late_fusion_prepare(cloud, image, calib, point_model, image_labels=None, image_model=None,
                        fov=geometry.FovSpec(), h=64, w=512, label_map=None):
    """Build a 10-channel frame: grid + colors + l1 (image labels) + l2 (point model).

    ``image_labels`` is an (h_img, w_img) reduced-id map, or a path to a raster of
    CityScapes ids which is remapped on load; without
    it, ``image_model`` segments the image resampled on the grid.
    """
    if isinstance(point_model, Checkpoint):
        point_model = from_checkpoint(point_model)
    frame5 = geometry.spherical_project(cloud, fov, h, w, label_map)
    frame8 = geometry.colorize(frame5, image, calib)
    l2 = infer(point_model, point_model_sample(frame5, frame8, point_model.kind))
    if image_labels is not None:
        if isinstance(image_labels, (str, Path)):
            path = Path(image_labels)
            if not path.exists():
                raise FileNotFoundError(f"image label map not found: {path}")
            from .kitti_io import read_label_image
            from .labels import remap

            image_labels = remap(read_label_image(path), "cityscapes")
        l1 = geometry.sample_cells(frame5, np.asarray(image_labels), calib)
    elif image_model is not None:
        if isinstance(image_model, Checkpoint):
            image_model = from_checkpoint(image_model)
        grid = geometry.image_to_grid(frame5, image, calib, fov)
        l1 = infer(image_model, Sample(frame8, grid))
    else:
        raise ValueError("late fusion needs image_labels or an image model")
    return geometry.attach_label_channels(frame8, l1, l2)
