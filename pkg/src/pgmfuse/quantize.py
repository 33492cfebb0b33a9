"""Post-training INT8 quantization.

Weights are symmetric per-tensor int8 (zero point 0) after folding batchnorm
into the preceding conv; biases are int32 at scale ``s_in * s_w``; activations
are asymmetric uint8 with ranges taken from min/max observers.  Integer
accumulations run through float64 GEMM, which is exact for these operand sizes
(|acc| < 2**53).
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models, nn_core
from .models import Checkpoint
from .nn_core import ConvBlock, Tape, col2im, conv_out_size, im2col

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
INT8 = (-128, 127)
UINT8 = (0, 255)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    signed: bool = False

    @property
    def qrange(self):
        return INT8 if self.signed else UINT8

    def __post_init__(self):
        lo, hi = self.qrange
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not lo <= self.zero_point <= hi:
            raise ValueError(f"zero point {self.zero_point} outside {self.qrange}")


def _floor_scale(scale, what):
    if scale < SCALE_FLOOR:
        log.warning("degenerate range for %s; scale floored at %g", what, SCALE_FLOOR)
        return SCALE_FLOOR
    return float(scale)


def symmetric_params(lo, hi, what="tensor"):
    """Signed weights: scale = max(|lo|, |hi|) / 127, zero point 0."""
    return QuantParams(_floor_scale(max(abs(lo), abs(hi)) / 127.0, what), 0, signed=True)


def affine_params(lo, hi, what="activation"):
    """Unsigned activations covering [min(lo, 0), max(hi, 0)]."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = _floor_scale((hi - lo) / 255.0, what)
    zp = int(np.clip(np.rint(-lo / scale), 0, 255))
    return QuantParams(scale, zp)


def quantize(x, qp):
    lo, hi = qp.qrange
    q = np.clip(np.rint(np.asarray(x, np.float64) / qp.scale) + qp.zero_point, lo, hi)
    return q.astype(np.int8 if qp.signed else np.uint8)


def dequantize(q, qp):
    return (np.asarray(q, np.float64) - qp.zero_point) * qp.scale


# ---------------------------------------------------------------- observers

@dataclass
class ObserverState:
    sites: dict = field(default_factory=dict)  # site -> [min, max]
    block_inputs: dict = field(default_factory=dict)  # block name -> site feeding it
    weights: dict = field(default_factory=dict)  # block name -> [min, max] of folded weights
    frames: int = 0

    def widen(self, site, x):
        lo, hi = float(np.min(x)), float(np.max(x))
        cur = self.sites.get(site)
        self.sites[site] = [lo, hi] if cur is None else [min(cur[0], lo), max(cur[1], hi)]

    def merge(self, other):
        out = ObserverState(dict(self.sites), dict(self.block_inputs), dict(self.weights), self.frames + other.frames)
        for site, (lo, hi) in other.sites.items():
            cur = out.sites.get(site)
            out.sites[site] = [lo, hi] if cur is None else [min(cur[0], lo), max(cur[1], hi)]
        out.block_inputs.update(other.block_inputs)
        return out


class ObserverTape(Tape):
    """Float inference that records the value range at every activation site."""

    def __init__(self, state):
        super().__init__(train=False, record=False)
        self.state = state
        self.site_of = {}
        self._keep = []

    def _mark(self, y, site):
        self.state.widen(site, y)
        self.site_of[id(y)] = site
        self._keep.append(y)
        return y

    def input(self, x, site):
        return self._mark(x, site)

    def block(self, blk, x):
        self.state.block_inputs[blk.name] = self.site_of[id(x)]
        return self._mark(blk.forward(x, False), blk.name)

    def pool(self, pool, x):
        y = pool.forward(x, False)
        self.site_of[id(y)] = self.site_of[id(x)]
        self._keep.append(y)
        return y

    def concat(self, xs, site):
        return self._mark(nn_core.concat_fwd(xs), site)

    def add(self, a, b, site, relu=False):
        s = a + b
        return self._mark(np.maximum(s, 0) if relu else s, site)


def _as_model(m):
    return models.from_checkpoint(m) if isinstance(m, Checkpoint) else m


def calibrate(model, samples, state=None, batch=4):
    """Run float inference over calibration samples, widening per-site ranges."""
    if not samples:
        raise ValueError("calibration set is empty")
    model = _as_model(model)
    state = state or ObserverState()
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        model.forward_with(ObserverTape(state), models.model_inputs(model.kind, chunk))
        state.frames += len(chunk)
    for blk in conv_blocks(model):
        w, _ = fold_batchnorm(blk)
        state.weights[blk.name] = [float(w.min()), float(w.max())]
    return state


# ---------------------------------------------------------------- checkpoint conversion

def conv_blocks(model):
    return [m for m in model.modules() if isinstance(m, ConvBlock)]


def fold_batchnorm(blk):
    """Return float64 (weight, bias) of conv followed by inference-mode batchnorm."""
    w = blk.conv.params["w"].astype(np.float64)
    b = blk.conv.params["b"].astype(np.float64)
    if blk.bn is None:
        return w, b
    bn = blk.bn
    s = bn.params["gamma"].astype(np.float64) / np.sqrt(bn.buffers["running_var"].astype(np.float64) + bn.eps)
    return w * s, (b - bn.buffers["running_mean"]) * s + bn.params["beta"]


def _f32(qp):
    return QuantParams(np.float32(qp.scale).item(), qp.zero_point, qp.signed)


def quantize_checkpoint(model, state):
    """Build an int8 checkpoint from a float model (or checkpoint) and observer state."""
    model = _as_model(model)
    tensors, qparams = {}, {}
    # scales are stored as float32, so round them before anything depends on them
    sites = {name: _f32(affine_params(lo, hi, name)) for name, (lo, hi) in state.sites.items()}
    for blk in conv_blocks(model):
        if blk.name not in state.block_inputs:
            raise ValueError(f"observer state does not cover {blk.name}")
        w, b = fold_batchnorm(blk)
        wq = _f32(symmetric_params(w.min(), w.max(), blk.name))
        s_in = sites[state.block_inputs[blk.name]].scale
        bias_scale = s_in * wq.scale
        tensors[blk.name + ".w"] = quantize(w, wq)
        qparams[blk.name + ".w"] = (np.float32(wq.scale).item(), 0)
        tensors[blk.name + ".b"] = np.clip(np.rint(b / bias_scale), -(2**31), 2**31 - 1).astype(np.int32)
        qparams[blk.name + ".b"] = (np.float32(bias_scale).item(), 0)
    meta = {
        "model_config": asdict(model.cfg),
        "sites": {k: [np.float32(v.scale).item(), v.zero_point] for k, v in sites.items()},
        "block_inputs": dict(state.block_inputs),
        "calibration_frames": state.frames,
        "float_param_count": model.param_count(),
    }
    return Checkpoint(model.kind, tensors, meta, quantized=True, qparams=qparams)


def size_report(float_ckpt, qckpt):
    fb, qb = models.payload_bytes(float_ckpt), models.payload_bytes(qckpt)
    return {"float_bytes": fb, "int8_bytes": qb, "ratio": fb / qb,
            "float_file": len(models.checkpoint_bytes(float_ckpt)), "int8_file": len(models.checkpoint_bytes(qckpt))}


# ---------------------------------------------------------------- integer inference

@dataclass
class QTensor:
    q: np.ndarray  # uint8
    qp: QuantParams


def _requant(acc, m, qp, relu):
    lo = qp.zero_point if relu else 0
    return np.clip(np.rint(acc * m) + qp.zero_point, lo, 255).astype(np.uint8)


class QuantTape(Tape):
    """Executor running conv/fire paths on uint8 activations and int8 weights."""

    def __init__(self, qmodel):
        super().__init__(train=False, record=False)
        self.qm = qmodel
        self.trace = None  # site -> dequantized activations when set to a dict

    def _emit(self, site, q):
        t = QTensor(q, self.qm.sites[site])
        if self.trace is not None:
            self.trace[site] = dequantize(t.q, t.qp)
        return t

    def input(self, x, site):
        return self._emit(site, quantize(x, self.qm.sites[site]))

    def block(self, blk, x):
        wq, bq, s_w = self.qm.weights[blk.name]
        xi = x.q.astype(np.float64) - x.qp.zero_point
        conv = blk.conv
        if blk.transpose:
            kh, kw = conv.k
            wmat = wq.transpose(2, 0, 1, 3).reshape(conv.cin, kh * kw * conv.cout)
            acc = col2im(xi @ wmat, conv.out_shape(xi.shape), conv.k, conv.stride, conv.pad)
        else:
            cols = im2col(xi, conv.k, conv.stride, conv.pad)
            acc = cols @ wq.reshape(-1, conv.cout)
        acc = acc + bq
        if blk.name == self.qm.head:
            return acc * (x.qp.scale * s_w)
        out = self.qm.sites[blk.name]
        return self._emit(blk.name, _requant(acc, x.qp.scale * s_w / out.scale, out, blk.relu))

    def pool(self, pool, x):
        n, h, w, c = x.q.shape
        k, s, p = pool.k, pool.stride, pool.pad
        wo = conv_out_size(w, k, s, p)
        xp = np.pad(x.q, ((0, 0), (0, 0), (p, p), (0, 0)))
        y = xp[:, :, 0 : s * wo : s, :]
        for j in range(1, k):
            y = np.maximum(y, xp[:, :, j : j + s * wo : s, :])
        return QTensor(y, x.qp)

    def concat(self, xs, site):
        out = self.qm.sites[site]
        parts = []
        for t in xs:
            if t.qp == out:
                parts.append(t.q)
            else:
                acc = t.q.astype(np.float64) - t.qp.zero_point
                parts.append(_requant(acc, t.qp.scale / out.scale, out, False))
        return self._emit(site, np.concatenate(parts, axis=-1))

    def add(self, a, b, site, relu=False):
        out = self.qm.sites[site]
        acc = (a.q.astype(np.float64) - a.qp.zero_point) * (a.qp.scale / out.scale)
        acc += (b.q.astype(np.float64) - b.qp.zero_point) * (b.qp.scale / out.scale)
        return self._emit(site, _requant(acc, 1.0, out, relu))


class QuantizedModel:
    def __init__(self, qckpt):
        if not qckpt.quantized:
            raise ValueError("not a quantized checkpoint")
        self.kind = qckpt.kind
        self.graph = models.FusionNet(qckpt.kind, models.ModelConfig(**qckpt.meta["model_config"]))
        self.head = self.graph.decoder.head.name
        self.sites = {k: QuantParams(float(s), int(z)) for k, (s, z) in qckpt.meta["sites"].items()}
        self.weights = {}
        for blk in conv_blocks(self.graph):
            key = blk.name
            if key + ".w" not in qckpt.tensors:
                raise ValueError(f"missing quantized weights for {key}")
            w = qckpt.tensors[key + ".w"].astype(np.float64)
            b = qckpt.tensors[key + ".b"].astype(np.float64)
            self.weights[key] = (w, b, float(qckpt.qparams[key + ".w"][0]))
            if key != self.head and key not in self.sites:
                raise ValueError(f"site {key} has no quantization parameters")

    def logits(self, inputs, trace=None):
        ex = QuantTape(self)
        ex.trace = trace
        return self.graph.forward_with(ex, inputs)

    def predict(self, samples, batch=8):
        preds = []
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            logits = self.logits(models.model_inputs(self.kind, chunk))
            p = np.argmax(logits, axis=-1).astype(np.uint8)
            preds.append(np.where(models.masks(chunk), p, 0).astype(np.uint8))
        return np.concatenate(preds)


def infer_quantized(qckpt, sample, runs=10):
    """Predicted class map plus (median ms, std ms) over ``runs`` timed forwards."""
    qm = qckpt if isinstance(qckpt, QuantizedModel) else QuantizedModel(qckpt)
    if isinstance(sample, models.PgmFrame):
        sample = models.Sample(sample)
    times, pred = [], None
    for _ in range(max(1, runs)):
        t0 = time.perf_counter()
        pred = qm.predict([sample])[0]
        times.append((time.perf_counter() - t0) * 1e3)
    return pred, (float(np.median(times)), float(np.std(times)))


def evaluate_quantized(qm, samples):
    from .evaluate import ConfusionMatrix, miou

    cm = ConfusionMatrix()
    for s, p in zip(samples, qm.predict(samples)):
        cm.accumulate(s.frame.labels, p, s.frame.mask)
    return miou(cm)[0], cm


class _RecordTape(Tape):
    def __init__(self):
        super().__init__(train=False, record=False)
        self.trace = {}

    def input(self, x, site):
        self.trace[site] = x
        return x

    def block(self, blk, x):
        y = blk.forward(x, False)
        self.trace[blk.name] = y
        return y

    def concat(self, xs, site):
        y = nn_core.concat_fwd(xs)
        self.trace[site] = y
        return y

    def add(self, a, b, site, relu=False):
        y = super().add(a, b, site, relu)
        self.trace[site] = y
        return y


def layer_errors(model, qm, samples):
    """Relative RMS error of dequantized activations against float, per site."""
    model = _as_model(model)
    inputs = models.model_inputs(model.kind, samples)
    ref = _RecordTape()
    model.forward_with(ref, inputs)
    qtrace = {}
    qm.logits(inputs, qtrace)
    out = {}
    for site, q in qtrace.items():
        f = ref.trace[site].astype(np.float64)
        denom = np.sqrt(np.mean(f * f)) or 1.0
        out[site] = float(np.sqrt(np.mean((q - f) ** 2)) / denom)
    return out
