"""Deterministic NHWC tensor engine.

Tensors are plain ``numpy`` arrays of shape ``(n, h, w, c)``.  Layers keep the
activations they need for ``backward`` from their most recent ``forward`` call,
so every layer instance must be applied at most once per forward pass.  Graphs
with skips and concatenations are differentiated with :class:`Tape`.
"""

from __future__ import annotations

import math
import os

import numpy as np

DEBUG = os.environ.get("PGMFUSE_DEBUG", "") not in ("", "0")


class ContractError(ValueError):
    """Raised when tensor shapes or hyperparameters violate a layer contract."""


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    return tuple(int(i) for i in v)


def _check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values after {name}")


# ---------------------------------------------------------------- im2col

def conv_out_size(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def im2col(x, k, stride, pad):
    """Gather (kh, kw, c)-ordered patches: (n, h, w, c) -> (n, ho, wo, kh*kw*c)."""
    kh, kw = k
    sh, sw = stride
    ph, pw = pad
    n, h, w, c = x.shape
    ho = conv_out_size(h, kh, sh, ph)
    wo = conv_out_size(w, kw, sw, pw)
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    if kh == 1 and kw == 1:
        return np.ascontiguousarray(x[:, : sh * ho : sh, : sw * wo : sw, :])
    slices = [x[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :]
              for i in range(kh) for j in range(kw)]
    return np.concatenate(slices, axis=-1)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back onto a (n, h, w, c) grid."""
    kh, kw = k
    sh, sw = stride
    ph, pw = pad
    n, h, w, c = shape
    ho, wo = cols.shape[1], cols.shape[2]
    if kh == 1 and kw == 1 and ph == 0 and pw == 0 and sh == 1 and sw == 1:
        return cols.reshape(n, h, w, c)
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=cols.dtype)
    idx = 0
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += cols[..., idx * c : (idx + 1) * c]
            idx += 1
    return out[:, ph : ph + h, pw : pw + w, :]


# ---------------------------------------------------------------- modules

class Module:
    """Base class: ``params``/``grads`` dicts, non-trainable ``buffers``, ordered children."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.name = ""

    def children(self):
        return []

    def named_tensors(self, prefix="", buffers=True):
        """Yield (dotted name, array) for parameters (and buffers) in build order."""
        for key, arr in self.params.items():
            yield prefix + key, arr
        if buffers:
            for key, arr in self.buffers.items():
                yield prefix + key, arr
        for cname, child in self.children():
            yield from child.named_tensors(prefix + cname + ".", buffers)

    def named_grads(self, prefix=""):
        for key in self.params:
            yield prefix + key, self.grads.get(key)
        for cname, child in self.children():
            yield from child.named_grads(prefix + cname + ".")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def param_count(self):
        return sum(arr.size for _, arr in self.named_tensors(buffers=False))

    def astype(self, dtype):
        for m in self.modules():
            for d in (m.params, m.buffers):
                for key in d:
                    d[key] = d[key].astype(dtype)
        return self

    def zero_grad(self):
        for m in self.modules():
            m.grads = {}

    def assign_names(self, prefix=""):
        self.name = prefix
        for cname, child in self.children():
            child.assign_names(f"{prefix}.{cname}" if prefix else cname)


class Conv2d(Module):
    """2-D convolution; weight layout (kh, kw, cin, cout)."""

    def __init__(self, cin, cout, k=3, stride=1, pad=0):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.k, self.stride, self.pad = _pair(k), _pair(stride), _pair(pad)
        if min(self.stride) < 1:
            raise ContractError("strides must be >= 1")
        self.params["w"] = np.zeros(self.k + (cin, cout), np.float32)
        self.params["b"] = np.zeros(cout, np.float32)

    @property
    def fan_in(self):
        return self.k[0] * self.k[1] * self.cin

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[-1] != self.cin:
            raise ContractError(f"{self.name or 'conv'}: expected (n,h,w,{self.cin}) input, got {x.shape}")
        cols = im2col(x, self.k, self.stride, self.pad)
        self._x_shape = x.shape
        self._cols = cols
        w = self.params["w"].reshape(-1, self.cout)
        return cols @ w + self.params["b"]

    def backward(self, dy):
        cols = self._cols
        kdim = cols.shape[-1]
        dy2 = dy.reshape(-1, self.cout)
        self.grads["w"] = (cols.reshape(-1, kdim).T @ dy2).reshape(self.params["w"].shape)
        self.grads["b"] = dy2.sum(axis=0, dtype=np.float64).astype(dy.dtype)
        dcols = dy @ self.params["w"].reshape(-1, self.cout).T
        self._cols = None
        return col2im(dcols, self._x_shape, self.k, self.stride, self.pad)


class Deconv2d(Module):
    """Transposed 2-D convolution; output size (in-1)*stride + k - 2*pad per axis."""

    def __init__(self, cin, cout, k=(1, 4), stride=(1, 2), pad=(0, 1)):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.k, self.stride, self.pad = _pair(k), _pair(stride), _pair(pad)
        if min(self.stride) < 1:
            raise ContractError("strides must be >= 1")
        self.params["w"] = np.zeros(self.k + (cin, cout), np.float32)
        self.params["b"] = np.zeros(cout, np.float32)

    @property
    def fan_in(self):
        # each output cell sees about k/stride input taps per axis
        return max(1, self.k[0] * self.k[1] * self.cin // (self.stride[0] * self.stride[1]))

    def out_shape(self, shape):
        n, h, w, _ = shape
        ho = (h - 1) * self.stride[0] + self.k[0] - 2 * self.pad[0]
        wo = (w - 1) * self.stride[1] + self.k[1] - 2 * self.pad[1]
        return (n, ho, wo, self.cout)

    def _wmat(self):
        kh, kw = self.k
        return self.params["w"].transpose(2, 0, 1, 3).reshape(self.cin, kh * kw * self.cout)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[-1] != self.cin:
            raise ContractError(f"{self.name or 'deconv'}: expected (n,h,w,{self.cin}) input, got {x.shape}")
        self._x = x
        cols = x @ self._wmat()
        y = col2im(cols, self.out_shape(x.shape), self.k, self.stride, self.pad)
        return y + self.params["b"]

    def backward(self, dy):
        x = self._x
        cols = im2col(dy, self.k, self.stride, self.pad)
        kdim = cols.shape[-1]
        gw = x.reshape(-1, self.cin).T @ cols.reshape(-1, kdim)
        kh, kw = self.k
        self.grads["w"] = gw.reshape(self.cin, kh, kw, self.cout).transpose(1, 2, 0, 3).copy()
        self.grads["b"] = dy.reshape(-1, self.cout).sum(axis=0, dtype=np.float64).astype(dy.dtype)
        self._x = None
        return cols @ self._wmat().T


class MaxPoolW(Module):
    """Max pooling along width only; rows pass through untouched."""

    def __init__(self, k=3, stride=2, pad=1):
        super().__init__()
        self.k, self.stride, self.pad = k, stride, pad
        if stride < 1:
            raise ContractError("strides must be >= 1")

    def forward(self, x, train=False):
        n, h, w, c = x.shape
        wo = conv_out_size(w, self.k, self.stride, self.pad)
        if wo < 1:
            raise ContractError(f"{self.name or 'maxpool_w'}: width {w} too small")
        xp = x
        if self.pad:
            xp = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (0, 0)), constant_values=-np.inf)
        s = self.stride
        win = np.stack([xp[:, :, j : j + s * wo : s, :] for j in range(self.k)])
        arg = win.argmax(axis=0)
        self._arg, self._shape = arg, x.shape
        return np.take_along_axis(win, arg[None], axis=0)[0]

    def backward(self, dy):
        n, h, w, c = self._shape
        s, wo = self.stride, dy.shape[2]
        dx = np.zeros((n, h, w + 2 * self.pad, c), dtype=dy.dtype)
        for j in range(self.k):
            dx[:, :, j : j + s * wo : s, :] += np.where(self._arg == j, dy, 0)
        return dx[:, :, self.pad : self.pad + w, :]


class BatchNorm(Module):
    """Per-channel batch normalization; statistics reduced in float64."""

    def __init__(self, c, momentum=0.99, eps=1e-5):
        super().__init__()
        self.c, self.momentum, self.eps = c, momentum, eps
        self.params["gamma"] = np.ones(c, np.float32)
        self.params["beta"] = np.zeros(c, np.float32)
        self.buffers["running_mean"] = np.zeros(c, np.float32)
        self.buffers["running_var"] = np.ones(c, np.float32)

    def forward(self, x, train=False):
        if x.shape[-1] != self.c:
            raise ContractError(f"{self.name or 'batchnorm'}: expected {self.c} channels, got {x.shape}")
        dt = x.dtype
        self._train = train
        x2 = x.reshape(-1, self.c)
        if train:
            m = x2.shape[0]
            mean = x2.sum(axis=0, dtype=np.float64) / m
            d = x2 - mean.astype(dt)
            var = np.einsum("ij,ij->j", d, d, dtype=np.float64) / m
            mom = self.momentum
            unbiased = var * m / max(m - 1, 1)
            self.buffers["running_mean"] = (mom * self.buffers["running_mean"] + (1 - mom) * mean).astype(dt)
            self.buffers["running_var"] = (mom * self.buffers["running_var"] + (1 - mom) * unbiased).astype(dt)
        else:
            mean = self.buffers["running_mean"].astype(np.float64)
            var = self.buffers["running_var"].astype(np.float64)
            d = x2 - mean.astype(dt)
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = d * invstd.astype(dt)
        self._xhat, self._invstd = xhat, invstd
        return (xhat * self.params["gamma"] + self.params["beta"]).reshape(x.shape)

    def backward(self, dy):
        dt = dy.dtype
        xhat, invstd = self._xhat, self._invstd
        dy2 = dy.reshape(-1, self.c)
        sum_dy = dy2.sum(axis=0, dtype=np.float64)
        sum_dy_xhat = np.einsum("ij,ij->j", dy2, xhat, dtype=np.float64)
        self.grads["beta"] = sum_dy.astype(dt)
        self.grads["gamma"] = sum_dy_xhat.astype(dt)
        g = self.params["gamma"].astype(np.float64)
        self._xhat = None
        if not self._train:
            return (dy2 * (g * invstd).astype(dt)).reshape(dy.shape)
        m = dy2.shape[0]
        # dx = g*invstd * (dy - mean(dy) - xhat * mean(dy*xhat))
        scale = (g * invstd).astype(dt)
        dx = (dy2 - (sum_dy / m).astype(dt) - xhat * (sum_dy_xhat / m).astype(dt)) * scale
        return dx.reshape(dy.shape)


class ReLU(Module):
    def forward(self, x, train=False):
        y = np.maximum(x, 0)
        self._y = y
        return y

    def backward(self, dy):
        return dy * (self._y > 0)


def concat_fwd(xs):
    return np.concatenate(xs, axis=-1)


def concat_bwd(dy, sizes):
    """Split an upstream gradient back into per-input channel slices."""
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(part) for part in np.split(dy, bounds, axis=-1)]


class ConvBlock(Module):
    """Conv (or transposed conv) -> optional batchnorm -> optional ReLU."""

    def __init__(self, cin, cout, k=3, stride=1, pad=0, bn=True, relu=True, transpose=False):
        super().__init__()
        cls = Deconv2d if transpose else Conv2d
        self.conv = cls(cin, cout, k, stride, pad)
        self.bn = BatchNorm(cout) if bn else None
        self.act = ReLU() if relu else None
        self.relu = relu
        self.transpose = transpose
        self.cin, self.cout = cin, cout

    def children(self):
        out = [("conv", self.conv)]
        if self.bn is not None:
            out.append(("bn", self.bn))
        return out

    def forward(self, x, train=False):
        y = self.conv.forward(x, train)
        if self.bn is not None:
            y = self.bn.forward(y, train)
        if self.act is not None:
            y = self.act.forward(y, train)
        return y

    def backward(self, dy):
        if self.act is not None:
            dy = self.act.backward(dy)
        if self.bn is not None:
            dy = self.bn.backward(dy)
        return self.conv.backward(dy)


# ---------------------------------------------------------------- executors

class Tape:
    """Float executor that records block applications for reverse-mode gradients.

    Composite modules describe their dataflow once through ``block``, ``pool``,
    ``concat`` and ``add``; observers and the quantized engine implement the same
    calls.
    """

    def __init__(self, train=False, record=True):
        self.train = train
        self.record = record
        self.ops = []

    def input(self, x, site):
        return x

    def output(self, x):
        return x

    def _push(self, op):
        if self.record:
            self.ops.append(op)

    def block(self, blk, x):
        y = blk.forward(x, self.train)
        if DEBUG:
            _check_finite(blk.name or type(blk).__name__, y)
        self._push(("mod", blk, (x,), y))
        return y

    def pool(self, pool, x):
        y = pool.forward(x, self.train)
        self._push(("mod", pool, (x,), y))
        return y

    def concat(self, xs, site):
        y = concat_fwd(xs)
        self._push(("cat", [a.shape[-1] for a in xs], tuple(xs), y))
        return y

    def add(self, a, b, site, relu=False):
        s = a + b
        y = np.maximum(s, 0).astype(s.dtype) if relu else s
        self._push(("add", relu, (a, b), y))
        return y

    def backward(self, y, dy):
        """Back-propagate ``dy`` from ``y``; returns {id(tensor): grad} for recorded inputs."""
        grads = {id(y): dy}
        for kind, obj, inputs, out in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            if kind == "mod":
                gins = [obj.backward(g)]
            elif kind == "cat":
                gins = concat_bwd(g, obj)
            else:
                if obj:
                    g = np.where(out > 0, g, 0).astype(g.dtype)
                gins = [g, g]
            for t, gi in zip(inputs, gins):
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        self.ops = []
        return grads


class Fire(Module):
    """Fire module with optional residual connection and optional ×2 width upsampling.

    squeeze 1x1 -> [transposed 1x4 conv, stride (1,2)] -> expand 1x1 || expand 3x3
    -> concat [-> + input] -> ReLU.
    """

    def __init__(self, cin, s1x1, e1x1, e3x3, bn=True, residual=False, upsample=False):
        super().__init__()
        if e1x1 != e3x3:
            raise ContractError("fire modules use symmetric expand widths (e1x1 == e3x3)")
        if residual and cin != e1x1 + e3x3:
            raise ContractError(f"fire_residual needs input channels {cin} == e1x1 + e3x3 = {e1x1 + e3x3}")
        self.cin, self.cout = cin, e1x1 + e3x3
        self.residual, self.upsample = residual, upsample
        self.squeeze = ConvBlock(cin, s1x1, 1, bn=bn)
        self.up = ConvBlock(s1x1, s1x1, (1, 4), (1, 2), (0, 1), bn=bn, transpose=True) if upsample else None
        self.expand1 = ConvBlock(s1x1, e1x1, 1, bn=bn, relu=not residual)
        self.expand3 = ConvBlock(s1x1, e3x3, 3, pad=1, bn=bn, relu=not residual)

    def children(self):
        out = [("squeeze", self.squeeze)]
        if self.up is not None:
            out.append(("up", self.up))
        return out + [("expand1", self.expand1), ("expand3", self.expand3)]

    def run(self, ex, x):
        s = ex.block(self.squeeze, x)
        if self.up is not None:
            s = ex.block(self.up, s)
        a = ex.block(self.expand1, s)
        b = ex.block(self.expand3, s)
        if not self.residual:
            return ex.concat([a, b], self.name)
        e = ex.concat([a, b], self.name + ".cat")
        return ex.add(e, x, self.name, relu=True)

    def forward(self, x, train=False):
        self._tape = Tape(train)
        self._x = x
        return self.run(self._tape, x)

    def backward(self, dy):
        # the output is the last recorded tensor
        out = self._tape.ops[-1][3]
        grads = self._tape.backward(out, dy)
        return grads[id(self._x)]


def fire_fwd(x, fire, train=False):
    return fire.forward(x, train)


# ---------------------------------------------------------------- loss / optimizer

def softmax(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_ce_loss(logits, target, weights):
    """Weighted cross entropy over cells; class 0 (unlabeled) is excluded.

    The loss is the weighted negative log-likelihood summed over labeled cells
    and divided by their count.  Returns ``(loss, dlogits)``.
    """
    ncls = logits.shape[-1]
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (ncls,):
        raise ContractError(f"weight vector has length {weights.size}, expected {ncls}")
    target = np.asarray(target)
    if target.shape != logits.shape[:-1]:
        raise ContractError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= ncls):
        raise ContractError(f"target ids must lie in [0, {ncls})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    valid = target != 0
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    w = weights[target] * valid
    logp_y = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    loss = float(-(w * logp_y)[valid].sum() / count)
    grad = np.exp(logp)
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - 1.0, -1)
    grad *= (w / count)[..., None]
    return loss, grad.astype(logits.dtype)


def sgd_momentum_step(params, grads, state, lr, momentum):
    """Classic momentum: v <- momentum*v + g;  p <- p - lr*v (in place)."""
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        v = state.get(key)
        v = g.astype(p.dtype, copy=True) if v is None else momentum * v + g
        state[key] = v.astype(p.dtype)
        p -= (lr * state[key]).astype(p.dtype)
    return params, state


class SGD:
    """SGD with classic momentum over a module tree."""

    def __init__(self, module, lr=0.01, momentum=0.9):
        self.module, self.lr, self.momentum = module, lr, momentum
        self.state = {}

    def step(self):
        for idx, m in enumerate(self.module.modules()):
            if not m.params:
                continue
            st = self.state.setdefault(idx, {})
            sgd_momentum_step(m.params, m.grads, st, self.lr, self.momentum)


def init_params(module, rng):
    """Kaiming-uniform (fan-in) conv weights, zero biases; batchnorm reset to identity."""
    for m in module.modules():
        if isinstance(m, (Conv2d, Deconv2d)):
            bound = math.sqrt(6.0 / m.fan_in)
            w = rng.uniform(-bound, bound, size=m.params["w"].shape)
            m.params["w"] = w.astype(m.params["w"].dtype)
            m.params["b"] = np.zeros_like(m.params["b"])
        elif isinstance(m, BatchNorm):
            m.params["gamma"] = np.ones_like(m.params["gamma"])
            m.params["beta"] = np.zeros_like(m.params["beta"])
            m.buffers["running_mean"] = np.zeros_like(m.buffers["running_mean"])
            m.buffers["running_var"] = np.ones_like(m.buffers["running_var"])
    return module
