import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgmfuse import models, quantize
from pgmfuse.geometry import PgmFrame
from pgmfuse.models import ModelConfig, Sample
from pgmfuse.quantize import QuantParams

SMALL = ModelConfig(h=4, w=32, width=0.25)


def frames(rng, kind, n, h=4, w=32):
    nch = {"lidar": 5, "early": 8, "late": 10, "mid": 5}[kind]
    out = []
    for _ in range(n):
        mask = rng.random((h, w)) < 0.8
        data = (rng.normal(10, 5, size=(h, w, nch)) * mask[..., None]).astype(np.float32)
        lab = np.where(mask, rng.integers(1, 16, (h, w)), 0).astype(np.uint32)
        img = rng.random((h, w, 3)).astype(np.float32) if kind == "mid" else None
        out.append(Sample(PgmFrame(data, mask, lab), img))
    return out


def test_weight_endpoints():
    qp = quantize.symmetric_params(-1.0, 1.0)
    assert qp.scale == 1 / 127 and qp.zero_point == 0
    assert quantize.quantize(np.array([1.0, -1.0]), qp).tolist() == [127, -127]


def test_all_zero_tensor(caplog):
    with caplog.at_level(logging.WARNING):
        qp = quantize.symmetric_params(0.0, 0.0)
    assert qp.scale == quantize.SCALE_FLOOR and "degenerate" in caplog.text
    q = quantize.quantize(np.zeros(5), qp)
    assert (q == 0).all() and (quantize.dequantize(q, qp) == 0).all()


def test_params_validated():
    with pytest.raises(ValueError):
        QuantParams(0.0, 0)
    with pytest.raises(ValueError):
        QuantParams(1.0, 300)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 100), st.floats(0, 1))
def test_half_step_round_trip(lo, span, frac):
    hi = lo + span
    for qp in (quantize.affine_params(lo, hi), quantize.symmetric_params(lo, hi)):
        lo_r, hi_r = min(lo, 0.0), max(hi, 0.0)
        if qp.signed:
            lo_r, hi_r = -127 * qp.scale, 127 * qp.scale
        x = lo_r + frac * (hi_r - lo_r)
        if not min(lo, 0.0) <= x <= max(hi, 0.0):
            continue
        back = quantize.dequantize(quantize.quantize(x, qp), qp)
        assert abs(back - x) <= qp.scale / 2 * (1 + 1e-9)


def test_out_of_range_clamps():
    qp = quantize.affine_params(0.0, 1.0)
    assert quantize.quantize(np.array([-5.0, 9.0]), qp).tolist() == [0, 255]


def test_affine_range_contains_zero():
    qp = quantize.affine_params(2.0, 4.0)
    assert qp.zero_point == 0
    assert quantize.dequantize(quantize.quantize(0.0, qp), qp) == 0.0


@pytest.fixture(scope="module")
def small_model():
    return models.build("lidar", SMALL, seed=3)


def test_relu_sites_nonnegative(small_model, rng):
    state = quantize.calibrate(small_model, frames(rng, "lidar", 1))
    relu_sites = [b.name for b in quantize.conv_blocks(small_model) if b.relu]
    assert relu_sites
    for site in relu_sites:
        lo, hi = state.sites[site]
        assert 0 <= lo <= hi


def test_observer_widening(small_model, rng):
    a, b = frames(rng, "lidar", 2)
    sa = quantize.calibrate(small_model, [a])
    sb = quantize.calibrate(small_model, [b])
    both = quantize.calibrate(small_model, [a, b], batch=1)
    merged = sa.merge(sb)
    assert both.sites.keys() == sa.sites.keys()
    for site, (lo, hi) in both.sites.items():
        assert lo == min(sa.sites[site][0], sb.sites[site][0])
        assert hi == max(sa.sites[site][1], sb.sites[site][1])
        assert merged.sites[site] == [lo, hi]
        # adding frames never shrinks a range
        assert lo <= sa.sites[site][0] and hi >= sa.sites[site][1]
    assert both.frames == 2


def test_empty_calibration(small_model):
    with pytest.raises(ValueError, match="empty"):
        quantize.calibrate(small_model, [])


@pytest.mark.parametrize("kind", ["lidar", "early", "mid", "late"])
def test_size_ratio(kind, rng):
    model = models.build(kind, ModelConfig(h=2, w=32), seed=0)
    q = quantize.quantize_checkpoint(model, quantize.calibrate(model, frames(rng, kind, 1, 2, 32)))
    rep = quantize.size_report(models.to_checkpoint(model), q)
    assert rep["ratio"] >= 3.0
    assert rep["float_file"] / rep["int8_file"] >= 3.0


def test_quantized_checkpoint_round_trip(small_model, rng, tmp_path):
    s = frames(rng, "lidar", 3)
    q = quantize.quantize_checkpoint(small_model, quantize.calibrate(small_model, s))
    path = tmp_path / "m.q.ckpt"
    models.write_checkpoint(q, path)
    back = models.read_checkpoint(path)
    assert back.quantized and back.qparams == q.qparams and back.meta == q.meta
    for k, v in q.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
    assert models.checkpoint_bytes(back) == path.read_bytes()
    p1 = quantize.QuantizedModel(q).predict(s)
    p2 = quantize.QuantizedModel(back).predict(s)
    assert p1.tobytes() == p2.tobytes()


def test_quantized_inference_tracks_float(small_model, rng):
    s = frames(rng, "lidar", 4)
    qm = quantize.QuantizedModel(quantize.quantize_checkpoint(small_model, quantize.calibrate(small_model, s)))
    errs = quantize.layer_errors(small_model, qm, s)
    assert errs and max(errs.values()) < 0.2
    agree = (qm.predict(s) == models.predict(small_model, s)).mean()
    assert agree > 0.8


def test_quantized_determinism(small_model, rng):
    s = frames(rng, "lidar", 2)
    q1 = quantize.quantize_checkpoint(small_model, quantize.calibrate(small_model, s))
    q2 = quantize.quantize_checkpoint(small_model, quantize.calibrate(small_model, s))
    assert models.checkpoint_bytes(q1) == models.checkpoint_bytes(q2)
    pred, (median, sd) = quantize.infer_quantized(q1, s[0], runs=3)
    assert pred.shape == (4, 32) and median > 0 and sd >= 0
    assert pred.tobytes() == quantize.infer_quantized(q1, s[0], runs=1)[0].tobytes()


def test_zero_weight_quantized_predicts_zero(rng):
    model = models.build("lidar", SMALL)
    for _, arr in model.named_tensors(buffers=False):
        arr[...] = 0
    s = frames(rng, "lidar", 1)
    s[0].frame.mask[:] = True
    qm = quantize.QuantizedModel(quantize.quantize_checkpoint(model, quantize.calibrate(model, s)))
    assert (qm.predict(s) == 0).all()


def test_missing_site_rejected(small_model, rng):
    q = quantize.quantize_checkpoint(small_model, quantize.calibrate(small_model, frames(rng, "lidar", 1)))
    site = next(k for k in q.meta["sites"] if k.endswith("conv1"))
    del q.meta["sites"][site]
    with pytest.raises(ValueError, match="quantization parameters"):
        quantize.QuantizedModel(q)


def test_observer_must_cover_blocks(small_model, rng):
    state = quantize.calibrate(small_model, frames(rng, "lidar", 1))
    state.block_inputs.pop(next(iter(state.block_inputs)))
    with pytest.raises(ValueError, match="does not cover"):
        quantize.quantize_checkpoint(small_model, state)


def test_float_checkpoint_rejected():
    with pytest.raises(ValueError, match="not a quantized"):
        quantize.QuantizedModel(models.to_checkpoint(models.build("lidar", SMALL)))
