"""``pgmfuse`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import evaluate, geometry, kitti_io, labels, models, quantize, synthetic
from .config import ConfigError
from .models import Sample

log = logging.getLogger("pgmfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CLI_KINDS = ("lidar", "early", "mid", "late", "image")
_DEF = config_mod.Config()


class UsageError(Exception):
    pass


class DataError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- data plumbing

class Pipeline:
    """Reads raw frames and turns them into model samples for one config."""

    def __init__(self, cfg, threads=1):
        if cfg.root is None:
            raise UsageError("a dataset root is required (--root or 'root' in the config)")
        self.cfg, self.root, self.threads = cfg, Path(cfg.root), max(1, threads)
        self.fov = cfg.fov()
        self.spec = labels.ClassSpec.default(cfg.kitti_map, cfg.cityscapes_map)
        self.lut, _ = self.spec.lookup("semantickitti")
        self._calib = {}

    def map(self, fn, items):
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))

    def frames(self, seqs):
        out = []
        for seq in seqs:
            ids = kitti_io.scan_ids(self.root, seq)
            if not ids:
                raise DataError(f"no scans for sequence {seq} under {self.root}")
            if self.cfg.frames:
                ids = ids[: self.cfg.frames]
            out += [(seq, sid) for sid in ids]
        return out

    def calib(self, seq):
        if seq not in self._calib:
            cal = kitti_io.read_calib(kitti_io.calib_path(self.root, seq), self.cfg.proj_key, self.cfg.tr_key)
            self._calib[seq] = cal.validate()
        return self._calib[seq]

    def cloud(self, seq, sid):
        lp = kitti_io.label_path(self.root, seq, sid)
        return kitti_io.load_scan(kitti_io.scan_path(self.root, seq, sid), lp if lp.exists() else None)

    def project(self, seq, sid):
        cloud = self.cloud(seq, sid)
        return cloud, geometry.spherical_project(cloud, self.fov, self.cfg.grid_h, self.cfg.grid_w, self.lut)

    def image(self, seq, sid):
        return kitti_io.read_image(kitti_io.image_path(self.root, seq, sid))

    def image_label_path(self, base, seq, sid):
        base = Path(base)
        for cand in (base / "sequences" / seq / "image_labels" / f"{sid}.png",
                     base / seq / f"{sid}.png", base / f"{sid}.png"):
            if cand.exists():
                return cand
        raise DataError(f"no image label map for scan {seq}/{sid} under {base}")

    def base_sample(self, kind, seq, sid, image_labels=None):
        """(cloud, frame5, sample) with everything except model-produced channels."""
        cloud, f5 = self.project(seq, sid)
        if kind == "lidar":
            return cloud, f5, Sample(f5), None
        img, cal = self.image(seq, sid), self.calib(seq)
        f8 = geometry.colorize(f5, img, cal)
        grid = geometry.image_to_grid(f5, img, cal, self.fov) if kind in ("mid", "image", "late") else None
        l1 = None
        if kind == "late" and image_labels is not None:
            raw = kitti_io.read_label_image(self.image_label_path(image_labels, seq, sid))
            l1 = geometry.sample_cells(f5, labels.remap(raw, "cityscapes", self.spec), cal)
        return cloud, f5, Sample(f8, grid), l1

    def samples(self, kind, items, late=None):
        """Build samples for ``items``; frame work is parallel, model inference sequential."""
        late = late or {}
        rows = self.map(lambda it: self.base_sample(kind, *it, image_labels=late.get("image_labels")), items)
        samples = [r[2] for r in rows]
        if kind == "late":
            point_model = late.get("point_model")
            if point_model is None:
                raise UsageError("late fusion needs --point-ckpt (the l2 point model)")
            l2 = models.predict(point_model, [models.point_model_sample(r[1], r[2].frame, point_model.kind)
                                              for r in rows])
            if late.get("image_labels") is not None:
                l1 = [r[3] for r in rows]
            elif late.get("image_model") is not None:
                l1 = models.predict(late["image_model"], samples)
            else:
                raise UsageError("late fusion needs --image-labels or --image-ckpt (the l1 source)")
            samples = [Sample(geometry.attach_label_channels(s.frame, a, b), s.image)
                       for s, a, b in zip(samples, l1, l2)]
        return [(r[0], s) for r, s in zip(rows, samples)]


def _load_float(path, what="checkpoint"):
    if path is None:
        return None
    ckpt = models.read_checkpoint(path)
    if ckpt.quantized:
        raise DataError(f"{what} {path} is quantized; a float checkpoint is needed here")
    return models.from_checkpoint(ckpt)


def _late_inputs(args):
    return {"point_model": _load_float(getattr(args, "point_ckpt", None), "point model"),
            "image_model": _load_float(getattr(args, "image_ckpt", None), "image model"),
            "image_labels": getattr(args, "image_labels", None)}


def _selected(args, cfg, default_split):
    if getattr(args, "seq", None):
        return config_mod._seqs(args.seq)
    return cfg.sequences(getattr(args, "split", None) or default_split)


def _out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return path


# ---------------------------------------------------------------- commands

def cmd_project(args, cfg):
    pipe = Pipeline(cfg, args.threads)
    items = pipe.frames(_selected(args, cfg, "train"))
    out = _out(cfg)

    def one(it):
        seq, sid = it
        _, frame = pipe.project(seq, sid)
        kitti_io.write_pgm(frame, kitti_io.sequence_dir(out, seq) / "pgm" / f"{sid}.pgm")
        return int(frame.mask.sum())

    filled = pipe.map(one, items)
    cells = cfg.grid_h * cfg.grid_w
    print(f"projected {len(items)} frames; mean fill {np.mean(filled) / cells:.3f}")
    return EXIT_OK


def cmd_colorize(args, cfg):
    kind = args.kind or "early"
    if kind not in ("early", "mid", "late"):
        raise UsageError("colorize --kind must be early, mid or late")
    pipe = Pipeline(cfg, args.threads)
    items = pipe.frames(_selected(args, cfg, "train"))
    out = _out(cfg)
    late = _late_inputs(args) if kind == "late" else None
    built = pipe.samples(kind, items, late)
    colored = masked = 0
    sub = {"early": "pgm8", "mid": "pgm8", "late": "pgm10"}[kind]
    for (seq, sid), (_, s) in zip(items, built):
        sdir = kitti_io.sequence_dir(out, seq)
        kitti_io.write_pgm(s.frame, sdir / sub / f"{sid}.pgm")
        if kind == "mid":
            (sdir / "image_grid").mkdir(parents=True, exist_ok=True)
            np.save(sdir / "image_grid" / f"{sid}.npy", s.image, allow_pickle=False)
        colored += s.frame.stats.get("colored", 0)
        masked += int(s.frame.mask.sum())
    print(f"colorized {len(items)} frames ({kind}); colored cells {colored / max(masked, 1):.3f}")
    return EXIT_OK


def cmd_stats(args, cfg):
    pipe = Pipeline(cfg, args.threads)
    items = pipe.frames(_selected(args, cfg, "train"))
    files = [kitti_io.label_path(pipe.root, seq, sid) for seq, sid in items]
    missing = [f for f in files if not f.exists()]
    if missing:
        raise DataError(f"missing label file {missing[0]}")
    counts = labels.count_labels(files, pipe.spec, args.threads)
    if counts.sum() == 0:
        raise DataError("no labeled points in the selection")
    freqs = counts / counts.sum()
    weights = labels.loss_weights(freqs, cfg.eps)
    out = _out(cfg)
    labels.write_fixture(out / "frequencies.txt", freqs)
    labels.write_fixture(out / "weights.txt", weights)
    for name, f, w in zip(labels.CLASSES, freqs, weights):
        print(f"{name:15s} {f:.6f} {w:.4f}")
    return EXIT_OK


def _weights(args, cfg, pipe, items):
    if getattr(args, "weights", None):
        return labels.read_fixture(args.weights)
    files = [kitti_io.label_path(pipe.root, seq, sid) for seq, sid in items]
    counts = labels.count_labels(files, pipe.spec, args.threads)
    return labels.loss_weights(counts / max(counts.sum(), 1), cfg.eps)


def cmd_train(args, cfg):
    kind = args.kind
    if kind is None:
        raise UsageError("train needs --kind")
    pipe = Pipeline(cfg, args.threads)
    train_items = pipe.frames(_selected(args, cfg, "train"))
    val_seqs = config_mod._seqs(args.val_seq) if args.val_seq else cfg.sequences(args.val_split)
    val_items = pipe.frames(val_seqs)
    late = _late_inputs(args) if kind == "late" else None
    weights = _weights(args, cfg, pipe, train_items)
    train_s = [s for _, s in pipe.samples(kind, train_items, late)]
    val_s = train_s if val_items == train_items else [s for _, s in pipe.samples(kind, val_items, late)]
    out = _out(cfg)
    log_path = out / f"{kind}.log"
    with open(log_path, "w") as fh:
        def emit(line):
            fh.write(line + "\n")
            fh.flush()
            print(line, flush=True)

        ckpt, _ = models.train(kind, train_s, val_s, weights, cfg.train_config(kind), cfg.model_config(), emit)
    path = out / f"{kind}.ckpt"
    models.write_checkpoint(ckpt, path)
    print(f"best epoch {ckpt.meta['epoch']} val mIoU {ckpt.meta['val_miou']:.4f} -> {path}")
    return EXIT_OK


class _Runner:
    """Float or quantized checkpoint behind one predict() call."""

    def __init__(self, path):
        ckpt = models.read_checkpoint(path)
        self.ckpt = ckpt
        self.kind = ckpt.kind
        self.quantized = ckpt.quantized
        self.model = quantize.QuantizedModel(ckpt) if ckpt.quantized else models.from_checkpoint(ckpt)
        cfg = ckpt.meta["model_config"]
        self.grid = (cfg["h"], cfg["w"])

    def predict(self, samples):
        if self.quantized:
            return self.model.predict(samples)
        return models.predict(self.model, samples)


def _runner(args, cfg):
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    r = _Runner(args.ckpt)
    if r.grid != (cfg.grid_h, cfg.grid_w):
        cfg.grid_h, cfg.grid_w = r.grid
    if getattr(args, "kind", None) and args.kind != r.kind:
        raise UsageError(f"--kind {args.kind} does not match the checkpoint kind {r.kind}")
    return r


def cmd_infer(args, cfg):
    runner = _runner(args, cfg)
    pipe = Pipeline(cfg, args.threads)
    items = pipe.frames(_selected(args, cfg, "test"))
    late = _late_inputs(args) if runner.kind == "late" else None
    out = _out(cfg)
    for i in range(0, len(items), 8):
        chunk = items[i : i + 8]
        built = pipe.samples(runner.kind, chunk, late)
        preds = runner.predict([s for _, s in built])
        for (seq, sid), (cloud, s), p in zip(chunk, built, preds):
            per_point = geometry.point_predictions(s.frame, p, cloud.n_raw)
            kitti_io.write_labels(kitti_io.sequence_dir(out, seq) / "predictions" / f"{sid}.label", per_point)
    print(f"wrote predictions for {len(items)} frames")
    return EXIT_OK


def _report(cfg, cm, name, extra=""):
    out = _out(cfg)
    text = evaluate.report(cm, name)
    _write_text(out / "eval.txt", f"# seed {cfg.seed}\n{extra}" + text)
    _write_text(out / "eval.tsv", evaluate.report_tsv(cm))
    m, _, oa = evaluate.miou(cm)
    print(text, end="")
    print(f"mIoU {m:.4f} OA {oa:.4f}")


def _fov_truth(pipe, cloud):
    keep = geometry.fov_mask(cloud.points, pipe.fov)
    truth = np.zeros(cloud.n_raw, np.int64)
    truth[cloud.index[keep]] = pipe.lut[cloud.labels[keep]]
    return truth


def cmd_eval(args, cfg):
    if bool(args.ckpt) == bool(args.pred):
        raise UsageError("eval needs exactly one of --ckpt or --pred")
    cm = evaluate.ConfusionMatrix()
    if args.pred:
        pipe = Pipeline(cfg, args.threads)
        items = pipe.frames(_selected(args, cfg, "test"))
        for seq, sid in items:
            cloud = pipe.cloud(seq, sid)
            if cloud.labels is None:
                raise DataError(f"no ground-truth labels for {seq}/{sid}")
            pred_path = Path(args.pred) / "sequences" / seq / "predictions" / f"{sid}.label"
            if not pred_path.exists():
                pred_path = Path(args.pred) / seq / f"{sid}.label"
            pred, _ = kitti_io.read_labels(pred_path, expected=cloud.n_raw)
            cm.accumulate(_fov_truth(pipe, cloud), pred.astype(np.int64))
        _report(cfg, cm, "predictions", "# points inside the field of view\n")
        return EXIT_OK
    runner = _runner(args, cfg)
    pipe = Pipeline(cfg, args.threads)
    items = pipe.frames(_selected(args, cfg, "test"))
    late = _late_inputs(args) if runner.kind == "late" else None
    for i in range(0, len(items), 8):
        built = pipe.samples(runner.kind, items[i : i + 8], late)
        preds = runner.predict([s for _, s in built])
        for (cloud, s), p in zip(built, preds):
            if args.points:
                cm.accumulate(_fov_truth(pipe, cloud), geometry.point_predictions(s.frame, p, cloud.n_raw))
            else:
                cm.accumulate(s.frame.labels, p, s.frame.mask)
    domain = "points inside the field of view" if args.points else "grid cells"
    _report(cfg, cm, runner.kind + ("-int8" if runner.quantized else ""), f"# scored on {domain}\n")
    return EXIT_OK


def cmd_quantize(args, cfg):
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    fck = models.read_checkpoint(args.ckpt)
    if fck.quantized:
        raise DataError(f"{args.ckpt} is already quantized")
    model = models.from_checkpoint(fck)
    cfg.grid_h, cfg.grid_w = model.cfg.h, model.cfg.w
    pipe = Pipeline(cfg, args.threads)
    items = pipe.frames(_selected(args, cfg, "train"))
    late = _late_inputs(args) if model.kind == "late" else None
    samples = [s for _, s in pipe.samples(model.kind, items, late)]
    state = quantize.calibrate(model, samples)
    qck = quantize.quantize_checkpoint(model, state)
    out = _out(cfg)
    qpath = out / f"{model.kind}.q.ckpt"
    models.write_checkpoint(qck, qpath)
    size = quantize.size_report(fck, qck)
    qm = quantize.QuantizedModel(qck)
    fm, _ = models.evaluate_model(model, samples)
    qmiou, _ = quantize.evaluate_quantized(qm, samples)
    agree = float(np.mean([np.mean(a[s.frame.mask] == b[s.frame.mask]) for a, b, s in
                           zip(models.predict(model, samples), qm.predict(samples), samples)]))
    errs = quantize.layer_errors(model, qm, samples[:1])
    lines = [
        f"# seed {cfg.seed}",
        f"kind\t{model.kind}",
        f"float_payload_bytes\t{size['float_bytes']}",
        f"int8_payload_bytes\t{size['int8_bytes']}",
        f"size_ratio\t{size['ratio']:.4f}",
        f"float_mb\t{size['float_file'] / 1e6:.3f}",
        f"int8_mb\t{size['int8_file'] / 1e6:.3f}",
        f"calibration_frames\t{len(samples)}",
        f"float_miou\t{fm:.6f}",
        f"int8_miou\t{qmiou:.6f}",
        f"argmax_agreement\t{agree:.6f}",
        "# per-site relative RMS error of int8 activations, worst first",
    ]
    lines += [f"layer_error\t{site}\t{e:.6f}" for site, e in sorted(errs.items(), key=lambda kv: (-kv[1], kv[0]))]
    _write_text(out / f"{model.kind}.quant.txt", "\n".join(lines) + "\n")
    print("\n".join(lines[1:11]))
    print(f"-> {qpath}")
    return EXIT_OK


def _bench_sample(cfg, seed, kind):
    rng = np.random.default_rng(seed)
    scene = synthetic.random_scene(rng)
    pts, lab, _ = synthetic.lidar_scan(scene, rng, azimuth_step=0.16)
    cloud = kitti_io.PointCloud(pts, lab)
    lut, _ = labels.default_spec().lookup("semantickitti")
    f5 = geometry.spherical_project(cloud, cfg.fov(), cfg.grid_h, cfg.grid_w, lut)
    if kind == "lidar":
        return Sample(f5)
    cal = synthetic.kitti_like_calib(0.5)
    img, _ = synthetic.render_camera(scene, cal, rng)
    f8 = geometry.colorize(f5, img, cal)
    if kind == "late":
        f8 = geometry.attach_label_channels(f8, f5.labels, f5.labels)
    return Sample(f8, geometry.image_to_grid(f5, img, cal, cfg.fov()))


def _time(fn, runs):
    fn()  # warm-up
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times), statistics.pstdev(times)


def cmd_bench(args, cfg):
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    rows = []
    if args.ckpt:
        runner = _runner(args, cfg)
        sample = _bench_sample(cfg, cfg.seed, runner.kind)
        inputs = models.model_inputs(runner.kind, [sample])
        if runner.quantized:
            fn = lambda: runner.model.logits(inputs)  # noqa: E731
            params = sum(t.size for t in runner.ckpt.tensors.values())
        else:
            fn = lambda: runner.model.forward(inputs)  # noqa: E731
            params = runner.model.param_count()
        rows.append((runner.kind + ("-int8" if runner.quantized else ""), params, *_time(fn, args.runs)))
    else:
        for kind in args.kinds:
            model = models.build(kind, cfg.model_config(), cfg.seed)
            sample = _bench_sample(cfg, cfg.seed, kind)
            inputs = models.model_inputs(kind, [sample])
            rows.append((kind, model.param_count(), *_time(lambda: model.forward(inputs), args.runs)))
            if args.quantized:
                qm = quantize.QuantizedModel(quantize.quantize_checkpoint(model, quantize.calibrate(model, [sample])))
                rows.append((kind + "-int8", model.param_count(), *_time(lambda: qm.logits(inputs), args.runs)))
    lines = [f"# seed {cfg.seed} grid {cfg.grid_h}x{cfg.grid_w} runs {args.runs} batch 1",
             f"{'model':12s} {'params':>10s}  time (ms)"]
    lines += [f"{name:12s} {p:10d}  {med:.0f} ± {sd:.0f}" for name, p, med, sd in rows]
    _write_text(_out(cfg) / "bench.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_inspect(args, cfg):
    for path in args.files:
        raw = Path(path).read_bytes()
        if raw[:4] == kitti_io.PGM_MAGIC:
            f = kitti_io.parse_pgm(raw, path)
            print(f"{path}: PGM {f.h}x{f.w}x{f.c}, {int(f.mask.sum())} masked cells")
        elif raw[:4] == models.CKPT_MAGIC:
            ck = models.parse_checkpoint(raw, path)
            tag = "int8 " if ck.quantized else ""
            print(f"{path}: {tag}{ck.kind} checkpoint, {len(ck.tensors)} tensors, "
                  f"{models.payload_bytes(ck)} payload bytes")
        else:
            raise kitti_io.FormatError(f"{path}: unknown file magic {raw[:4]!r}")
    return EXIT_OK


def cmd_synth(args, cfg):
    synthetic.write_dataset(cfg.out, config_mod._seqs(args.seq or ["07"]), args.scans, cfg.seed,
                            args.image_scale, args.azimuth_step)
    print(f"wrote {args.scans} synthetic scans per sequence under {cfg.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--root", help="dataset root holding sequences/NN/ (config: root)")
    p.add_argument("--out", help=f"output directory (config: out, default {_DEF.out})")
    p.add_argument("--seed", type=int, help=f"random seed (config: seed, default {_DEF.seed})")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads over frames")
    p.add_argument("--frames", type=int, help="use at most this many scans per sequence (config: frames, 0 = all)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _select(p, default_split):
    p.add_argument("--seq", nargs="+", help="sequence ids (overrides --split)")
    p.add_argument("--split", choices=("train", "val", "test"), default=default_split, help="dataset split")


def _late(p):
    p.add_argument("--point-ckpt", help="late fusion: point model producing the l2 channel")
    p.add_argument("--image-labels", metavar="DIR", help="late fusion: externally produced image label maps (l1)")
    p.add_argument("--image-ckpt", help="late fusion: image model producing l1 when no label maps are given")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = Parser(prog="pgmfuse", description="LiDAR-camera fusion on polar grid maps.", formatter_class=fmt)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=Parser)

    def cmd(name, help_, fn, split=None):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        _common(p)
        if split:
            _select(p, split)
        p.set_defaults(func=fn)
        return p

    cmd("project", "project scans to 5-channel PGM files", cmd_project, "train")
    p = cmd("colorize", "write colorized (8-channel) or late-fusion (10-channel) PGM files", cmd_colorize, "train")
    p.add_argument("--kind", choices=("early", "mid", "late"), help="early/mid: 8 channels; late: 10 (default early)")
    _late(p)
    cmd("stats", "class frequencies and loss weights over a split", cmd_stats, "train")

    p = cmd("train", "train a model and write its best checkpoint and metric log", cmd_train, "train")
    p.add_argument("--kind", choices=CLI_KINDS, help="model kind")
    p.add_argument("--val-seq", nargs="+", help="validation sequences (overrides --val-split)")
    p.add_argument("--val-split", choices=("train", "val", "test"), default="val", help="validation split")
    p.add_argument("--epochs", type=int, help=f"epochs (config: epochs, default {_DEF.epochs})")
    p.add_argument("--batch", type=int, help="minibatch size (config: batch, default 64, mid 32)")
    p.add_argument("--lr", type=float, help=f"learning rate (config: lr, default {_DEF.lr})")
    p.add_argument("--stop-at", type=float, help="stop once validation mIoU reaches this value (config: stop_at)")
    p.add_argument("--weights", help="loss weight fixture (name value lines); computed from the split if absent")
    _late(p)

    for name, help_, fn, split in (("infer", "write per-point prediction label files", cmd_infer, "test"),
                                   ("eval", "score a checkpoint or prediction files", cmd_eval, "test")):
        p = cmd(name, help_, fn, split)
        p.add_argument("--ckpt", help="float or quantized checkpoint")
        p.add_argument("--kind", choices=CLI_KINDS, help="expected model kind (checked against the checkpoint)")
        _late(p)
        if name == "eval":
            p.add_argument("--pred", metavar="DIR", help="score prediction label files instead of a checkpoint")
            p.add_argument("--points", action="store_true", help="score per point inside the field of view")

    p = cmd("quantize", "INT8 post-training quantization of a float checkpoint", cmd_quantize, "train")
    p.add_argument("--ckpt", help="float checkpoint")
    p.add_argument("--kind", choices=CLI_KINDS, help="unused; the kind comes from the checkpoint")
    _late(p)

    p = cmd("bench", "forward-pass latency per model kind", cmd_bench)
    p.add_argument("--kind", dest="kinds", nargs="+", choices=CLI_KINDS, default=["lidar", "early", "mid", "late"],
                   help="model kinds to time")
    p.add_argument("--ckpt", help="time this checkpoint instead of freshly built models")
    p.add_argument("--runs", type=int, default=20, help="timed runs (median and spread reported)")
    p.add_argument("--quantized", action="store_true", help="also time int8 versions")

    p = cmd("inspect", "verify and summarize PGM or checkpoint files", cmd_inspect)
    p.add_argument("files", nargs="+", help="files to check")

    p = cmd("synth", "write a synthetic dataset (to --out)", cmd_synth)
    p.add_argument("--seq", nargs="+", help="sequence ids (default 07)")
    p.add_argument("--scans", type=int, default=3, help="scans per sequence")
    p.add_argument("--image-scale", type=float, default=1.0, help="camera resolution scale")
    p.add_argument("--azimuth-step", type=float, default=0.4, help="lidar azimuth step in degrees")
    return ap


def _config(args):
    overrides = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = val.strip()
    for key in ("root", "out", "seed", "frames", "epochs", "batch", "lr", "stop_at"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return config_mod.load(args.config, overrides).validate()


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        cfg = _config(args)
        # one BLAS thread keeps every reduction order fixed; --threads fans out over frames
        with threadpool_limits(1):
            return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"pgmfuse: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"pgmfuse: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"pgmfuse: data error: {msg}", file=sys.stderr)
        return EXIT_DATA


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
