"""Confusion matrices, per-class IoU, mIoU and overall accuracy."""

from __future__ import annotations

import numpy as np

from .labels import CLASSES, NUM_CLASSES


class ConfusionMatrix:
    """Counts indexed [truth, prediction]; truth class 0 is never counted."""

    def __init__(self, counts=None, n=NUM_CLASSES):
        self.counts = np.zeros((n, n), np.int64) if counts is None else np.array(counts, dtype=np.int64)

    @property
    def n(self):
        return self.counts.shape[0]

    def accumulate(self, truth, pred, mask=None):
        truth = np.asarray(truth).ravel().astype(np.int64)
        pred = np.asarray(pred).ravel().astype(np.int64)
        if truth.shape != pred.shape:
            raise ValueError(f"truth has {truth.size} entries but pred has {pred.size}")
        keep = truth != 0
        if mask is not None:
            mask = np.asarray(mask).ravel().astype(bool)
            if mask.shape != truth.shape:
                raise ValueError("mask shape does not match truth")
            keep &= mask
        t, p = truth[keep], pred[keep]
        if t.size and (max(t.max(), p.max()) >= self.n or min(t.min(), p.min()) < 0):
            raise ValueError(f"class ids must lie in [0, {self.n})")
        self.counts += np.bincount(t * self.n + p, minlength=self.n * self.n).reshape(self.n, self.n)
        return self

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def class_iou(cm):
    """(per-class IoU with NaN for empty classes) over scored classes 1..n-1."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(cm.n, np.nan)
    nz = denom > 0
    iou[nz] = tp[nz] / denom[nz]
    return iou[1:]


def miou(cm):
    """Return (mIoU, per-class IoU, overall accuracy).

    Classes absent from both truth and prediction are left out of the mean and
    reported as NaN.
    """
    per = class_iou(cm)
    present = ~np.isnan(per)
    m = float(per[present].mean()) if present.any() else 0.0
    total = cm.counts.sum()
    oa = float(np.trace(cm.counts) / total) if total else 0.0
    return m, per, oa


def report(cm, name="model"):
    """Plain-text table: approach, mIoU, OA, then one column per scored class."""
    m, per, oa = miou(cm)
    heads = ["Approach", "mIoU", "OA", *CLASSES[1:]]
    vals = [name, f"{m:.3f}", f"{oa:.3f}", *("-" if np.isnan(v) else f"{v:.3f}" for v in per)]
    widths = [max(len(a), len(b)) for a, b in zip(heads, vals)]
    row = lambda cells: "  ".join(c.ljust(wd) for c, wd in zip(cells, widths))  # noqa: E731
    return row(heads).rstrip() + "\n" + row(vals).rstrip() + "\n"


def report_tsv(cm):
    m, per, oa = miou(cm)
    lines = [f"miou\t{m!r}", f"oa\t{oa!r}"]
    lines += [f"{name}\t{'nan' if np.isnan(v) else repr(float(v))}" for name, v in zip(CLASSES[1:], per)]
    return "\n".join(lines) + "\n"
