import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgmfuse import evaluate
from pgmfuse.evaluate import ConfusionMatrix


def hand_scores(counts):
    """Scalar loops over TP/FP/FN; classes with an empty denominator are skipped."""
    n = len(counts)
    ious = []
    for c in range(1, n):
        tp = counts[c][c]
        fp = sum(counts[r][c] for r in range(n)) - tp
        fn = sum(counts[c][k] for k in range(n)) - tp
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    total = sum(sum(row) for row in counts)
    oa = sum(counts[c][c] for c in range(n)) / total if total else 0.0
    return (math.fsum(ious) / len(ious) if ious else 0.0), oa


def test_diagonal_increments_only():
    cm = ConfusionMatrix().accumulate([1, 2, 3], [1, 2, 3])
    expected = np.zeros((16, 16), np.int64)
    expected[[1, 2, 3], [1, 2, 3]] = 1
    assert np.array_equal(cm.counts, expected)


def test_unlabeled_excluded():
    cm = ConfusionMatrix().accumulate([0, 0, 0], [4, 5, 6])
    assert cm.total == 0


def test_mask_excluded(rng):
    truth = rng.integers(0, 16, (64, 512))
    pred = rng.integers(0, 16, (64, 512))
    mask = rng.random((64, 512)) < 0.6
    cm = ConfusionMatrix().accumulate(truth, pred, mask)
    assert cm.total == int(((truth != 0) & mask).sum())


def test_id_out_of_range():
    with pytest.raises(ValueError, match="class ids"):
        ConfusionMatrix().accumulate([16], [1])
    with pytest.raises(ValueError, match="entries"):
        ConfusionMatrix().accumulate([1, 2], [1])


def test_perfect():
    cm = ConfusionMatrix(np.diag(np.arange(16)))
    m, per, oa = evaluate.miou(cm)
    assert m == 1.0 and oa == 1.0 and np.all(per == 1.0)


def test_half_iou_example():
    counts = np.zeros((16, 16), np.int64)
    counts[1, 1] = 1  # TP_1
    counts[0, 1] = 1  # FP_1 from a row that no scored class owns
    m, per, _ = evaluate.miou(ConfusionMatrix(counts))
    assert per[0] == 0.5
    assert np.isnan(per[1])  # class 2 empty: left out of the mean
    assert m == 0.5


def test_empty_matrix():
    m, per, oa = evaluate.miou(ConfusionMatrix())
    assert m == 0.0 and oa == 0.0 and np.isnan(per).all()


def test_random_matrices_match_hand_oracle():
    rng = np.random.default_rng(7)
    for trial in range(40):
        n = 16 if trial % 2 else 4
        counts = rng.integers(0, 50, (n, n)) * (rng.random((n, n)) < 0.5)
        counts[0] = 0  # truth row 0 is never accumulated
        m, _, oa = evaluate.miou(ConfusionMatrix(counts))
        hm, hoa = hand_scores(counts.tolist())
        assert abs(m - hm) <= 1e-12 and abs(oa - hoa) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_additivity(seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 16, 400)
    p = rng.integers(0, 16, 400)
    cut = int(rng.integers(0, 401))
    whole = ConfusionMatrix().accumulate(t, p)
    parts = ConfusionMatrix().accumulate(t[:cut], p[:cut]) + ConfusionMatrix().accumulate(t[cut:], p[cut:])
    assert np.array_equal(whole.counts, parts.counts)
    assert evaluate.miou(whole)[0] == evaluate.miou(parts)[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pair_shuffle_and_relabel_invariance(seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 16, 300)
    p = np.where(rng.random(300) < 0.6, t, rng.integers(0, 16, 300))
    base = ConfusionMatrix().accumulate(t, p)
    order = rng.permutation(300)
    assert np.array_equal(ConfusionMatrix().accumulate(t[order], p[order]).counts, base.counts)
    perm = np.concatenate([[0], 1 + rng.permutation(15)])  # relabel scored classes, keep 0 fixed
    relabeled = ConfusionMatrix().accumulate(perm[t], perm[p])
    assert evaluate.miou(relabeled)[0] == pytest.approx(evaluate.miou(base)[0], abs=1e-12)
    m = evaluate.miou(base)[0]
    assert 0.0 <= m <= 1.0


def test_reports():
    counts = np.zeros((16, 16), np.int64)
    counts[1, 1], counts[2, 2], counts[2, 1] = 3, 1, 1
    cm = ConfusionMatrix(counts)
    text = evaluate.report(cm, "lidar")
    head, row = text.splitlines()
    assert head.split()[:4] == ["Approach", "mIoU", "OA", "car"]
    assert row.split()[0] == "lidar"
    tsv = dict(line.split("\t") for line in evaluate.report_tsv(cm).splitlines())
    assert float(tsv["miou"]) == evaluate.miou(cm)[0]
    assert float(tsv["oa"]) == 0.8
    assert tsv["road"] == "nan"
