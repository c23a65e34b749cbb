import numpy as np
import pytest

from tgvseg.errors import ShapeError
from tgvseg.metrics import (
    ConfusionCounts,
    compute_metrics,
    confusion,
    fp_per_volume,
)


def naive_metrics(pred, target):
    """Independent per-pixel counting reimplementation (the oracle)."""
    tp = fp = fn = tn = 0
    for p, t in zip(pred.reshape(-1), target.reshape(-1)):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    total = tp + fp + fn + tn
    acc = (tp + tn) / total
    if tp + fp == 0:
        prec = 1.0 if tp + fn == 0 else 0.0
    else:
        prec = tp / (tp + fp)
    if tp + fn == 0:
        rec = 1.0 if tp + fp == 0 else 0.0
    else:
        rec = tp / (tp + fn)
    f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    jac = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    denom = pred.sum() + target.sum()
    dsc = 1.0 if denom == 0 else 2.0 * np.logical_and(pred, target).sum() / denom
    return (tp, fp, fn, tn), (acc, prec, rec, f1, jac, dsc)


class TestConfusion:
    def test_enumerated_example(self):
        pred = np.array([[1, 0], [1, 1]], dtype=float)
        gt = np.array([[1, 1], [0, 1]], dtype=float)
        c = confusion(pred[None, None], gt[None, None])
        assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 0)

    def test_perfect_prediction(self, rng):
        gt = (rng.random((1, 1, 6, 6)) < 0.4).astype(float)
        c = confusion(gt, gt)
        assert c.fp == 0 and c.fn == 0

    def test_complement(self, rng):
        gt = (rng.random((1, 1, 6, 6)) < 0.4).astype(float)
        c = confusion(1.0 - gt, gt)
        assert c.tp == 0 and c.tn == 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confusion(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))

    def test_total_invariant(self, rng):
        pred = rng.random((1, 1, 8, 8))
        gt = (rng.random((1, 1, 8, 8)) < 0.3).astype(float)
        assert confusion(pred, gt).total == 64


class TestComputeMetrics:
    def test_hand_worked_counts(self):
        pred = np.array([[1, 0], [1, 1]], dtype=float)
        gt = np.array([[1, 1], [0, 1]], dtype=float)
        c = confusion(pred[None, None], gt[None, None])
        r = compute_metrics(c, pred, gt)
        assert r.accuracy == pytest.approx(0.5)
        assert r.precision == pytest.approx(2 / 3)
        assert r.recall == pytest.approx(2 / 3)
        assert r.f1 == pytest.approx(2 / 3)
        assert r.jaccard == pytest.approx(0.5)
        assert r.dsc == pytest.approx(2 / 3)

    def test_identical_masks_all_ones(self, rng):
        gt = (rng.random((6, 6)) < 0.5).astype(float)
        gt[0, 0] = 1.0  # ensure non-empty
        c = confusion(gt[None, None], gt[None, None])
        r = compute_metrics(c, gt, gt)
        assert (r.accuracy, r.precision, r.recall, r.f1, r.jaccard, r.dsc) == (
            1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
        )

    def test_vacuous_agreement_convention(self):
        empty = np.zeros((4, 4))
        c = confusion(empty[None, None], empty[None, None])
        r = compute_metrics(c, empty, empty)
        assert r.dsc == 1.0 and r.precision == 1.0 and r.recall == 1.0
        assert r.accuracy == 1.0 and r.jaccard == 1.0

    def test_spurious_foreground_scores_zero(self):
        pred = np.zeros((4, 4))
        pred[0, 0] = 1.0
        gt = np.zeros((4, 4))
        c = confusion(pred[None, None], gt[None, None])
        r = compute_metrics(c, pred, gt)
        assert r.precision == 0.0 and r.recall == 0.0 and r.f1 == 0.0 and r.dsc == 0.0

    def test_dice_jaccard_identity(self, rng):
        for _ in range(200):
            pred = rng.random((8, 8)) < rng.uniform(0, 1)
            gt = rng.random((8, 8)) < rng.uniform(0, 1)
            c = confusion(pred.astype(float)[None, None], gt.astype(float)[None, None])
            r = compute_metrics(c, pred, gt)
            assert r.dsc == pytest.approx(2 * r.jaccard / (1 + r.jaccard), abs=1e-12)

    def test_dice_equals_f1(self, rng):
        for _ in range(200):
            pred = rng.random((8, 8)) < rng.uniform(0, 1)
            gt = rng.random((8, 8)) < rng.uniform(0, 1)
            c = confusion(pred.astype(float)[None, None], gt.astype(float)[None, None])
            r = compute_metrics(c, pred, gt)
            assert r.dsc == pytest.approx(r.f1, abs=1e-12)

    def test_permutation_invariance(self, rng):
        pred = rng.random((8, 8)) < 0.4
        gt = rng.random((8, 8)) < 0.4
        perm = rng.permutation(64)
        ps = pred.reshape(-1)[perm].reshape(8, 8)
        gs = gt.reshape(-1)[perm].reshape(8, 8)
        c1 = confusion(pred.astype(float)[None, None], gt.astype(float)[None, None])
        c2 = confusion(ps.astype(float)[None, None], gs.astype(float)[None, None])
        r1 = compute_metrics(c1, pred, gt)
        r2 = compute_metrics(c2, ps, gs)
        assert r1 == r2

    def test_matches_naive_oracle(self, rng):
        for _ in range(1000):
            pred = rng.random((8, 8)) < rng.uniform(0, 1)
            gt = rng.random((8, 8)) < rng.uniform(0, 1)
            c = confusion(pred.astype(float)[None, None], gt.astype(float)[None, None])
            r = compute_metrics(c, pred, gt)
            (tp, fp, fn, tn), scores = naive_metrics(pred, gt)
            assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
            got = (r.accuracy, r.precision, r.recall, r.f1, r.jaccard, r.dsc)
            assert got == scores


class TestFpPerVolume:
    def test_perfect_prediction_zero(self, rng):
        gt = (rng.random((8, 8)) < 0.3).astype(np.uint8)
        assert fp_per_volume([gt], [gt], ["v0"]) == 0.0

    def test_single_spurious_component(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[1:3, 1:3] = 1
        pred = gt.copy()
        pred[6, 6] = 1
        pred[6, 7] = 1  # one 2-pixel component off-target
        assert fp_per_volume([pred], [gt], ["v0"]) == 1.0

    def test_mean_over_volumes(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        pred_a = gt.copy()
        pred_a[0, 0] = 1
        pred_b = gt.copy()
        pred_b[0, 0] = 1
        pred_b[3, 3] = 1
        pred_b[6, 6] = 1
        assert fp_per_volume([pred_a, pred_b], [gt, gt], ["v0", "v1"]) == 2.0

    def test_diagonal_counts_as_one_component(self):
        # 8-connectivity merges diagonal neighbors
        gt = np.zeros((6, 6), dtype=np.uint8)
        pred = gt.copy()
        pred[1, 1] = 1
        pred[2, 2] = 1
        assert fp_per_volume([pred], [gt], ["v0"]) == 1.0

    def test_touching_component_not_counted(self):
        gt = np.zeros((6, 6), dtype=np.uint8)
        gt[2, 2] = 1
        pred = np.zeros((6, 6), dtype=np.uint8)
        pred[2, 2] = 1
        pred[2, 3] = 1  # overlaps truth, not a false positive
        assert fp_per_volume([pred], [gt], ["v0"]) == 0.0

    def test_slices_grouped_by_volume(self):
        gt = np.zeros((6, 6), dtype=np.uint8)
        spurious = gt.copy()
        spurious[0, 0] = 1
        # two slices in one volume, each with one stray component
        assert fp_per_volume([spurious, spurious], [gt, gt], ["v0", "v0"]) == 2.0

    def test_empty_grouping_rejected(self):
        with pytest.raises(ValueError):
            fp_per_volume([], [], [])


class TestCountsAlgebra:
    def test_addition(self):
        a = ConfusionCounts(1, 2, 3, 4)
        b = ConfusionCounts(10, 20, 30, 40)
        s = a + b
        assert (s.tp, s.fp, s.fn, s.tn) == (11, 22, 33, 44)
