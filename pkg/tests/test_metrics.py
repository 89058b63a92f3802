import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import relaxed_reference
from plgan.metrics import (evaluate_dataset, f_beta_score, pixel_metrics,
                           quality_score, relaxed_counts, relaxed_metrics)


def random_pair(rng, n=16, p=0.1):
    return (rng.random((n, n)) < p).astype(np.uint8), (rng.random((n, n)) < p).astype(np.uint8)


# ------------------------------------------------------------------ pixel metrics

def test_perfect_prediction(rng):
    gt = (rng.random((10, 10)) < 0.2).astype(np.uint8)
    gt[0, 0] = 1
    assert pixel_metrics(gt, gt)[:5] == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_counts():
    pred = np.array([[1, 1, 0, 0]])
    gt = np.array([[1, 0, 1, 0]])
    *_, c = pixel_metrics(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)


def test_f1_from_precision_recall():
    assert f_beta_score(0.8, 0.2, 1.0) == pytest.approx(0.32)


def test_f_beta_point_three():
    assert f_beta_score(0.8, 0.2, 0.3) == pytest.approx(1.09 * 0.16 / (0.072 + 0.2), abs=1e-12)
    assert f_beta_score(0.8, 0.2, 0.3) == pytest.approx(0.641176, abs=1e-6)


def test_pixel_metrics_example_values():
    # 4 predicted, 3 correct -> P = 0.75; 6 gt -> R = 0.5
    pred = np.zeros((4, 4), np.uint8)
    gt = np.zeros((4, 4), np.uint8)
    pred[0, :4] = 1
    gt[0, :3] = 1
    gt[1, :3] = 1
    p, r, iou, f1, fb, _ = pixel_metrics(pred, gt, beta=0.3)
    assert (p, r) == (0.75, 0.5)
    assert iou == pytest.approx(3 / 7)
    assert f1 == pytest.approx(2 * 0.375 / 1.25)
    assert fb == pytest.approx(1.09 * 0.375 / (0.09 * 0.75 + 0.5))


@settings(max_examples=50)
@given(st.floats(0.01, 1.0), st.floats(0.05, 5.0))
def test_f_beta_equal_pr(p, beta):
    assert f_beta_score(p, p, beta) == pytest.approx(p)


@settings(max_examples=50)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_f1_is_harmonic_mean(p, r):
    assert f_beta_score(p, r, 1.0) == pytest.approx(2 / (1 / p + 1 / r))


def test_empty_conventions():
    z = np.zeros((3, 3), np.uint8)
    one = z.copy()
    one[1, 1] = 1
    assert pixel_metrics(z, z)[:5] == (1.0, 1.0, 1.0, 1.0, 1.0)
    p, r, iou, f1, fb, _ = pixel_metrics(z, one)
    assert (p, r, iou, f1, fb) == (0.0, 0.0, 0.0, 0.0, 0.0)
    p, r, *_ = pixel_metrics(one, z)
    assert (p, r) == (0.0, 0.0)
    assert relaxed_metrics(z, z, 2)[:3] == (1.0, 1.0, 1.0)
    assert relaxed_metrics(z, one, 2)[:3] == (0.0, 0.0, 0.0)


def test_non_binary_rejected():
    with pytest.raises(ValueError):
        pixel_metrics(np.array([[2, 0]]), np.array([[1, 0]]))
    with pytest.raises(ValueError):
        relaxed_metrics(np.array([[0.5]]), np.array([[1]]), 1)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        pixel_metrics(np.zeros((2, 2)), np.zeros((2, 3)))


# ------------------------------------------------------------------ relaxed metrics

def test_relaxed_identical(rng):
    gt = (rng.random((12, 12)) < 0.2).astype(np.uint8)
    assert relaxed_metrics(gt, gt, 2)[:3] == (1.0, 1.0, 1.0)


def test_relaxed_two_pixel_shift():
    pred = np.zeros((3, 3), np.uint8)
    gt = np.zeros((3, 3), np.uint8)
    pred[0, 0], gt[0, 2] = 1, 1
    assert relaxed_metrics(pred, gt, 2)[:3] == (1.0, 1.0, 1.0)
    assert relaxed_metrics(pred, gt, 1.99)[:3] == (0.0, 0.0, 0.0)


def test_quality_formula():
    assert quality_score(0.5, 0.5) == pytest.approx(1 / 3)


def test_quality_bounded_by_min():
    grid = np.linspace(0.05, 1.0, 20)
    for c in grid:
        for m in grid:
            assert quality_score(c, m) <= min(c, m) + 1e-12


@pytest.mark.parametrize("d", [0, 1, 2, 4])
def test_relaxed_matches_brute_force(d, rng):
    for _ in range(40):
        pred, gt = random_pair(rng, 16, rng.uniform(0.01, 0.3))
        c = relaxed_counts(pred, gt, d)
        assert (c.matched_pred, c.total_pred, c.matched_gt, c.total_gt) == relaxed_reference(pred, gt, d)


def test_relaxed_zero_tolerance_is_precision_recall(rng):
    for _ in range(30):
        pred, gt = random_pair(rng, 16, 0.2)
        p, r, *_ = pixel_metrics(pred, gt)
        corr, comp, *_ = relaxed_metrics(pred, gt, 0)
        assert (corr, comp) == (p, r)


def test_relaxed_monotone_in_tolerance(rng):
    for _ in range(30):
        pred, gt = random_pair(rng, 16, 0.1)
        vals = [relaxed_metrics(pred, gt, d)[:2] for d in (0, 1, 2, 4)]
        for a, b in zip(vals, vals[1:]):
            assert b[0] >= a[0] and b[1] >= a[1]


def test_chebyshev_is_at_least_as_lenient(rng):
    for _ in range(10):
        pred, gt = random_pair(rng, 16, 0.05)
        e = relaxed_metrics(pred, gt, 2, "euclidean")
        c = relaxed_metrics(pred, gt, 2, "chebyshev")
        assert c[0] >= e[0] and c[1] >= e[1]


# ------------------------------------------------------------------ aggregation

def test_single_image_micro_equals_macro(rng):
    pred, gt = random_pair(rng)
    a = evaluate_dataset([pred], [gt], aggregation="micro").metrics()
    b = evaluate_dataset([pred], [gt], aggregation="macro").metrics()
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-12)


def test_two_image_micro_vs_macro():
    gt1 = np.zeros((4, 4), np.uint8)
    gt1[1, :] = 1
    gt2 = np.zeros((4, 4), np.uint8)
    gt2[:, 2] = 1
    preds = [gt1.copy(), np.zeros((4, 4), np.uint8)]
    micro = evaluate_dataset(preds, [gt1, gt2], aggregation="micro")
    macro = evaluate_dataset(preds, [gt1, gt2], aggregation="macro")
    assert micro.precision == 4 / (4 + 0)
    assert macro.precision == (1 + 0) / 2
    assert micro.recall == 4 / 8
    assert macro.recall == 0.5
    assert micro.counts.tp == 4 and micro.counts.fn == 4


def test_micro_recomputable_from_counts(rng):
    preds, gts = zip(*[random_pair(rng) for _ in range(5)])
    r = evaluate_dataset(list(preds), list(gts), beta=0.3)
    c = r.counts
    assert r.precision == pytest.approx(c.tp / (c.tp + c.fp), abs=1e-9)
    assert r.recall == pytest.approx(c.tp / (c.tp + c.fn), abs=1e-9)
    assert r.iou == pytest.approx(c.tp / (c.tp + c.fp + c.fn), abs=1e-9)
    assert r.correctness == pytest.approx(r.relaxed.matched_pred / r.relaxed.total_pred, abs=1e-9)
    assert c.tp + c.fp + c.fn + c.tn == 5 * 16 * 16


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate_dataset([], [])
    with pytest.raises(ValueError):
        evaluate_dataset([np.zeros((2, 2))], [])


def test_report_serialisation(rng):
    preds, gts = zip(*[random_pair(rng) for _ in range(2)])
    r = evaluate_dataset(list(preds), list(gts), ids=["a", "b"])
    data = json.loads(r.to_json())
    assert set(data) >= {"precision", "quality", "counts", "relaxed", "config", "per_image"}
    assert [row["id"] for row in data["per_image"]] == ["a", "b"]
    header, row = r.csv_row().strip().split("\n")
    assert header.split(",") == ["precision", "recall", "iou", "f1", "f_beta", "correctness", "completeness", "quality"]
    assert float(row.split(",")[0]) == pytest.approx(r.precision, abs=1e-6)
