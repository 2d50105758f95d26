"""Test the evaluation statistics."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from planediff.exceptions import ShapeMismatch, ValidationFailure
from planediff.metrics import (
    CSV_HEADER,
    MetricReport,
    ScoredLabels,
    auroc,
    average_precision,
    classification_report,
    dice,
    macro_auroc,
    mean_dice,
    multilabel_prf,
    permutation_test,
)
from planediff.volume import SegMask


def _pairwise_auroc(scores: np.ndarray, truth: np.ndarray) -> float:
    pos, neg = scores[truth == 1], scores[truth == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def _stepwise_ap(scores: np.ndarray, truth: np.ndarray) -> float:
    ap, recall = 0.0, 0.0
    for threshold in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= threshold
        tp = int((pred & (truth == 1)).sum())
        r = tp / int(truth.sum())
        ap += (r - recall) * tp / int(pred.sum())
        recall = r
    return ap


def test_auroc() -> None:
    assert 0.75 == auroc(ScoredLabels([0.8, 0.7, 0.6, 0.5], [1, 0, 1, 0]))
    assert 0.5 == auroc(ScoredLabels([0.3] * 6, [1, 0, 1, 0, 0, 1]))
    assert 1.0 == auroc(ScoredLabels([0.9, 0.1], [1, 0]))
    assert 0.0 == auroc(ScoredLabels([0.1, 0.9], [1, 0]))


@pytest.mark.parametrize("truth", [[1, 1, 1], [0, 0, 0]])
def test_auroc_single_class(truth: list) -> None:
    assert auroc(ScoredLabels([0.2, 0.5, 0.9], truth)) is None


@pytest.mark.parametrize("seed", range(5))
def test_auroc_matches_pairwise(seed: int) -> None:
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(40), 1)
    truth = (rng.random(40) < 0.4).astype(np.int64)
    truth[:2] = (0, 1)
    expected = _pairwise_auroc(scores, truth)
    assert expected == pytest.approx(auroc(ScoredLabels(scores, truth)), abs=1e-12)


def test_average_precision() -> None:
    assert 0.5 == pytest.approx(average_precision(ScoredLabels([0.9, 0.1], [0, 1])))
    assert 1.0 == pytest.approx(average_precision(ScoredLabels([0.9, 0.1], [1, 0])))
    assert average_precision(ScoredLabels([0.9, 0.1], [0, 0])) is None


@pytest.mark.parametrize("seed", range(5))
def test_average_precision_matches_stepwise(seed: int) -> None:
    rng = np.random.default_rng(100 + seed)
    scores = np.round(rng.random(30), 1)
    truth = (rng.random(30) < 0.3).astype(np.int64)
    truth[0] = 1
    expected = _stepwise_ap(scores, truth)
    assert expected == pytest.approx(average_precision(ScoredLabels(scores, truth)), abs=1e-12)


def test_ScoredLabels_invalid() -> None:
    with pytest.raises(ShapeMismatch):
        ScoredLabels([0.1, 0.2], [1])
    with pytest.raises(ValidationFailure):
        ScoredLabels([0.1, 0.2], [1, 2])
    s = ScoredLabels([0.1, 0.2, 0.3], [1, 0, 1])
    assert (2, 1) == (s.n_pos, s.n_neg)


def test_multilabel_prf() -> None:
    scores = [[0.9, 0.8], [0.2, 0.6]]
    truth = [[1, 1], [1, 0]]
    prf = multilabel_prf(scores, truth)
    assert 0.75 == pytest.approx(prf.CP)
    assert 0.75 == pytest.approx(prf.CR)
    assert 2 / 3 == pytest.approx(prf.CF1)
    assert 2 / 3 == pytest.approx(prf.OP)
    assert 2 / 3 == pytest.approx(prf.OR)
    assert 2 / 3 == pytest.approx(prf.OF1)
    assert () == prf.flags
    assert prf == multilabel_prf(torch.tensor(scores), torch.tensor(truth))


def test_multilabel_prf_threshold() -> None:
    prf = multilabel_prf([[0.5], [0.4]], [[1], [0]])
    assert (1.0, 1.0) == (prf.CP, prf.CR)
    prf = multilabel_prf([[0.5], [0.4]], [[1], [0]], threshold=0.3)
    assert (0.5, 1.0) == (prf.CP, prf.CR)


def test_multilabel_prf_zero_convention() -> None:
    prf = multilabel_prf([[0.1, 0.9], [0.2, 0.8]], [[1, 0], [0, 0]])
    assert (0.0, 0.0) == (prf.CP, prf.CR)
    assert "label 0: no predicted positives, precision=0" in prf.flags
    assert "label 1: no true positives, recall=0" in prf.flags
    prf = multilabel_prf([[0.1], [0.2]], [[0], [0]])
    assert (0.0, 0.0, 0.0) == (prf.OP, prf.OR, prf.OF1)
    assert "OP: no predicted positives, OP=0" in prf.flags
    assert "OR: no true positives, OR=0" in prf.flags


def test_multilabel_prf_invalid() -> None:
    with pytest.raises(ShapeMismatch):
        multilabel_prf([[0.1, 0.2]], [[1]])
    with pytest.raises(ShapeMismatch):
        multilabel_prf([0.1, 0.2], [1, 0])


def test_dice() -> None:
    pred = torch.tensor([1, 1, 0, 0])
    gt = torch.tensor([1, 0, 1, 0])
    assert 0.5 == dice(pred, gt, 1)
    assert 0.5 == dice(pred, gt, 0)
    assert 1.0 == dice(pred, gt, 2)
    assert 1.0 == dice(gt, gt, 1)
    assert 0.0 == dice(pred, 1 - pred, 1)
    with pytest.raises(ShapeMismatch):
        dice(pred, torch.zeros(5, dtype=torch.long), 1)


def test_dice_segmask() -> None:
    classes = torch.zeros((4, 4, 4), dtype=torch.uint8)
    classes[0, 0, :2] = 1
    gt = SegMask(classes, n_structures=2)
    assert 1.0 == dice(gt, gt, 1)
    partial = classes.clone()
    partial[0, 0, 1] = 2
    assert 2 / 3 == pytest.approx(dice(SegMask(partial, n_structures=2), gt, 1))
    assert 0.0 == dice(partial, gt, 2)


def test_mean_dice() -> None:
    gts = [torch.tensor([1, 2, 0, 0]), torch.tensor([1, 1, 2, 2])]
    preds = [torch.tensor([1, 2, 0, 0]), torch.tensor([1, 1, 0, 0])]
    assert {1: 1.0, 2: 0.5} == mean_dice(preds, gts, 2)
    with pytest.raises(ShapeMismatch):
        mean_dice(preds, gts[:1], 2)
    with pytest.raises(ShapeMismatch):
        mean_dice([], [], 2)


@pytest.mark.parametrize(
    "diff, p",
    [
        ([1.0, 1.0, 1.0], 1 / 8),
        ([1.0], 0.5),
        ([0.0, 0.0], 1.0),
        ([-1.0, -1.0, -1.0], 1.0),
        ([2.0, 0.0, 0.0], 0.5),
    ],
)
def test_permutation_test_exact(diff: list, p: float) -> None:
    assert p == permutation_test(diff)


def test_permutation_test_empty() -> None:
    with pytest.raises(ValidationFailure):
        permutation_test([])


def test_permutation_test_monte_carlo() -> None:
    diff = [0.3, -0.5, 0.8, 0.1, -0.2, 0.6, -0.9, 0.4, 0.2, -0.1]
    exact = permutation_test(diff, n_resamples=1024)
    approx = permutation_test(diff, n_resamples=1023, seed=3)
    assert approx == permutation_test(diff, n_resamples=1023, seed=3)
    se = math.sqrt(exact * (1 - exact) / 1023)
    assert abs(approx - exact) < 4 * se + 2 / 1024


def _toy_report() -> MetricReport:
    probs = np.array([[0.9, 0.8], [0.2, 0.6]])
    truth = np.array([[1, 1], [1, 0]])
    return classification_report(probs, truth)


def test_classification_report(caplog: pytest.LogCaptureFixture) -> None:
    with caplog.at_level(logging.WARNING):
        report = _toy_report()
    assert "label 0" in caplog.text
    assert report.per_label[0].auroc is None
    assert 1.0 == report.per_label[0].ap
    assert (2, 0) == (report.per_label[0].n_pos, report.per_label[0].n_neg)
    assert 1.0 == report.per_label[1].auroc
    assert 1.0 == report.macro_auroc
    assert report.prf is not None
    assert "label 0: AUROC undefined (single class)" in report.flags
    assert 2 == report.n_patients


def test_macro_auroc() -> None:
    scores = np.array([[0.8, 0.1], [0.7, 0.2], [0.6, 0.3], [0.5, 0.4]])
    truth = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
    assert 0.75 == pytest.approx(macro_auroc(scores, truth))
    assert macro_auroc(scores[:, :1], np.ones((4, 1))) is None


def test_MetricReport_json(tmp_path: Path) -> None:
    report = _toy_report()
    path = report.to_json(tmp_path / "eval" / "report.json")
    assert report == MetricReport.model_validate_json(path.read_text())


def test_MetricReport_csv(tmp_path: Path) -> None:
    path = _toy_report().to_csv(tmp_path / "report.csv")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert list(CSV_HEADER) == rows[0]
    assert ["0", "auroc", "", "undefined"] in rows
    assert ["1", "auroc", "1.0", ""] in rows
    assert ["all", "macro_auroc", "1.0", ""] in rows
    (of1,) = [r for r in rows if r[:2] == ["all", "OF1"]]
    assert 2 / 3 == pytest.approx(float(of1[2]))
    assert "" == of1[3]


def test_MetricReport_dice_rows() -> None:
    report = MetricReport(per_label={}, macro_auroc=None, dice={1: 0.5, 2: 0.75}, mean_dice=0.625)
    rows = report.rows()
    assert ("all", "macro_auroc", "", "undefined") in rows
    assert ("1", "dice", "0.5", "") in rows
    assert ("all", "mean_dice", "0.625", "") in rows
