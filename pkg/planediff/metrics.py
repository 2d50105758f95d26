"""Evaluation statistics.

Undefined values are never imputed silently: a single-class label has AUROC
`None`, a label without positives has AP `None`, and precision/recall computed
on an empty denominator is reported as 0 together with a flag naming the label
and the convention applied.

```python
from planediff.metrics import auroc, ScoredLabels

auroc(ScoredLabels(scores=[0.8, 0.7, 0.6, 0.5], truth=[1, 0, 1, 0]))  # 0.75
```
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Final, List, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from sklearn.metrics import (  # type: ignore
    average_precision_score,
    precision_recall_fscore_support,
    roc_auc_score,
)

from planediff.exceptions import ShapeMismatch, ValidationFailure
from planediff.seeding import numpy_generator
from planediff.volume import SegMask

logger: Final = logging.getLogger(__name__)

DEFAULT_THRESHOLD: Final = 0.5
DEFAULT_RESAMPLES: Final = 10_000
CSV_HEADER: Final = ("label", "metric", "value", "flag")


@dataclass(frozen=True)
class ScoredLabels:
    scores: np.ndarray
    truth: np.ndarray

    def __init__(
        self, scores: Sequence[float] | np.ndarray, truth: Sequence[int] | np.ndarray
    ) -> None:
        s = np.asarray(scores, dtype=np.float64).reshape(-1)
        t = np.asarray(truth).reshape(-1)
        if s.shape != t.shape:
            raise ShapeMismatch(f"{s.size} scores for {t.size} labels")
        if not np.isin(t, (0, 1)).all():
            raise ValidationFailure("truth must be binary")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "truth", t.astype(np.int64))

    @property
    def n_pos(self) -> int:
        return int(self.truth.sum())

    @property
    def n_neg(self) -> int:
        return int(self.truth.size - self.truth.sum())


def auroc(s: ScoredLabels) -> float | None:
    """Mann-Whitney AUROC with ties counted 1/2; `None` for single-class truth."""
    if s.n_pos == 0 or s.n_neg == 0:
        return None
    return float(roc_auc_score(s.truth, s.scores))


def average_precision(s: ScoredLabels) -> float | None:
    """Step-wise `sum (R_n - R_{n-1}) P_n` over distinct thresholds; `None` without positives."""
    if s.n_pos == 0:
        return None
    return float(average_precision_score(s.truth, s.scores))


class PRF(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    CP: float
    CR: float
    CF1: float
    """Mean of the per-label F1 values."""
    OP: float
    OR: float
    OF1: float
    flags: Tuple[str, ...] = ()


def _as_matrix(x: np.ndarray | torch.Tensor | Sequence[Sequence[float]]) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"expected an N x K matrix, got shape {m.shape}")
    return m


def multilabel_prf(
    scores: np.ndarray | torch.Tensor,
    truth: np.ndarray | torch.Tensor,
    threshold: float = DEFAULT_THRESHOLD,
) -> PRF:
    """Class-averaged and overall precision, recall and F1 at `threshold`.

    `scores` are probabilities; a score `>= threshold` is a positive prediction.
    """
    s, t = _as_matrix(scores), _as_matrix(truth).astype(np.int64)
    if s.shape != t.shape:
        raise ShapeMismatch(f"scores {s.shape} != truth {t.shape}")
    pred = (s >= threshold).astype(np.int64)
    flags: List[str] = []
    for k in range(t.shape[1]):
        if pred[:, k].sum() == 0:
            flags.append(f"label {k}: no predicted positives, precision=0")
        if t[:, k].sum() == 0:
            flags.append(f"label {k}: no true positives, recall=0")
    p, r, f1 = np.array(
        [
            precision_recall_fscore_support(
                t[:, k], pred[:, k], average="binary", zero_division=0
            )[:3]
            for k in range(t.shape[1])
        ]
    ).T
    # micro averaging pools every (sample, label) decision
    op, or_, of1, _ = precision_recall_fscore_support(
        t.ravel(), pred.ravel(), average="binary", zero_division=0
    )
    if pred.sum() == 0:
        flags.append("OP: no predicted positives, OP=0")
    if t.sum() == 0:
        flags.append("OR: no true positives, OR=0")
    return PRF(
        CP=float(np.mean(p)),
        CR=float(np.mean(r)),
        CF1=float(np.mean(f1)),
        OP=float(op),
        OR=float(or_),
        OF1=float(of1),
        flags=tuple(flags),
    )


def dice(pred: SegMask | torch.Tensor, gt: SegMask | torch.Tensor, class_id: int) -> float:
    """`2|A & B| / (|A| + |B|)` for voxels of `class_id`; 1.0 when both are empty."""
    a = (pred.classes if isinstance(pred, SegMask) else pred) == class_id
    b = (gt.classes if isinstance(gt, SegMask) else gt) == class_id
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction {tuple(a.shape)} != ground truth {tuple(b.shape)}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def mean_dice(
    preds: Sequence[torch.Tensor], gts: Sequence[torch.Tensor], n_structures: int
) -> Dict[int, float]:
    """Per-structure Dice averaged over cases, structures 1..S."""
    if len(preds) != len(gts) or not preds:
        raise ShapeMismatch(f"{len(preds)} predictions for {len(gts)} masks")
    return {
        c: float(np.mean([dice(p, g, c) for p, g in zip(preds, gts)]))
        for c in range(1, n_structures + 1)
    }


def permutation_test(
    diff: Sequence[float] | np.ndarray,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> float:
    """One-sided paired sign-flip test that the mean difference is positive.

    Zero differences carry no sign information and are dropped; with none left
    the p-value is 1.  When `2**n <= n_resamples` every sign pattern is
    enumerated and `p = (1 + #patterns with mean > observed) / 2**n`; otherwise
    `n_resamples` random patterns give `p = (1 + #greater) / (1 + n_resamples)`.
    """
    d = np.asarray(diff, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValidationFailure("permutation test needs at least one difference")
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    observed = d.mean()
    tol = 1e-12 * max(1.0, float(np.abs(d).max()))
    if n < 63 and 2**n <= n_resamples:
        bits = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
        means = ((1 - 2 * bits) * d).mean(axis=1)
        return float((1 + np.count_nonzero(means > observed + tol)) / 2**n)
    rng = numpy_generator(seed, "permutation", n)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(n_resamples, n))
    means = (signs * d).mean(axis=1)
    return float((1 + np.count_nonzero(means > observed + tol)) / (1 + n_resamples))


class LabelMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    auroc: float | None
    ap: float | None
    n_pos: int
    n_neg: int


class MetricReport(BaseModel):
    """All classification (and optionally segmentation) metrics of one evaluation."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    per_label: Dict[int, LabelMetrics]
    macro_auroc: float | None
    """Mean of the defined per-label AUROCs."""
    prf: PRF | None = None
    threshold: float = DEFAULT_THRESHOLD
    dice: Dict[int, float] | None = None
    """Mean Dice per structure."""
    mean_dice: float | None = None
    flags: Tuple[str, ...] = ()
    n_patients: int = 0

    def to_json(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=1))
        return path

    def rows(self) -> List[Tuple[str, str, str, str]]:
        """Flat `label,metric,value,flag` rows; undefined values are empty with a flag."""
        rows: List[Tuple[str, str, str, str]] = []
        for k, m in sorted(self.per_label.items()):
            for name, value in (("auroc", m.auroc), ("ap", m.ap)):
                flag = "" if value is not None else "undefined"
                rows.append((str(k), name, "" if value is None else repr(value), flag))
        macro_flag = "" if self.macro_auroc is not None else "undefined"
        macro = "" if self.macro_auroc is None else repr(self.macro_auroc)
        rows.append(("all", "macro_auroc", macro, macro_flag))
        if self.prf is not None:
            per_label = any(f.startswith("label") for f in self.prf.flags)
            op = any(f.startswith("OP") for f in self.prf.flags)
            or_ = any(f.startswith("OR") for f in self.prf.flags)
            flagged = {"CP": per_label, "CR": per_label, "CF1": per_label}
            flagged.update({"OP": op, "OR": or_, "OF1": op or or_})
            for name, zero_convention in flagged.items():
                flag = "zero_convention" if zero_convention else ""
                rows.append(("all", name, repr(getattr(self.prf, name)), flag))
        if self.dice is not None:
            for c, v in sorted(self.dice.items()):
                rows.append((str(c), "dice", repr(v), ""))
        if self.mean_dice is not None:
            rows.append(("all", "mean_dice", repr(self.mean_dice), ""))
        return rows

    def to_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_HEADER)
            writer.writerows(self.rows())
        return path


def macro_auroc(
    scores: np.ndarray | torch.Tensor, truth: np.ndarray | torch.Tensor
) -> float | None:
    """Mean of the defined per-label AUROCs; undefined labels are logged and skipped."""
    s, t = _as_matrix(scores), _as_matrix(truth)
    values = []
    for k in range(s.shape[1]):
        a = auroc(ScoredLabels(s[:, k], t[:, k].astype(np.int64)))
        if a is None:
            logger.warning(f"AUROC undefined for label {k} (single class); skipped")
        else:
            values.append(a)
    return float(np.mean(values)) if values else None


def classification_report(
    probs: np.ndarray | torch.Tensor,
    truth: np.ndarray | torch.Tensor,
    threshold: float = DEFAULT_THRESHOLD,
) -> MetricReport:
    """Per-label AUROC/AP, macro-AUROC and PRF from (N, K) probabilities."""
    s, t = _as_matrix(probs), _as_matrix(truth).astype(np.int64)
    if s.shape != t.shape:
        raise ShapeMismatch(f"scores {s.shape} != truth {t.shape}")
    per_label: Dict[int, LabelMetrics] = {}
    flags: List[str] = []
    for k in range(s.shape[1]):
        sl = ScoredLabels(s[:, k], t[:, k])
        per_label[k] = LabelMetrics(
            auroc=auroc(sl), ap=average_precision(sl), n_pos=sl.n_pos, n_neg=sl.n_neg
        )
        if per_label[k].auroc is None:
            flags.append(f"label {k}: AUROC undefined (single class)")
        if per_label[k].ap is None:
            flags.append(f"label {k}: AP undefined (no positives)")
    prf = multilabel_prf(s, t, threshold)
    return MetricReport(
        per_label=per_label,
        macro_auroc=macro_auroc(s, t),
        prf=prf,
        threshold=threshold,
        flags=tuple(flags) + prf.flags,
        n_patients=int(s.shape[0]),
    )
