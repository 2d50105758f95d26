"""Choosing taps on the validation split and measuring label efficiency.

Classification selection is two-step: the four best taps of each orientation
by validation macro-AUROC form a shortlist, and all 4 x 4 x 4 cross-orientation
combinations of the shortlists are trained and scored as fused models; the best
combination wins.  Ties are broken toward the smaller timestep and then the
lower bottleneck block, in sagittal, coronal, axial order.

Segmentation selection picks the best tap per orientation by validation mean
Dice; there is no cross-orientation step.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from enum import Enum, unique
from pathlib import Path
from typing import Callable, Dict, Final, List, Mapping, Sequence, Tuple

from planediff.denoiser import Block
from planediff.exceptions import ValidationFailure
from planediff.feature_tap import TapPoint
from planediff.manifest import Manifest
from planediff.synth_data import StudyRecord
from planediff.training import Setting, patient_subset
from planediff.volume import ORIENTATIONS, Orientation

logger: Final = logging.getLogger(__name__)

SHORTLIST: Final = 4
CANDIDATES_HEADER: Final = ("sagittal", "coronal", "axial", "macro_auroc")
CURVE_HEADER: Final = ("fraction", "metric", "value", "arm")

GridKey = Tuple[Orientation, TapPoint]


@unique
class Task(str, Enum):
    CLASSIFICATION = "classification"
    SEGMENTATION = "segmentation"

    @property
    def metric(self) -> str:
        return "macro_auroc" if self is Task.CLASSIFICATION else "mean_dice"


def _rank(score: float | None, *taps: TapPoint) -> Tuple:
    """Sort key: defined scores first, higher first, then the taps' own order."""
    head = (1, 0.0) if score is None else (0, -score)
    return (*head, *(t.sort_key() for t in taps))


class ConfigSelection(Manifest):
    """The chosen tap per orientation; written before any test-split read."""

    KIND = "selection"

    taps: Dict[Orientation, TapPoint]
    setting: Setting
    task: Task
    score: float | None = None
    """Validation score of the chosen configuration."""
    candidates: int = 0
    """Number of fused configurations evaluated."""


def top_taps(
    grid: Mapping[GridKey, float | None], orientation: Orientation, top: int = SHORTLIST
) -> List[TapPoint]:
    entries = [(tap, score) for (o, tap), score in grid.items() if o is orientation]
    if len(entries) < top:
        raise ValidationFailure(
            f"grid has {len(entries)} {orientation.value} taps, need at least {top}"
        )
    entries.sort(key=lambda e: _rank(e[1], e[0]))
    return [tap for tap, _ in entries[:top]]


@dataclass(frozen=True)
class Candidate:
    taps: Tuple[TapPoint, TapPoint, TapPoint]
    """Sagittal, coronal, axial."""
    score: float | None

    def rank(self) -> Tuple:
        return _rank(self.score, *self.taps)

    def as_dict(self) -> Dict[Orientation, TapPoint]:
        return dict(zip(ORIENTATIONS, self.taps))


def select_config(
    grid: Mapping[GridKey, float | None],
    evaluate_fused: Callable[[Dict[Orientation, TapPoint]], float | None],
    setting: Setting,
    top: int = SHORTLIST,
) -> Tuple[ConfigSelection, List[Candidate]]:
    """Score every combination of the per-orientation shortlists and keep the best.

    `evaluate_fused` trains and scores one configuration on validation data;
    it is called once per combination, in shortlist order.
    """
    shortlist = [top_taps(grid, o, top) for o in ORIENTATIONS]
    for o, taps in zip(ORIENTATIONS, shortlist):
        logger.info(f"{o.value} shortlist: {', '.join(str(t) for t in taps)}")
    candidates: List[Candidate] = []
    for combo in itertools.product(*shortlist):
        taps = (combo[0], combo[1], combo[2])
        c = Candidate(taps, evaluate_fused(dict(zip(ORIENTATIONS, taps))))
        logger.debug(f"Candidate {'/'.join(str(t) for t in c.taps)}: {c.score}")
        candidates.append(c)
    best = min(candidates, key=Candidate.rank)
    logger.info(
        f"Selected {'/'.join(str(t) for t in best.taps)} ({best.score})"
        f" from {len(candidates)} candidates"
    )
    selection = ConfigSelection(
        taps=best.as_dict(),
        setting=setting,
        task=Task.CLASSIFICATION,
        score=best.score,
        candidates=len(candidates),
    )
    return selection, candidates


def select_segmentation_taps(
    grid: Mapping[GridKey, float | None], setting: Setting = Setting.FT
) -> ConfigSelection:
    """The best tap of each probed orientation by validation mean Dice."""
    orientations = [o for o in ORIENTATIONS if any(k[0] is o for k in grid)]
    if not orientations:
        raise ValidationFailure("the probe grid is empty")
    taps = {o: top_taps(grid, o, 1)[0] for o in orientations}
    scores = [grid[(o, t)] for o, t in taps.items()]
    defined = [s for s in scores if s is not None]
    return ConfigSelection(
        taps=taps,
        setting=setting,
        task=Task.SEGMENTATION,
        score=sum(defined) / len(defined) if defined else None,
    )


def write_probe_grid(
    path: Path, grid: Mapping[GridKey, float | None], task: Task = Task.CLASSIFICATION
) -> Path:
    """`orientation,timestep,block,<metric>` rows; an undefined score is empty."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("orientation", "timestep", "block", task.metric))
        ordered = sorted(grid.items(), key=lambda e: (e[0][0].index, e[0][1].sort_key()))
        for (o, tap), score in ordered:
            value = "" if score is None else repr(score)
            writer.writerow((o.value, tap.timestep, tap.block.value, value))
    return path


def read_probe_grid(path: Path) -> Tuple[Dict[GridKey, float | None], Task]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        tasks = {t.metric: t for t in Task}
        if header is None or tuple(header[:3]) != ("orientation", "timestep", "block") or (
            header[3] not in tasks
        ):
            raise ValidationFailure(f"{path} is not a probe grid")
        grid: Dict[GridKey, float | None] = {}
        for row in reader:
            tap = TapPoint(timestep=int(row[1]), block=Block(row[2]))
            grid[(Orientation(row[0]), tap)] = float(row[3]) if row[3] else None
    return grid, tasks[header[3]]


def write_candidates(path: Path, candidates: Sequence[Candidate]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CANDIDATES_HEADER)
        for c in candidates:
            score = "" if c.score is None else repr(c.score)
            writer.writerow((*(str(t) for t in c.taps), score))
    return path


@dataclass(frozen=True)
class CurvePoint:
    fraction: float
    metric: str
    value: float | None
    arm: str


def nested_subsets(
    records: Sequence[StudyRecord], fractions: Sequence[float], seed: int
) -> Dict[float, Tuple[str, ...]]:
    """Patient ids trained on at each fraction."""
    return {
        f: tuple(sorted(r.patient_id for r in patient_subset(records, f, seed))) for f in fractions
    }


def label_efficiency_run(
    fractions: Sequence[float],
    arms: Mapping[str, Callable[[float], float | None]],
    metric: str,
) -> List[CurvePoint]:
    """Call each arm once per fraction; arms train on nested subsets with fixed settings.

    An arm maps a label fraction to its validation metric.
    """
    if not fractions:
        raise ValidationFailure("no label fractions")
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValidationFailure(f"fractions must lie in (0, 1], got {list(fractions)}")
    if any(a >= b for a, b in zip(fractions, fractions[1:])):
        raise ValidationFailure(f"fractions must be strictly ascending, got {list(fractions)}")
    points: List[CurvePoint] = []
    for arm, run in arms.items():
        for f in fractions:
            value = run(f)
            logger.info(f"{arm} at {f:g} of the labels: {metric} {value}")
            points.append(CurvePoint(f, metric, value, arm))
    return points


def write_curve(path: Path, points: Sequence[CurvePoint]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_HEADER)
        for p in points:
            value = "" if p.value is None else repr(p.value)
            writer.writerow((repr(p.fraction), p.metric, value, p.arm))
    return path


def read_curve(path: Path) -> List[CurvePoint]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        if tuple(next(reader, ())) != CURVE_HEADER:
            raise ValidationFailure(f"{path} is not a label-efficiency curve")
        return [
            CurvePoint(float(row[0]), row[1], float(row[2]) if row[2] else None, row[3])
            for row in reader
        ]


def efficiency_drop(points: Sequence[CurvePoint], arm: str) -> float | None:
    """Metric at the largest fraction minus the metric at the smallest."""
    mine = sorted((p for p in points if p.arm == arm), key=lambda p: p.fraction)
    if not mine or mine[0].value is None or mine[-1].value is None:
        return None
    return mine[-1].value - mine[0].value
