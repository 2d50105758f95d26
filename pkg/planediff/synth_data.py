"""Synthetic multi-plane phantom studies, preprocessing and patient-level splits.

A phantom patient is an ellipsoidal "bone" with `S` nested shells (the
segmentation targets) and `K` possible lesions.  Each scan of the patient is a
view of that anatomy in one of the three orientations.  Lesion `k` is rendered
at full strength in its home orientation `ORIENTATIONS[k % 3]` and attenuated in
the other two, so that each orientation carries a different share of the
diagnostic signal.

```python
from planediff.synth_data import PhantomSpec, generate_phantom_study

spec = PhantomSpec(n_patients=4, seed=7)
study = generate_phantom_study(spec, "P0000")
study.record.labels            # e.g. (0, 1, 0, 0)
study.volumes["P0000_sagittal_0"].data.shape  # (1, 8, 32, 32)
```

Everything here is deterministic in `(spec.seed, patient_id)`.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from enum import Enum, unique
from typing import Any, Dict, Final, List, NamedTuple, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from planediff.ehr import EHRRecord, Event, PatientType, Sex
from planediff.exceptions import LeakageError, NumericError, ShapeMismatch, ValidationFailure
from planediff.manifest import Manifest
from planediff.seeding import numpy_generator
from planediff.volume import ORIENTATIONS, Orientation, ResolutionProfile, SegMask, VolumeTensor

logger: Final = logging.getLogger(__name__)

SITES: Final = ("A", "B", "C", "D", "E", "F", "G")
FIELD_STRENGTHS: Final = ("1.5T", "3.0T")

SHELL_OUTER: Final = 0.9
"""Normalized radius enclosing all structures; the cortical rim lies outside it."""
RIM_LEVEL: Final = 1.6
LESION_SIGMA: Final = 0.18
LESION_RING: Final = 0.45
OFF_HOME_VISIBILITY: Final = 0.35
"""Lesion amplitude outside its home orientation, relative to the home amplitude."""

_FRAME_AXES: Final[Dict[Orientation, Tuple[int, int, int]]] = {
    Orientation.SAGITTAL: (0, 1, 2),
    Orientation.CORONAL: (1, 0, 2),
    Orientation.AXIAL: (2, 0, 1),
}
"""Patient-frame axis shown along (slice, row, column) of each orientation."""


@unique
class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class PhantomSpec(BaseModel):
    """Parameters of the phantom cohort."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_patients: int = Field(default=60, ge=1)
    resolution: Tuple[int, int, int] = (8, 32, 32)
    """(D, H, W) of the preprocessed volumes."""
    n_labels: int = Field(default=4, ge=1)
    """K."""
    n_structures: int = Field(default=4, ge=1, le=255)
    """S."""
    label_effect_strength: float = Field(default=0.5, gt=0.0)
    """Lesion amplitude in the home orientation, in raw intensity units."""
    noise_floor: float = Field(default=0.05, ge=0.0)
    """Standard deviation of the additive Gaussian noise at 3.0T."""
    multi_scan_fraction: float = Field(default=0.1, ge=0.0, lt=0.5)
    """Fraction of patients with repeat acquisitions in some orientation."""
    seed: int = 0
    label_prevalence: float = Field(default=0.35, gt=0.0, lt=1.0)
    max_scans_per_orientation: int = Field(default=4, ge=1)
    raw_extra_slices: int = Field(default=4, ge=0)
    """The raw stack has D + raw_extra_slices slices; preprocessing keeps the central D."""
    raw_oversample: float = Field(default=1.25, gt=0.0)
    """Raw in-plane size relative to (H, W); preprocessing resizes back."""
    ehr_missing_rate: float = Field(default=0.1, ge=0.0, lt=1.0)

    @field_validator("resolution")
    @classmethod
    def _positive(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if min(v) <= 0:
            raise ValueError(f"resolution must be positive, got {v}")
        return v

    @property
    def profile(self) -> ResolutionProfile:
        return ResolutionProfile(*self.resolution)

    @property
    def raw_shape(self) -> Tuple[int, int, int]:
        d, h, w = self.resolution
        return (
            d + self.raw_extra_slices,
            max(1, round(h * self.raw_oversample)),
            max(1, round(w * self.raw_oversample)),
        )


class StudyRecord(BaseModel):
    """One patient: scans per orientation, labels and optional health record."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    patient_id: str
    scans: Dict[Orientation, Tuple[str, ...]]
    """Scan ids per orientation."""
    labels: Tuple[int, ...]
    """K-bit multi-label vector."""
    ehr: EHRRecord | None = None
    seg_scans: Tuple[str, ...] = ()
    """Scans that carry a segmentation mask."""
    site: str | None = None
    field_strength: str | None = None

    @field_validator("labels")
    @classmethod
    def _bits(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(b not in (0, 1) for b in v):
            raise ValueError(f"labels must be bits, got {v}")
        return v

    @property
    def all_scans(self) -> Tuple[str, ...]:
        return tuple(s for o in ORIENTATIONS for s in self.scans.get(o, ()))

    def orientation_of(self, scan_id: str) -> Orientation:
        for o, ids in self.scans.items():
            if scan_id in ids:
                return o
        raise KeyError(scan_id)


class DatasetIndex(Manifest):
    """Patient-level split of a cohort; serialized as `index.json`."""

    KIND = "dataset_index"

    n_labels: int
    splits: Dict[Split, Tuple[str, ...]]
    records: Dict[str, StudyRecord]
    seed: int

    def model_post_init(self, _: Any) -> None:
        seen: Dict[str, Split] = {}
        for split, ids in self.splits.items():
            for pid in ids:
                if pid in seen:
                    raise LeakageError(f"{pid} is in both {seen[pid].value} and {split.value}")
                seen[pid] = split
        if set(seen) != set(self.records):
            raise LeakageError("splits do not cover exactly the indexed patients")
        for pid, r in self.records.items():
            if r.patient_id != pid:
                raise ValidationFailure(f"record {r.patient_id} is keyed as {pid}")
            if len(r.labels) != self.n_labels:
                raise ValidationFailure(
                    f"{pid} has {len(r.labels)} labels, expected {self.n_labels}"
                )
        super().model_post_init(_)

    def split_of(self, patient_id: str) -> Split:
        for split, ids in self.splits.items():
            if patient_id in ids:
                return split
        raise KeyError(patient_id)

    def records_in(self, split: Split) -> List[StudyRecord]:
        return [self.records[pid] for pid in self.splits.get(split, ())]


@dataclass(frozen=True)
class PhantomStudy:
    """A generated patient: its record plus the tensors the record refers to."""

    record: StudyRecord
    volumes: Dict[str, VolumeTensor]
    """Preprocessed volumes by scan id."""
    masks: Dict[str, SegMask]
    """Masks by scan id, for `record.seg_scans`."""
    lesion_regions: Dict[Orientation, torch.Tensor]
    """Boolean (K, D, H, W) lesion region maps on the preprocessed grid."""
    raw: Dict[str, torch.Tensor]
    """Raw (1, D_raw, H_raw, W_raw) volumes by scan id."""


@dataclass(frozen=True)
class _Anatomy:
    radii: np.ndarray
    """Ellipsoid radii in the patient frame."""
    offset: np.ndarray
    gain: float
    lesion_centres: np.ndarray
    """(K, 3) lesion centres in (slice, row, column) coordinates."""


def _centres(n: int) -> np.ndarray:
    """Pixel-centre coordinates of `n` samples spanning [-1, 1]."""
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def _draw_anatomy(spec: PhantomSpec, patient_id: str) -> _Anatomy:
    rng = numpy_generator(spec.seed, patient_id, "anatomy")
    scale = rng.uniform(0.92, 1.06)
    radii = np.array([0.95, 0.85, 0.75]) * scale
    offset = rng.uniform(-0.04, 0.04, size=3)
    angles = 2.0 * math.pi * np.arange(spec.n_labels) / spec.n_labels + math.pi / 4.0
    centres = np.stack(
        [np.zeros(spec.n_labels), LESION_RING * np.sin(angles), LESION_RING * np.cos(angles)],
        axis=1,
    )
    centres = centres + rng.uniform(-0.04, 0.04, size=centres.shape)
    return _Anatomy(
        radii=radii, offset=offset, gain=float(rng.uniform(0.9, 1.1)), lesion_centres=centres
    )


def _grid(z: np.ndarray, y: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, ...]:
    return tuple(np.meshgrid(z, y, x, indexing="ij"))


def _radius(grid: Tuple[np.ndarray, ...], anatomy: _Anatomy, o: Orientation) -> np.ndarray:
    axes = _FRAME_AXES[o]
    rho2 = sum(
        ((g - anatomy.offset[a]) / anatomy.radii[a]) ** 2 for g, a in zip(grid, axes)
    )
    return np.sqrt(rho2)


def _structure_ids(rho: np.ndarray, n_structures: int) -> np.ndarray:
    """1 is the outermost shell, S the core; 0 outside `SHELL_OUTER`."""
    band = np.floor(rho / SHELL_OUTER * n_structures).astype(np.int64)
    return np.where(rho < SHELL_OUTER, n_structures - band, 0)


def _lesion_field(grid: Tuple[np.ndarray, ...], centre: np.ndarray) -> np.ndarray:
    d2 = sum((g - c) ** 2 for g, c in zip(grid, centre))
    return np.exp(-d2 / (2.0 * LESION_SIGMA**2))


def home_orientation(label: int) -> Orientation:
    """The orientation in which lesion `label` is fully visible."""
    return ORIENTATIONS[label % len(ORIENTATIONS)]


def lesion_amplitude(spec: PhantomSpec, label: int, orientation: Orientation) -> float:
    visibility = 1.0 if orientation is home_orientation(label) else OFF_HOME_VISIBILITY
    return spec.label_effect_strength * visibility


def _render(
    spec: PhantomSpec,
    anatomy: _Anatomy,
    orientation: Orientation,
    labels: Sequence[int],
    noise_std: float,
    contrast: float,
    rng: np.random.Generator,
) -> np.ndarray:
    d_raw, h_raw, w_raw = spec.raw_shape
    grid = _grid(_centres(d_raw), _centres(h_raw), _centres(w_raw))
    rho = _radius(grid, anatomy, orientation)
    row = grid[1]
    image = 0.15 + 0.35 * np.exp(-2.0 * rho**2) * (1.0 + 0.2 * row)
    image = np.where((rho >= SHELL_OUTER) & (rho < 1.0), RIM_LEVEL, image)
    ids = _structure_ids(rho, spec.n_structures)
    levels = 0.35 + 0.5 * np.arange(spec.n_structures + 1) / spec.n_structures
    image = np.where(ids > 0, levels[ids], image)
    for k, on in enumerate(labels):
        if on:
            amp = lesion_amplitude(spec, k, orientation)
            image = image + amp * _lesion_field(grid, anatomy.lesion_centres[k])
    image = image * anatomy.gain * contrast
    return image + noise_std * rng.standard_normal(image.shape)


def _output_grid(spec: PhantomSpec) -> Tuple[np.ndarray, ...]:
    d, h, w = spec.resolution
    d_raw = spec.raw_shape[0]
    offset = (d_raw - d) // 2
    return _grid(_centres(d_raw)[offset : offset + d], _centres(h), _centres(w))


def _draw_ehr(spec: PhantomSpec, patient_id: str, labels: Sequence[int]) -> EHRRecord:
    rng = numpy_generator(spec.seed, patient_id, "ehr")
    bit = [labels[k % len(labels)] for k in range(3)]
    athlete = rng.random() < 0.25 + 0.35 * bit[0]
    events = list(Event)[:-1]
    p = np.ones(len(events))
    p[events.index(Event.SPORTS)] += 4.0 * athlete
    p[events.index(Event.TRAFFIC)] += 2.0 * bit[2]
    p[events.index(Event.OVERUSE)] += 2.0 * bit[1]
    event = events[int(rng.choice(len(events), p=p / p.sum()))]
    values: Dict[str, Any] = {
        "age": float(np.clip(rng.normal(38.0 + 6.0 * bit[0], 14.0), 14.0, 80.0)),
        "height": float(rng.normal(172.0, 9.0)),
        "weight": float(rng.normal(74.0 + 4.0 * bit[1], 12.0)),
        "sex": Sex.MALE if rng.random() < 0.55 else Sex.FEMALE,
        "patient_type": PatientType.ATHLETE if athlete else PatientType.NON_ATHLETE,
        "event": event,
    }
    missing = rng.random(len(values)) < spec.ehr_missing_rate
    for drop, field in zip(missing, list(values)):
        if drop:
            values[field] = None if field in ("age", "height", "weight") else "UNK"
    return EHRRecord(**values)


def _draw_scan_counts(spec: PhantomSpec, rng: np.random.Generator) -> Dict[Orientation, int]:
    counts = {o: 1 for o in ORIENTATIONS}
    if spec.max_scans_per_orientation > 1 and rng.random() < spec.multi_scan_fraction:
        for o in ORIENTATIONS:
            counts[o] = int(rng.integers(1, spec.max_scans_per_orientation + 1))
        if all(c == 1 for c in counts.values()):
            counts[Orientation.SAGITTAL] = 2
    return counts


def generate_phantom_study(
    spec: PhantomSpec, patient_id: str, force_labels: Sequence[int] | None = None
) -> PhantomStudy:
    """Generate one patient; `force_labels` overrides the drawn label vector."""
    rng = numpy_generator(spec.seed, patient_id, "study")
    if force_labels is None:
        labels = tuple(int(b) for b in rng.random(spec.n_labels) < spec.label_prevalence)
    else:
        labels = tuple(int(b) for b in force_labels)
        if len(labels) != spec.n_labels:
            raise ValidationFailure(f"forced labels must have length {spec.n_labels}")
        rng.random(spec.n_labels)
    counts = _draw_scan_counts(spec, rng)
    site = SITES[int(rng.integers(len(SITES)))]
    field_strength = FIELD_STRENGTHS[int(rng.random() < 0.6)]
    contrast = 1.0 if field_strength == "3.0T" else 0.85
    noise_std = spec.noise_floor * (1.0 if field_strength == "3.0T" else 1.5)

    anatomy = _draw_anatomy(spec, patient_id)
    out_grid = _output_grid(spec)
    rho_out = {o: _radius(out_grid, anatomy, o) for o in ORIENTATIONS}
    regions = {
        o: torch.from_numpy(
            np.stack([_lesion_field(out_grid, c) >= 0.5 for c in anatomy.lesion_centres])
        )
        for o in ORIENTATIONS
    }

    scans: Dict[Orientation, Tuple[str, ...]] = {}
    volumes: Dict[str, VolumeTensor] = {}
    raws: Dict[str, torch.Tensor] = {}
    masks: Dict[str, SegMask] = {}
    for o in ORIENTATIONS:
        ids = tuple(f"{patient_id}_{o.value}_{i}" for i in range(counts[o]))
        scans[o] = ids
        for scan_id in ids:
            scan_rng = numpy_generator(spec.seed, patient_id, scan_id)
            gain = float(scan_rng.uniform(0.97, 1.03))
            image = _render(spec, anatomy, o, labels, noise_std, contrast * gain, scan_rng)
            raw = torch.from_numpy(image).unsqueeze(0)
            raws[scan_id] = raw
            volumes[scan_id] = preprocess_volume(
                raw, spec.profile, orientation=o, study_id=patient_id, scan_id=scan_id
            )
            if o is not Orientation.AXIAL:
                classes = _structure_ids(rho_out[o], spec.n_structures).astype(np.uint8)
                masks[scan_id] = SegMask(torch.from_numpy(classes), spec.n_structures)

    record = StudyRecord(
        patient_id=patient_id,
        scans=scans,
        labels=labels,
        ehr=_draw_ehr(spec, patient_id, labels),
        seg_scans=tuple(masks),
        site=site,
        field_strength=field_strength,
    )
    logger.debug(f"Generated {patient_id} labels={labels} scans={[len(v) for v in scans.values()]}")
    return PhantomStudy(
        record=record, volumes=volumes, masks=masks, lesion_regions=regions, raw=raws
    )


def patient_ids(spec: PhantomSpec) -> List[str]:
    return [f"P{i:04d}" for i in range(spec.n_patients)]


def generate_cohort(spec: PhantomSpec) -> List[PhantomStudy]:
    logger.info(f"Generating {spec.n_patients} phantom patients (seed {spec.seed})")
    return [generate_phantom_study(spec, pid) for pid in patient_ids(spec)]


def preprocess_volume(
    raw: torch.Tensor,
    profile: ResolutionProfile,
    *,
    orientation: Orientation = Orientation.SAGITTAL,
    study_id: str = "raw",
    scan_id: str = "raw",
) -> VolumeTensor:
    """Central-slice crop, per-slice bilinear resize, then min-max to [-1, 1].

    The central window starts at `(D_raw - D) // 2`.  A constant window maps to all
    zeros.
    """
    if raw.dim() != 4 or raw.shape[0] != 1:
        raise ShapeMismatch(f"expected (1, D_raw, H_raw, W_raw), got {tuple(raw.shape)}")
    d_raw = int(raw.shape[1])
    if d_raw < profile.depth:
        raise ShapeMismatch(f"{d_raw} raw slices < profile depth {profile.depth}")
    offset = (d_raw - profile.depth) // 2
    window = raw[0, offset : offset + profile.depth].to(torch.float64)
    if not bool(torch.isfinite(window).all()):
        raise NumericError(f"raw volume {scan_id} has non-finite values")
    slices = F.interpolate(
        window.unsqueeze(1),
        size=(profile.height, profile.width),
        mode="bilinear",
        align_corners=False,
    ).squeeze(1)
    if bool(window.max() > window.min()):
        lo, hi = slices.min(), slices.max()
        data = ((slices - lo) / (hi - lo) * 2.0 - 1.0).clamp(-1.0, 1.0)
    else:
        data = torch.zeros_like(slices)
    return VolumeTensor(
        data=data.to(torch.float32).unsqueeze(0).contiguous(),
        orientation=orientation,
        study_id=study_id,
        scan_id=scan_id,
    )


def _split_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of `n` items."""
    exact = [f * n for f in fractions]
    sizes = [int(math.floor(e + 1e-9)) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_by_patient(
    records: Sequence[StudyRecord], fractions: Tuple[float, float, float], seed: int
) -> DatasetIndex:
    """Shuffle patients with `seed` and cut them into train/val/test."""
    if not records:
        raise ValidationFailure("cannot split an empty record list")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValidationFailure(f"fractions must be three non-negative values, got {fractions}")
    if abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise ValidationFailure(f"fractions must sum to 1, got {fractions}")
    by_id = {r.patient_id: r for r in records}
    if len(by_id) != len(records):
        raise ValidationFailure("patient ids must be unique")
    n_labels = {len(r.labels) for r in records}
    if len(n_labels) != 1:
        raise ValidationFailure(f"records disagree on the number of labels: {sorted(n_labels)}")

    ordered = sorted(by_id)
    perm = numpy_generator(seed, "split").permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    sizes = _split_sizes(len(shuffled), fractions)
    bounds = list(itertools.accumulate(sizes, initial=0))
    splits = {
        split: tuple(shuffled[bounds[i] : bounds[i + 1]])
        for i, split in enumerate((Split.TRAIN, Split.VAL, Split.TEST))
    }
    logger.info(
        f"Split {len(shuffled)} patients into " + "/".join(str(len(v)) for v in splits.values())
    )
    return DatasetIndex(n_labels=n_labels.pop(), splits=splits, records=by_id, seed=seed)


class FusionSample(NamedTuple):
    """One (sagittal, coronal, axial) scan combination of a patient."""

    sagittal: str
    coronal: str
    axial: str
    weight: float


def enumerate_fusion_samples(record: StudyRecord) -> List[FusionSample] | None:
    """All cross-orientation scan combinations, each weighted 1 / count.

    Returns `None` when an orientation has no scan; the caller drops the patient.
    """
    lists = [record.scans.get(o, ()) for o in ORIENTATIONS]
    if any(len(scans) == 0 for scans in lists):
        logger.info(f"Excluding {record.patient_id}: missing orientation")
        return None
    combos = list(itertools.product(*lists))
    weight = 1.0 / len(combos)
    return [FusionSample(s, c, a, weight) for s, c, a in combos]
