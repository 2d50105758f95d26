"""Structured health-record encoding and logit-level late fusion.

A record is encoded to a fixed 17-dimensional vector:

| slots  | content                                                        |
|--------|----------------------------------------------------------------|
| 0..2   | z-scored age, height, weight (0 when missing)                  |
| 3..5   | sex one-hot in the order (male, female, UNK)                   |
| 6..8   | patient type one-hot in the order (athlete, non_athlete, UNK)  |
| 9..16  | learned 8-dimensional embedding of the injury-inducing event   |

The z-score statistics must come from the training split only; `EHRStats.fit()`
is the single place they are computed.

MRI and health-record logits are combined per label with a learned convex weight
`gamma = sigmoid(w)`: `z = gamma * z_mri + (1 - gamma) * z_ehr`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum, unique
from pathlib import Path
from typing import Dict, Final, Iterable, List, Mapping, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from planediff.exceptions import ConfigurationError, ShapeMismatch, ValidationFailure

logger: Final = logging.getLogger(__name__)

CONTINUOUS_FIELDS: Final = ("age", "height", "weight")
EVENT_DIM: Final = 8
FEATURE_DIM: Final = 3 + 3 + 3 + EVENT_DIM
HIDDEN_DIM: Final = 64
CSV_HEADER: Final = ("patient_id", "age", "height", "weight", "sex", "patient_type", "event")


@unique
class Sex(str, Enum):
    MALE = "male"
    FEMALE = "female"
    UNK = "UNK"


@unique
class PatientType(str, Enum):
    ATHLETE = "athlete"
    NON_ATHLETE = "non_athlete"
    UNK = "UNK"


@unique
class Event(str, Enum):
    """Injury-inducing event; the row index of the embedding table is the order here."""

    OVERUSE = "overuse"
    TRAFFIC = "traffic"
    DUTY = "duty"
    DAILY_LIFE = "daily_life"
    SPORTS = "sports"
    SPONTANEOUS = "spontaneous"
    ACTOR = "actor"
    OTHER = "other"
    UNK = "UNK"

    @property
    def index(self) -> int:
        return list(Event).index(self)


SEX_ORDER: Final = (Sex.MALE, Sex.FEMALE, Sex.UNK)
PATIENT_TYPE_ORDER: Final = (PatientType.ATHLETE, PatientType.NON_ATHLETE, PatientType.UNK)


class EHRRecord(BaseModel):
    """The health-record attributes of one patient."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    age: float | None = None
    """Age in years."""
    height: float | None = None
    """Height in cm."""
    weight: float | None = None
    """Weight in kg."""
    sex: Sex = Sex.UNK
    patient_type: PatientType = PatientType.UNK
    event: Event = Event.UNK


class EHRStats(BaseModel):
    """Training-split mean and standard deviation of each continuous field."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mean: Tuple[float, float, float]
    std: Tuple[float, float, float] = Field(description="floored at 1e-6")

    @classmethod
    def fit(cls, records: Iterable[EHRRecord]) -> EHRStats:
        """Compute the statistics; call with training-split records only."""
        columns: Dict[str, List[float]] = {f: [] for f in CONTINUOUS_FIELDS}
        for r in records:
            for f in CONTINUOUS_FIELDS:
                v = getattr(r, f)
                if v is not None:
                    columns[f].append(float(v))
        mean: List[float] = []
        std: List[float] = []
        for f in CONTINUOUS_FIELDS:
            values = columns[f]
            if not values:
                logger.warning(f"No training values for {f}; it will encode as 0")
                mean.append(0.0)
                std.append(1.0)
                continue
            m = math.fsum(values) / len(values)
            var = math.fsum((v - m) ** 2 for v in values) / len(values)
            mean.append(m)
            std.append(max(math.sqrt(var), 1e-6))
        return cls(mean=(mean[0], mean[1], mean[2]), std=(std[0], std[1], std[2]))


@dataclass(frozen=True)
class EHRFeature:
    """An encoded record; `vector` has length 17."""

    vector: torch.Tensor

    def __post_init__(self) -> None:
        if self.vector.shape[-1] != FEATURE_DIM:
            raise ShapeMismatch(f"EHR feature must have {FEATURE_DIM} entries")
        for block in (self.sex, self.patient_type):
            if not torch.allclose(block.sum(-1), torch.ones_like(block.sum(-1))):
                raise ValidationFailure("one-hot block does not sum to 1")

    @property
    def continuous(self) -> torch.Tensor:
        return self.vector[..., 0:3]

    @property
    def sex(self) -> torch.Tensor:
        return self.vector[..., 3:6]

    @property
    def patient_type(self) -> torch.Tensor:
        return self.vector[..., 6:9]

    @property
    def event(self) -> torch.Tensor:
        return self.vector[..., 9:FEATURE_DIM]


def _fixed_part(rec: EHRRecord, stats: EHRStats) -> List[float]:
    values: List[float] = []
    for i, f in enumerate(CONTINUOUS_FIELDS):
        v = getattr(rec, f)
        values.append(0.0 if v is None else (float(v) - stats.mean[i]) / stats.std[i])
    values.extend(1.0 if rec.sex is s else 0.0 for s in SEX_ORDER)
    values.extend(1.0 if rec.patient_type is p else 0.0 for p in PATIENT_TYPE_ORDER)
    return values


class EHREncoder(nn.Module):
    """Owns the trainable event embedding table (8 events plus UNK)."""

    def __init__(self, stats: EHRStats) -> None:
        super().__init__()
        self.stats = stats
        self.event_embedding = nn.Embedding(len(Event), EVENT_DIM)
        with torch.no_grad():
            self.event_embedding.weight.normal_(0.0, 1.0).mul_(0.1)

    def forward(self, records: Sequence[EHRRecord]) -> torch.Tensor:
        weight = self.event_embedding.weight
        fixed = torch.tensor(
            [_fixed_part(r, self.stats) for r in records], dtype=weight.dtype, device=weight.device
        )
        events = torch.tensor([r.event.index for r in records], device=weight.device)
        return torch.cat([fixed, self.event_embedding(events)], dim=-1)


def encode_ehr(rec: EHRRecord, stats: EHRStats, encoder: EHREncoder) -> EHRFeature:
    """Encode one record with training-split `stats` and the encoder's embedding table."""
    if encoder.stats != stats:
        raise ConfigurationError("encoder was built with different statistics")
    return EHRFeature(vector=encoder([rec])[0])


class EHRHead(nn.Module):
    """17 -> 64 -> ReLU -> LayerNorm -> Dropout(0.2) -> K."""

    def __init__(self, n_labels: int, dropout: float = 0.2) -> None:
        super().__init__()
        self.n_labels = n_labels
        self.net = nn.Sequential(
            nn.Linear(FEATURE_DIM, HIDDEN_DIM),
            nn.ReLU(),
            nn.LayerNorm(HIDDEN_DIM),
            nn.Dropout(dropout),
            nn.Linear(HIDDEN_DIM, n_labels),
        )

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[-1] != FEATURE_DIM:
            raise ConfigurationError(f"EHR head expects {FEATURE_DIM} inputs, got {feat.shape[-1]}")
        return self.net(feat)


def ehr_head(feat: EHRFeature, head: EHRHead) -> torch.Tensor:
    """K logits; call `head.eval()` first for the deterministic evaluation path."""
    return head(feat.vector)


class FusionGamma(nn.Module):
    """Per-label fusion weights `gamma = sigmoid(w)`, `w` initialized to 0."""

    def __init__(self, n_labels: int) -> None:
        super().__init__()
        self.w = nn.Parameter(torch.zeros(n_labels))

    @property
    def gamma(self) -> torch.Tensor:
        return torch.sigmoid(self.w)

    def forward(self, z_mri: torch.Tensor, z_ehr: torch.Tensor) -> torch.Tensor:
        return late_fuse(z_mri, z_ehr, self.gamma)


def late_fuse(z_mri: torch.Tensor, z_ehr: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    """Per-label convex combination of MRI and EHR logits."""
    if z_mri.shape != z_ehr.shape or z_mri.shape[-1] != gamma.shape[-1]:
        raise ShapeMismatch(
            f"z_mri {tuple(z_mri.shape)}, z_ehr {tuple(z_ehr.shape)}, gamma {tuple(gamma.shape)}"
        )
    return gamma * z_mri + (1.0 - gamma) * z_ehr


def _cell(value: str) -> float | None:
    return float(value) if value.strip() else None


def read_ehr_csv(path: Path) -> Dict[str, EHRRecord]:
    """Read `patient_id,age,height,weight,sex,patient_type,event`; empty cells are missing."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValidationFailure(f"{path} header must be {','.join(CSV_HEADER)}")
        return {
            row["patient_id"]: EHRRecord(
                age=_cell(row["age"]),
                height=_cell(row["height"]),
                weight=_cell(row["weight"]),
                sex=Sex(row["sex"] or Sex.UNK),
                patient_type=PatientType(row["patient_type"] or PatientType.UNK),
                event=Event(row["event"] or Event.UNK),
            )
            for row in reader
        }


def write_ehr_csv(path: Path, records: Mapping[str, EHRRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for pid in sorted(records):
            r = records[pid]
            writer.writerow(
                [
                    pid,
                    "" if r.age is None else repr(r.age),
                    "" if r.height is None else repr(r.height),
                    "" if r.weight is None else repr(r.weight),
                    r.sex.value,
                    r.patient_type.value,
                    r.event.value,
                ]
            )
