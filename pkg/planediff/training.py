"""Two-stage training on frozen or fine-tuned diffusion features.

Stage 1 trains, per orientation and tap, a pooling module and a linear
classifier on the bottleneck activations of that orientation's denoiser.  In
the linear-probing setting (LP) the denoiser is frozen; in the fine-tuning
setting (FT) its encoder, bottleneck and timestep MLP are updated as well while
the decoder stays fixed.  Stage 2 freezes everything from stage 1 and trains
only a fusion module and its head over every cross-orientation scan
combination of a patient, each weighted by the reciprocal of the patient's
combination count.  At inference a patient's probability is the mean of the
sigmoid outputs over its combinations.

Freeze contracts are checked with parameter checksums; a changed checksum
raises `FreezeViolation`.

Every optimizer is Adam with cosine annealing over all steps of the run.  Every
random draw (initial weights, batch order, dropout) is derived from the plan
seed.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from enum import Enum, unique
from pathlib import Path
from typing import Callable, Collection, Dict, Final, Iterable, List, Mapping, Sequence, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from planediff.dataset import StudyStore
from planediff.denoiser import (
    CHECKPOINT_MANIFEST,
    CheckpointManifest,
    ParamGroup,
    UNet3D,
    group_checksums,
    load_checkpoint,
    parameter_checksum,
)
from planediff.diffusion import NoiseSchedule
from planediff.ehr import EHREncoder, EHRHead, EHRRecord, EHRStats, FusionGamma, late_fuse
from planediff.exceptions import (
    ConfigurationError,
    DivergedLoss,
    FreezeViolation,
    ShapeMismatch,
    ValidationFailure,
)
from planediff.feature_tap import FeatureCache, TapPoint, extract_batch
from planediff.fusion import (
    ExpertLogits,
    FeatureFusion,
    FusionStrategy,
    GateWeights,
    MPAEGate,
    build_fusion,
    mpae_fuse,
)
from planediff.heads import ClassifierHead, SegHead, segmentation_loss, weighted_bce
from planediff.metrics import DEFAULT_THRESHOLD, MetricReport, classification_report, mean_dice
from planediff.pooling import Pooling, PoolingMethod, build_pooling
from planediff.seeding import numpy_generator, seeded, torch_generator
from planediff.synth_data import FusionSample, Split, StudyRecord, enumerate_fusion_samples
from planediff.volume import ORIENTATIONS, Orientation, VolumeTensor

logger: Final = logging.getLogger(__name__)

EMBED_CHUNK: Final = 16
MPAE_FOLDS: Final = 5
FT_LR_SCALE: Final = 0.05
"""Fine-tuning runs at this fraction of the linear-probing learning rate."""


@unique
class Stage(str, Enum):
    STAGE1_LP = "stage1_LP"
    STAGE1_FT = "stage1_FT"
    STAGE2_FUSION = "stage2_fusion"
    SEG_FT = "seg_FT"
    MPAE_GATE = "mpae_gate"
    EHR_ONLY = "ehr_only"
    EHR_JOINT = "ehr_joint"


@unique
class Setting(str, Enum):
    LP = "LP"
    FT = "FT"

    @property
    def stage(self) -> Stage:
        return Stage.STAGE1_LP if self is Setting.LP else Stage.STAGE1_FT


STAGE_DEFAULTS: Final[Dict[Stage, Tuple[int, float, float]]] = {
    Stage.STAGE1_LP: (10, 5e-4, 0.0),
    Stage.STAGE1_FT: (5, 5e-4 * FT_LR_SCALE, 0.0),
    Stage.STAGE2_FUSION: (5, 5e-5, 0.0),
    Stage.SEG_FT: (30, 1e-3, 0.0),
    Stage.MPAE_GATE: (10, 1e-3, 1e-4),
    Stage.EHR_ONLY: (3, 5e-5, 0.0),
    Stage.EHR_JOINT: (10, 1e-5, 0.0),
}
"""(epochs, learning rate, weight decay) of each stage."""


class TrainPlan(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    stage: Stage
    epochs: int = Field(gt=0)
    lr: float = Field(gt=0.0)
    seed: int = 0
    label_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    """Fraction of training patients used, as a nested subset."""
    batch_size: int = Field(default=8, gt=0)
    weight_decay: float = Field(default=0.0, ge=0.0)

    @classmethod
    def for_stage(cls, stage: Stage, **overrides: object) -> TrainPlan:
        epochs, lr, weight_decay = STAGE_DEFAULTS[stage]
        values: Dict[str, object] = {
            "stage": stage,
            "epochs": epochs,
            "lr": lr,
            "weight_decay": weight_decay,
        }
        values.update(overrides)
        return cls.model_validate(values)


class CosineAdam:
    """Adam stepped under a cosine-annealed learning rate; raises on a non-finite loss."""

    def __init__(self, params: Iterable[nn.Parameter], plan: TrainPlan, steps: int) -> None:
        self.optimizer = torch.optim.Adam(
            list(params), lr=plan.lr, weight_decay=plan.weight_decay
        )
        self.schedule = torch.optim.lr_scheduler.CosineAnnealingLR(
            self.optimizer, T_max=max(1, steps)
        )
        self.steps = 0

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def step(self, loss: torch.Tensor) -> float:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergedLoss(self.steps, self.lr, value)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.schedule.step()
        self.steps += 1
        return value


def fit(
    plan: TrainPlan,
    n: int,
    params: Sequence[nn.Parameter],
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    what: str,
) -> List[float]:
    """Run `plan.epochs` epochs of shuffled minibatches over `n` samples.

    `loss_fn` maps a tensor of sample indices to the batch loss.  Returns the
    sample-averaged loss of every epoch.
    """
    if n == 0:
        raise ValidationFailure(f"{what}: no training samples")
    steps_per_epoch = math.ceil(n / plan.batch_size)
    opt = CosineAdam(params, plan, plan.epochs * steps_per_epoch)
    g = torch_generator(plan.seed, plan.stage.value, what, "batches")
    losses: List[float] = []
    logger.info(
        f"Training {what}: {n} samples, {plan.epochs} epochs,"
        f" lr {plan.lr:g}, batch {plan.batch_size}"
    )
    with seeded(plan.seed, plan.stage.value, what, "dropout"):
        for epoch in range(plan.epochs):
            total = 0.0
            for index in torch.randperm(n, generator=g).split(plan.batch_size):
                total += opt.step(loss_fn(index)) * len(index)
            losses.append(total / n)
            logger.info(f"{what} epoch {epoch + 1}/{plan.epochs}: loss {losses[-1]:.4f}")
    return losses


def label_matrix(records: Sequence[StudyRecord]) -> torch.Tensor:
    """(N, K) float labels."""
    return torch.tensor([r.labels for r in records], dtype=torch.float32)


def patient_subset(
    records: Sequence[StudyRecord], fraction: float, seed: int
) -> List[StudyRecord]:
    """The first `ceil(fraction * n)` patients (at least one) of a seeded shuffle.

    The shuffle does not depend on `fraction`, so the subset for a smaller
    fraction is contained in the subset for a larger one.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationFailure(f"label fraction must lie in (0, 1], got {fraction}")
    ordered = sorted(records, key=lambda r: r.patient_id)
    if not ordered:
        return []
    order = numpy_generator(seed, "label-fraction").permutation(len(ordered))
    n = max(1, math.ceil(fraction * len(ordered) - 1e-9))
    chosen = [ordered[i] for i in order[:n]]
    if fraction < 1.0:
        logger.info(f"Using {n} of {len(ordered)} training patients (fraction {fraction:g})")
    labels = label_matrix(chosen)
    for k in torch.nonzero(labels.sum(0) == 0).flatten().tolist():
        logger.warning(f"Label {k} has no positive example among the {n} training patients")
    return chosen


def patient_mean(values: torch.Tensor, patient: torch.Tensor, n: int) -> torch.Tensor:
    """Average rows of `values` per patient index."""
    total = torch.zeros((n, *values.shape[1:]), dtype=values.dtype).index_add_(0, patient, values)
    counts = torch.bincount(patient, minlength=n).to(values.dtype)
    return total / counts.reshape(-1, *([1] * (values.dim() - 1)))


def _chunks(volumes: Sequence[VolumeTensor]) -> List[Sequence[VolumeTensor]]:
    return [volumes[i : i + EMBED_CHUNK] for i in range(0, len(volumes), EMBED_CHUNK)]


def module_checksum(modules: Mapping[str, nn.Module]) -> str:
    return parameter_checksum(
        (f"{name}.{k}", p) for name, m in modules.items() for k, p in m.named_parameters()
    )


@dataclass(frozen=True)
class PatientPredictions:
    """Per-patient probabilities (N, K) with their ground truth."""

    patient_ids: Tuple[str, ...]
    probs: torch.Tensor
    truth: torch.Tensor

    def __post_init__(self) -> None:
        if self.probs.shape != self.truth.shape or self.probs.shape[0] != len(self.patient_ids):
            raise ShapeMismatch(
                f"{len(self.patient_ids)} patients, probs {tuple(self.probs.shape)},"
                f" truth {tuple(self.truth.shape)}"
            )

    def restrict(self, patient_ids: Collection[str]) -> PatientPredictions:
        keep = [i for i, pid in enumerate(self.patient_ids) if pid in patient_ids]
        return PatientPredictions(
            tuple(self.patient_ids[i] for i in keep), self.probs[keep], self.truth[keep]
        )

    def report(self, threshold: float = DEFAULT_THRESHOLD) -> MetricReport:
        return classification_report(self.probs, self.truth, threshold)


def load_backbone(root: Path) -> Tuple[UNet3D, CheckpointManifest]:
    """Load a pretrained denoiser; a missing checkpoint is a configuration error."""
    if not (root / CHECKPOINT_MANIFEST).is_file():
        raise ConfigurationError(f"no pretrained denoiser checkpoint at {root}")
    return load_checkpoint(root)


def _check_unchanged(
    before: Mapping[ParamGroup, str], model: UNet3D, groups: Iterable[ParamGroup]
) -> None:
    after = group_checksums(model)
    changed = [g.value for g in groups if after[g] != before[g]]
    if changed:
        raise FreezeViolation(f"frozen denoiser groups changed: {', '.join(changed)}")


@dataclass
class Stage1Result:
    """A trained per-orientation classifier on one tap."""

    orientation: Orientation
    tap: TapPoint
    setting: Setting
    denoiser: UNet3D
    pooling: Pooling
    head: ClassifierHead
    sched: NoiseSchedule
    noise_seed: int
    losses: List[float] = field(default_factory=list)

    def modules(self) -> Dict[str, nn.Module]:
        return {"denoiser": self.denoiser, "pooling": self.pooling, "head": self.head}

    def checksum(self) -> str:
        return module_checksum(self.modules())

    @property
    def width(self) -> int:
        return self.head.in_dim

    @torch.no_grad()
    def embed(self, volumes: Sequence[VolumeTensor]) -> torch.Tensor:
        """Pooled embeddings (B, P) of `volumes`."""
        for m in self.modules().values():
            m.eval()
        return torch.cat(
            [
                self.pooling(
                    extract_batch(self.denoiser, chunk, self.tap, self.sched, self.noise_seed)
                )
                for chunk in _chunks(volumes)
            ]
        )

    @torch.no_grad()
    def logits(self, volumes: Sequence[VolumeTensor]) -> torch.Tensor:
        return self.head(self.embed(volumes))

    def predict(self, store: StudyStore, records: Sequence[StudyRecord]) -> PatientPredictions:
        """Per patient, the mean probability over its scans of this orientation."""
        kept = [r for r in records if r.scans.get(self.orientation)]
        if not kept:
            raise ValidationFailure(f"no {self.orientation.value} scans to predict")
        scans = [(i, s) for i, r in enumerate(kept) for s in r.scans[self.orientation]]
        probs = torch.sigmoid(self.logits([store.volume(s) for _, s in scans]))
        patient = torch.tensor([i for i, _ in scans])
        return PatientPredictions(
            tuple(r.patient_id for r in kept),
            patient_mean(probs, patient, len(kept)),
            label_matrix(kept),
        )


@torch.no_grad()
def frozen_features(
    model: UNet3D,
    volumes: Sequence[VolumeTensor],
    tap: TapPoint,
    sched: NoiseSchedule,
    noise_seed: int,
    cache: FeatureCache | None = None,
) -> torch.Tensor:
    """Stacked tap activations of a frozen denoiser, read through `cache` when given."""
    if cache is not None:
        if cache.noise_seed != noise_seed:
            raise ConfigurationError(f"cache noise seed {cache.noise_seed} != {noise_seed}")
        return torch.stack([cache.get(model, v, tap, sched).data for v in volumes])
    return torch.cat(
        [extract_batch(model, chunk, tap, sched, noise_seed) for chunk in _chunks(volumes)]
    )


def train_stage1(
    store: StudyStore,
    orientation: Orientation,
    tap: TapPoint,
    setting: Setting,
    plan: TrainPlan,
    denoiser: UNet3D,
    sched: NoiseSchedule,
    noise_seed: int,
    pooling: PoolingMethod = PoolingMethod.SAP,
    cache: FeatureCache | None = None,
) -> Stage1Result:
    """Train pooling and head (LP), or pooling, head and encoder/bottleneck (FT).

    LP leaves `denoiser` untouched.  FT trains a copy and leaves its decoder
    unchanged.
    """
    tap.check(sched)
    records = patient_subset(store.records(Split.TRAIN), plan.label_fraction, plan.seed)
    scans = [(s, r) for r in records for s in r.scans.get(orientation, ())]
    if not scans:
        raise ValidationFailure(f"no {orientation.value} training scans")
    volumes = [store.volume(s) for s, _ in scans]
    target = label_matrix([r for _, r in scans])

    model = denoiser if setting is Setting.LP else copy.deepcopy(denoiser)
    channels = model.config.bottleneck_channels
    with seeded(plan.seed, "stage1", orientation.value, str(tap), setting.value):
        pool = build_pooling(pooling, channels)
        head = ClassifierHead(pooling.output_dim(channels), store.index.n_labels)
    before = group_checksums(model)
    what = f"{setting.value} {orientation.value} {tap} {pooling.value}"

    if setting is Setting.LP:
        feats = frozen_features(model, volumes, tap, sched, noise_seed, cache)
        params = [*pool.parameters(), *head.parameters()]

        def loss_fn(index: torch.Tensor) -> torch.Tensor:
            return F.binary_cross_entropy_with_logits(head(pool(feats[index])), target[index])

        frozen: Tuple[ParamGroup, ...] = tuple(ParamGroup)
    else:
        for p in model.group_parameters(ParamGroup.DECODER):
            p.requires_grad_(False)
        backbone = model.group_parameters(
            ParamGroup.ENCODER, ParamGroup.BOTTLENECK, ParamGroup.TIME_EMBED
        )
        params = [*backbone, *pool.parameters(), *head.parameters()]
        model.train()

        def loss_fn(index: torch.Tensor) -> torch.Tensor:
            batch = [volumes[i] for i in index.tolist()]
            feats = extract_batch(model, batch, tap, sched, noise_seed)
            return F.binary_cross_entropy_with_logits(head(pool(feats)), target[index])

        frozen = (ParamGroup.DECODER,)

    pool.train()
    head.train()
    losses = fit(plan, len(volumes), params, loss_fn, what)
    _check_unchanged(before, model, frozen)
    result = Stage1Result(orientation, tap, setting, model, pool, head, sched, noise_seed, losses)
    for m in result.modules().values():
        m.eval()
    return result


def _require_orientations(stage1: Mapping[Orientation, Stage1Result]) -> None:
    missing = [o.value for o in ORIENTATIONS if o not in stage1]
    if missing:
        raise ConfigurationError(f"stage-1 results missing for {', '.join(missing)}")
    widths = {r.width for r in stage1.values()}
    if len(widths) != 1:
        raise ConfigurationError(f"stage-1 embedding widths differ: {sorted(widths)}")


def _verify_frozen(
    stage1: Mapping[Orientation, Stage1Result], before: Mapping[Orientation, str]
) -> None:
    for o, r in stage1.items():
        if r.checksum() != before[o]:
            raise FreezeViolation(f"stage-1 {o.value} parameters changed during stage 2")


@dataclass(frozen=True)
class FusionTuples:
    """Every cross-orientation scan combination of a set of patients.

    Embeddings are held once per distinct scan in `tables`; `rows[o]` picks the
    table row of orientation `o` for each of the M combinations.
    """

    patient_ids: Tuple[str, ...]
    tables: Dict[Orientation, torch.Tensor]
    """(n_o, P) embedding of each distinct scan."""
    table_patient: Dict[Orientation, torch.Tensor]
    rows: Dict[Orientation, torch.Tensor]
    patient: torch.Tensor
    """(M,) patient index of each combination."""
    weight: torch.Tensor
    """(M,) float64 inverse-frequency weights."""
    labels: torch.Tensor
    """(N, K) labels per patient."""

    def __len__(self) -> int:
        return int(self.patient.numel())

    @property
    def target(self) -> torch.Tensor:
        return self.labels[self.patient]

    def embeddings(
        self, orientation: Orientation, index: torch.Tensor | None = None
    ) -> torch.Tensor:
        rows = self.rows[orientation] if index is None else self.rows[orientation][index]
        return self.tables[orientation][rows]

    def triple(
        self, index: torch.Tensor | None = None
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        sag, cor, ax = (self.embeddings(o, index) for o in ORIENTATIONS)
        return sag, cor, ax

    def check_weights(self) -> None:
        """Every patient's combination weights sum to 1."""
        sums = torch.zeros(len(self.patient_ids), dtype=torch.float64).index_add_(
            0, self.patient, self.weight
        )
        if not torch.allclose(sums, torch.ones_like(sums), rtol=0.0, atol=1e-9):
            raise ValidationFailure("per-patient combination weights do not sum to 1")

    def patient_mean(self, values: torch.Tensor) -> torch.Tensor:
        return patient_mean(values, self.patient, len(self.patient_ids))


def fusion_tuples(
    stage1: Mapping[Orientation, Stage1Result],
    store: StudyStore,
    records: Sequence[StudyRecord],
) -> FusionTuples:
    """Embed every scan once with its stage-1 model and enumerate the combinations."""
    _require_orientations(stage1)
    patients: List[StudyRecord] = []
    samples: List[List[FusionSample]] = []
    excluded: List[str] = []
    for r in records:
        s = enumerate_fusion_samples(r)
        if s is None:
            excluded.append(r.patient_id)
            continue
        patients.append(r)
        samples.append(s)
    if excluded:
        logger.warning(
            f"Excluded {len(excluded)} patient(s) missing an orientation: {', '.join(excluded)}"
        )
    if not patients:
        raise ValidationFailure("no patient has scans in all three orientations")

    tables: Dict[Orientation, torch.Tensor] = {}
    table_patient: Dict[Orientation, torch.Tensor] = {}
    rows: Dict[Orientation, torch.Tensor] = {}
    for o in ORIENTATIONS:
        scan_row: Dict[str, int] = {}
        owners: List[int] = []
        for i, r in enumerate(patients):
            for scan_id in r.scans[o]:
                scan_row[scan_id] = len(owners)
                owners.append(i)
        tables[o] = stage1[o].embed([store.volume(s) for s in scan_row])
        table_patient[o] = torch.tensor(owners)
        rows[o] = torch.tensor([scan_row[c[o.index]] for ss in samples for c in ss])
    return FusionTuples(
        patient_ids=tuple(r.patient_id for r in patients),
        tables=tables,
        table_patient=table_patient,
        rows=rows,
        patient=torch.tensor([i for i, ss in enumerate(samples) for _ in ss]),
        weight=torch.tensor([c.weight for ss in samples for c in ss], dtype=torch.float64),
        labels=label_matrix(patients),
    )


@dataclass
class FusionResult:
    """Feature-level fusion and its linear head on frozen stage-1 embeddings."""

    strategy: FusionStrategy
    stage1: Dict[Orientation, Stage1Result]
    fusion: FeatureFusion
    head: ClassifierHead
    losses: List[float] = field(default_factory=list)

    def logits(self, t: FusionTuples, index: torch.Tensor | None = None) -> torch.Tensor:
        return self.head(self.fusion(*t.triple(index)))

    @torch.no_grad()
    def predict(self, store: StudyStore, records: Sequence[StudyRecord]) -> PatientPredictions:
        self.fusion.eval()
        self.head.eval()
        t = fusion_tuples(self.stage1, store, records)
        return PatientPredictions(
            t.patient_ids, t.patient_mean(torch.sigmoid(self.logits(t))), t.labels
        )


def train_stage2_fusion(
    stage1: Mapping[Orientation, Stage1Result],
    store: StudyStore,
    strategy: FusionStrategy,
    plan: TrainPlan,
    embed_dim: int | None = None,
) -> FusionResult:
    """Train a feature-level fusion module and head; stage-1 parameters stay frozen."""
    if not strategy.feature_level:
        raise ConfigurationError(f"{strategy.value} is trained with train_mpae")
    _require_orientations(stage1)
    before = {o: r.checksum() for o, r in stage1.items()}
    records = patient_subset(store.records(Split.TRAIN), plan.label_fraction, plan.seed)
    t = fusion_tuples(stage1, store, records)
    t.check_weights()
    width = stage1[Orientation.SAGITTAL].width
    with seeded(plan.seed, "stage2", strategy.value):
        fusion = build_fusion(strategy, width, embed_dim or width)
        head = ClassifierHead(fusion.out_dim, store.index.n_labels)
    result = FusionResult(strategy, dict(stage1), fusion, head)
    target = t.target
    weight = t.weight.to(torch.float32)
    mean_weight = float(t.weight.mean())

    def loss_fn(index: torch.Tensor) -> torch.Tensor:
        return weighted_bce(result.logits(t, index), target[index], weight[index], mean_weight)

    fusion.train()
    head.train()
    params = [*fusion.parameters(), *head.parameters()]
    result.losses = fit(plan, len(t), params, loss_fn, f"fusion {strategy.value}")
    fusion.eval()
    head.eval()
    _verify_frozen(stage1, before)
    return result


def _train_expert(
    emb: torch.Tensor, target: torch.Tensor, plan: TrainPlan, what: str
) -> ClassifierHead:
    with seeded(plan.seed, "expert", what):
        head = ClassifierHead(emb.shape[-1], target.shape[-1])

    def loss_fn(index: torch.Tensor) -> torch.Tensor:
        return F.binary_cross_entropy_with_logits(head(emb[index]), target[index])

    fit(plan, emb.shape[0], list(head.parameters()), loss_fn, f"expert {what}")
    head.eval()
    return head


@dataclass
class MPAEResult:
    """Orientation expert heads and the per-label gate combining their logits."""

    stage1: Dict[Orientation, Stage1Result]
    experts: Dict[Orientation, ClassifierHead]
    gate: MPAEGate
    losses: List[float] = field(default_factory=list)

    @torch.no_grad()
    def expert_logits(self, t: FusionTuples) -> torch.Tensor:
        """(M, 3, K)."""
        return torch.stack([self.experts[o](t.embeddings(o)) for o in ORIENTATIONS], dim=-2)

    @torch.no_grad()
    def _forward(self, t: FusionTuples) -> Tuple[torch.Tensor, torch.Tensor]:
        self.gate.eval()
        z = ExpertLogits(self.expert_logits(t))
        alpha = GateWeights(self.gate(z.z))
        return mpae_fuse(z, alpha), alpha.alpha

    def predict(self, store: StudyStore, records: Sequence[StudyRecord]) -> PatientPredictions:
        t = fusion_tuples(self.stage1, store, records)
        fused, _ = self._forward(t)
        return PatientPredictions(t.patient_ids, t.patient_mean(torch.sigmoid(fused)), t.labels)

    def gate_weights(
        self, store: StudyStore, records: Sequence[StudyRecord]
    ) -> List[Tuple[str, GateWeights]]:
        """Per patient, the gate weights averaged over its combinations."""
        t = fusion_tuples(self.stage1, store, records)
        _, alpha = self._forward(t)
        mean = t.patient_mean(alpha.to(torch.float64))
        return [(pid, GateWeights(mean[i])) for i, pid in enumerate(t.patient_ids)]


def _fold_of(n: int, folds: int, seed: int) -> torch.Tensor:
    order = numpy_generator(seed, "mpae-folds").permutation(n)
    fold = torch.empty(n, dtype=torch.long)
    fold[torch.from_numpy(order)] = torch.arange(n) % folds
    return fold


def train_mpae(
    stage1: Mapping[Orientation, Stage1Result],
    store: StudyStore,
    plan: TrainPlan,
    gate_plan: TrainPlan,
    folds: int = MPAE_FOLDS,
) -> MPAEResult:
    """Cross-fitted orientation experts, then a gate trained on their out-of-fold logits.

    Each expert is a linear head on the frozen stage-1 embeddings of its
    orientation.  The gate sees, for every training combination, logits from
    experts that never saw that patient; the returned experts are refit on all
    training patients.
    """
    _require_orientations(stage1)
    before = {o: r.checksum() for o, r in stage1.items()}
    records = patient_subset(store.records(Split.TRAIN), plan.label_fraction, plan.seed)
    t = fusion_tuples(stage1, store, records)
    t.check_weights()
    n = len(t.patient_ids)
    folds = min(folds, n)
    if folds < 2:
        raise ValidationFailure(f"cross-fitting needs at least 2 patients, got {n}")
    fold = _fold_of(n, folds, plan.seed)

    oof: Dict[Orientation, torch.Tensor] = {}
    for o in ORIENTATIONS:
        emb = t.tables[o]
        target = t.labels[t.table_patient[o]]
        scan_fold = fold[t.table_patient[o]]
        oof[o] = torch.zeros(emb.shape[0], t.labels.shape[1])
        for f in range(folds):
            held = scan_fold == f
            expert = _train_expert(emb[~held], target[~held], plan, f"{o.value} fold {f}")
            with torch.no_grad():
                oof[o][held] = expert(emb[held])
    z = torch.stack([oof[o][t.rows[o]] for o in ORIENTATIONS], dim=-2)
    ExpertLogits(z)

    with seeded(gate_plan.seed, "mpae-gate"):
        gate = MPAEGate(t.labels.shape[1])
    target = t.target
    weight = t.weight.to(torch.float32)
    mean_weight = float(t.weight.mean())

    def loss_fn(index: torch.Tensor) -> torch.Tensor:
        fused = (gate(z[index]) * z[index]).sum(dim=-2)
        return weighted_bce(fused, target[index], weight[index], mean_weight)

    gate.train()
    losses = fit(gate_plan, len(t), list(gate.parameters()), loss_fn, "MPAE gate")
    gate.eval()

    experts = {
        o: _train_expert(t.tables[o], t.labels[t.table_patient[o]], plan, o.value)
        for o in ORIENTATIONS
    }
    _verify_frozen(stage1, before)
    return MPAEResult(dict(stage1), experts, gate, losses)


def ehr_records(store: StudyStore, records: Sequence[StudyRecord]) -> List[EHRRecord]:
    """The health record of each patient; a patient without one encodes as all unknown."""
    table = store.ehr()
    missing = [r.patient_id for r in records if r.patient_id not in table]
    if missing:
        logger.info(f"{len(missing)} patient(s) have no health record")
    return [table.get(r.patient_id, EHRRecord()) for r in records]


@dataclass
class EHRResult:
    """The health-record-only baseline."""

    encoder: EHREncoder
    head: EHRHead
    losses: List[float] = field(default_factory=list)

    def logits(self, recs: Sequence[EHRRecord]) -> torch.Tensor:
        return self.head(self.encoder(recs))

    @torch.no_grad()
    def predict(self, store: StudyStore, records: Sequence[StudyRecord]) -> PatientPredictions:
        self.head.eval()
        probs = torch.sigmoid(self.logits(ehr_records(store, records)))
        ids = tuple(r.patient_id for r in records)
        return PatientPredictions(ids, probs, label_matrix(records))


def train_ehr_only(store: StudyStore, plan: TrainPlan) -> EHRResult:
    records = patient_subset(store.records(Split.TRAIN), plan.label_fraction, plan.seed)
    recs = ehr_records(store, records)
    with seeded(plan.seed, "ehr-only"):
        encoder = EHREncoder(EHRStats.fit(recs))
        head = EHRHead(store.index.n_labels)
    result = EHRResult(encoder, head)
    target = label_matrix(records)

    def loss_fn(index: torch.Tensor) -> torch.Tensor:
        batch = [recs[i] for i in index.tolist()]
        return F.binary_cross_entropy_with_logits(result.logits(batch), target[index])

    head.train()
    result.losses = fit(
        plan, len(recs), [*encoder.parameters(), *head.parameters()], loss_fn, "EHR only"
    )
    head.eval()
    return result


@dataclass
class JointResult:
    """MRI linear head on concatenated stage-1 embeddings, late-fused with the EHR branch."""

    stage1: Dict[Orientation, Stage1Result]
    mri_head: ClassifierHead
    ehr: EHRResult
    gamma: FusionGamma
    losses: List[float] = field(default_factory=list)

    def logits(
        self, t: FusionTuples, ehr_feat: torch.Tensor, index: torch.Tensor | None = None
    ) -> torch.Tensor:
        patient = t.patient if index is None else t.patient[index]
        z_mri = self.mri_head(torch.cat(t.triple(index), dim=-1))
        z_ehr = self.ehr.head(ehr_feat[patient])
        return late_fuse(z_mri, z_ehr, self.gamma.gamma)

    @torch.no_grad()
    def predict(self, store: StudyStore, records: Sequence[StudyRecord]) -> PatientPredictions:
        self.ehr.head.eval()
        t = fusion_tuples(self.stage1, store, records)
        kept = [store.index.records[pid] for pid in t.patient_ids]
        ehr_feat = self.ehr.encoder(ehr_records(store, kept))
        probs = torch.sigmoid(self.logits(t, ehr_feat))
        return PatientPredictions(t.patient_ids, t.patient_mean(probs), t.labels)


def train_ehr_joint(
    stage1: Mapping[Orientation, Stage1Result], store: StudyStore, plan: TrainPlan
) -> JointResult:
    """Train the MRI head, EHR encoder and head, and fusion weights together."""
    _require_orientations(stage1)
    before = {o: r.checksum() for o, r in stage1.items()}
    records = patient_subset(store.records(Split.TRAIN), plan.label_fraction, plan.seed)
    t = fusion_tuples(stage1, store, records)
    t.check_weights()
    kept = [store.index.records[pid] for pid in t.patient_ids]
    recs = ehr_records(store, kept)
    k = store.index.n_labels
    with seeded(plan.seed, "ehr-joint"):
        mri_head = ClassifierHead(3 * stage1[Orientation.SAGITTAL].width, k)
        ehr = EHRResult(EHREncoder(EHRStats.fit(recs)), EHRHead(k))
        gamma = FusionGamma(k)
    result = JointResult(dict(stage1), mri_head, ehr, gamma)
    target = t.target
    weight = t.weight.to(torch.float32)
    mean_weight = float(t.weight.mean())

    def loss_fn(index: torch.Tensor) -> torch.Tensor:
        ehr_feat = ehr.encoder(recs)
        logits = result.logits(t, ehr_feat, index)
        return weighted_bce(logits, target[index], weight[index], mean_weight)

    params = [
        *mri_head.parameters(),
        *ehr.encoder.parameters(),
        *ehr.head.parameters(),
        *gamma.parameters(),
    ]
    ehr.head.train()
    result.losses = fit(plan, len(t), params, loss_fn, "MRI + EHR late fusion")
    ehr.head.eval()
    _verify_frozen(stage1, before)
    return result


@dataclass
class SegmentationResult:
    orientation: Orientation
    tap: TapPoint
    denoiser: UNet3D
    head: SegHead
    sched: NoiseSchedule
    noise_seed: int
    n_structures: int
    losses: List[float] = field(default_factory=list)

    def checksum(self) -> str:
        return module_checksum({"denoiser": self.denoiser, "head": self.head})

    def logits(self, volumes: Sequence[VolumeTensor]) -> torch.Tensor:
        feats = extract_batch(self.denoiser, volumes, self.tap, self.sched, self.noise_seed)
        return self.head(feats, volumes[0].spatial_shape)

    @torch.no_grad()
    def segment(self, volumes: Sequence[VolumeTensor]) -> torch.Tensor:
        """(B, D, H, W) predicted class maps."""
        self.denoiser.eval()
        self.head.eval()
        return torch.cat([self.logits(chunk).argmax(dim=1) for chunk in _chunks(volumes)])

    def evaluate(self, store: StudyStore, records: Sequence[StudyRecord]) -> Dict[int, float]:
        """Mean Dice per structure over the masked scans of this orientation."""
        scans = _masked_scans(records, self.orientation)
        if not scans:
            raise ValidationFailure(f"no {self.orientation.value} masks to evaluate")
        preds = self.segment([store.volume(s) for s in scans])
        gts = [store.mask(s).classes.long() for s in scans]
        return mean_dice(list(preds), gts, self.n_structures)


def _masked_scans(records: Sequence[StudyRecord], orientation: Orientation) -> List[str]:
    return [s for r in records for s in r.seg_scans if r.orientation_of(s) is orientation]


def train_segmentation(
    store: StudyStore,
    orientation: Orientation,
    tap: TapPoint,
    plan: TrainPlan,
    denoiser: UNet3D,
    sched: NoiseSchedule,
    noise_seed: int,
) -> SegmentationResult:
    """Fine-tune a copy of the encoder and bottleneck with a segmentation head.

    The loss is cross-entropy plus soft Dice; the decoder stays frozen.
    """
    tap.check(sched)
    with_masks = [r for r in store.records(Split.TRAIN) if _masked_scans([r], orientation)]
    records = patient_subset(with_masks, plan.label_fraction, plan.seed)
    scans = _masked_scans(records, orientation)
    if not scans:
        raise ConfigurationError(f"no {orientation.value} training masks")
    volumes = [store.volume(s) for s in scans]
    masks = [store.mask(s) for s in scans]
    for v, m in zip(volumes, masks):
        m.check_matches(v)
    n_structures = masks[0].n_structures
    target = torch.stack([m.classes.long() for m in masks])

    model = copy.deepcopy(denoiser)
    for p in model.group_parameters(ParamGroup.DECODER):
        p.requires_grad_(False)
    before = group_checksums(model)
    with seeded(plan.seed, "segmentation", orientation.value, str(tap)):
        head = SegHead(model.config.bottleneck_channels, n_structures)
    result = SegmentationResult(orientation, tap, model, head, sched, noise_seed, n_structures)

    def loss_fn(index: torch.Tensor) -> torch.Tensor:
        loss, _, _ = segmentation_loss(
            result.logits([volumes[i] for i in index.tolist()]), target[index]
        )
        return loss

    params = [
        *model.group_parameters(ParamGroup.ENCODER, ParamGroup.BOTTLENECK, ParamGroup.TIME_EMBED),
        *head.parameters(),
    ]
    model.train()
    head.train()
    what = f"segmentation {orientation.value} {tap}"
    result.losses = fit(plan, len(volumes), params, loss_fn, what)
    model.eval()
    head.eval()
    _check_unchanged(before, model, (ParamGroup.DECODER,))
    return result
