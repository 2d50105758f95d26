"""On-disk form of trained stage-1, fusion and segmentation models.

Each artifact is a directory with a `model.json` and one tensor file per
parameter under `tensors/`; models that carry a fine-tuned or frozen denoiser
keep it as a checkpoint directory `denoiser/`.  A fusion artifact names the
stage-1 artifacts it was trained on together with their checksums; loading it
re-verifies them, so an edited stage-1 model is never silently combined.

```
stage1/sagittal/
  model.json             Stage1Manifest
  tensors/head.linear.weight.f32 ...
  denoiser/manifest.json CheckpointManifest
fusion/
  model.json             FusionManifest
  tensors/...
```
"""

from __future__ import annotations

import json
import logging
from enum import Enum, unique
from pathlib import Path
from typing import Dict, Final, Mapping, Tuple, Union

import torch
from torch import nn

from planediff.denoiser import (
    ScheduleConfig,
    TensorEntry,
    load_checkpoint,
    load_state,
    save_checkpoint,
    save_state,
)
from planediff.diffusion import NoiseSchedule
from planediff.ehr import EHREncoder, EHRHead, EHRStats, FusionGamma
from planediff.exceptions import FreezeViolation, ManifestError, MissingUpstreamArtifact
from planediff.feature_tap import TapPoint
from planediff.fusion import FusionStrategy, MPAEGate, build_fusion
from planediff.heads import ClassifierHead, SegHead
from planediff.manifest import Manifest
from planediff.pooling import PoolingMethod, build_pooling
from planediff.training import (
    EHRResult,
    FusionResult,
    JointResult,
    MPAEResult,
    SegmentationResult,
    Setting,
    Stage1Result,
)
from planediff.volume import ORIENTATIONS, Orientation

logger: Final = logging.getLogger(__name__)

MANIFEST_FILE: Final = "model.json"
DENOISER_DIR: Final = "denoiser"

FusedModel = Union[FusionResult, MPAEResult, JointResult, EHRResult]


@unique
class FusedKind(str, Enum):
    FEATURE = "feature"
    MPAE = "mpae"
    EHR_JOINT = "ehr_joint"
    EHR_ONLY = "ehr_only"


def _state(modules: Mapping[str, nn.Module]) -> Dict[str, torch.Tensor]:
    return {f"{name}.{k}": v for name, m in modules.items() for k, v in m.state_dict().items()}


def _load_into(
    root: Path, entries: Mapping[str, TensorEntry], modules: Mapping[str, nn.Module]
) -> None:
    state = load_state(root, entries)
    for name, m in modules.items():
        prefix = f"{name}."
        m.load_state_dict({k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)})


def artifact_kind(root: Path) -> str:
    """The `kind` recorded in an artifact directory's manifest."""
    path = root / MANIFEST_FILE
    if not path.is_file():
        raise MissingUpstreamArtifact(str(path))
    kind = json.loads(path.read_text()).get("kind")
    if not isinstance(kind, str):
        raise ManifestError(f"{path} has no kind")
    return kind


class Stage1Manifest(Manifest):
    KIND = "stage1"

    orientation: Orientation
    tap: TapPoint
    setting: Setting
    pooling: PoolingMethod
    n_labels: int
    noise_seed: int
    checksum: str
    """Checksum of denoiser, pooling and head parameters."""
    tensors: Dict[str, TensorEntry]
    """Pooling and head parameters; the denoiser has its own checkpoint."""


def save_stage1(root: Path, result: Stage1Result, schedule: ScheduleConfig) -> Stage1Manifest:
    save_checkpoint(root / DENOISER_DIR, result.denoiser, schedule, 0, 0, result.orientation)
    manifest = Stage1Manifest(
        orientation=result.orientation,
        tap=result.tap,
        setting=result.setting,
        pooling=result.pooling.method,
        n_labels=result.head.n_labels,
        noise_seed=result.noise_seed,
        checksum=result.checksum(),
        tensors=save_state(root, _state({"pooling": result.pooling, "head": result.head})),
    )
    manifest.write(root / MANIFEST_FILE)
    return manifest


def load_stage1(root: Path) -> Tuple[Stage1Result, Stage1Manifest]:
    manifest = Stage1Manifest.read(root / MANIFEST_FILE)
    denoiser, ckpt = load_checkpoint(root / DENOISER_DIR)
    channels = denoiser.config.bottleneck_channels
    pooling = build_pooling(manifest.pooling, channels)
    head = ClassifierHead(manifest.pooling.output_dim(channels), manifest.n_labels)
    _load_into(root, manifest.tensors, {"pooling": pooling, "head": head})
    result = Stage1Result(
        manifest.orientation,
        manifest.tap,
        manifest.setting,
        denoiser,
        pooling,
        head,
        NoiseSchedule.from_config(ckpt.schedule),
        manifest.noise_seed,
    )
    if result.checksum() != manifest.checksum:
        raise FreezeViolation(f"stage-1 model {root} differs from its recorded checksum")
    for m in result.modules().values():
        m.eval()
    return result, manifest


def load_stage1_set(roots: Mapping[Orientation, Path]) -> Dict[Orientation, Stage1Result]:
    return {o: load_stage1(roots[o])[0] for o in ORIENTATIONS if o in roots}


class FusionManifest(Manifest):
    KIND = "fusion"

    model: FusedKind
    strategy: FusionStrategy | None = None
    stage1: Dict[Orientation, str] = {}
    """Stage-1 artifact directory per orientation."""
    stage1_checksums: Dict[Orientation, str] = {}
    width: int = 0
    embed_dim: int = 0
    n_labels: int
    ehr_stats: EHRStats | None = None
    gamma: Tuple[float, ...] | None = None
    """Learned per-label MRI weight of the late fusion."""
    tensors: Dict[str, TensorEntry]


def _fused_modules(model: FusedModel) -> Dict[str, nn.Module]:
    if isinstance(model, FusionResult):
        return {"fusion": model.fusion, "head": model.head}
    if isinstance(model, MPAEResult):
        modules: Dict[str, nn.Module] = {f"expert_{o.value}": h for o, h in model.experts.items()}
        modules["gate"] = model.gate
        return modules
    if isinstance(model, JointResult):
        return {
            "mri_head": model.mri_head,
            "ehr_encoder": model.ehr.encoder,
            "ehr_head": model.ehr.head,
            "gamma": model.gamma,
        }
    return {"ehr_encoder": model.encoder, "ehr_head": model.head}


def save_fused(
    root: Path, model: FusedModel, stage1_roots: Mapping[Orientation, Path] | None = None
) -> FusionManifest:
    stage1 = {} if isinstance(model, EHRResult) else model.stage1
    roots = stage1_roots or {}
    meta: Dict[str, object] = {
        "stage1": {o: str(roots[o]) for o in stage1},
        "stage1_checksums": {o: r.checksum() for o, r in stage1.items()},
        "n_labels": (
            model.head.n_labels if isinstance(model, (FusionResult, EHRResult)) else 0
        ),
    }
    if isinstance(model, FusionResult):
        meta.update(
            model=FusedKind.FEATURE,
            strategy=model.strategy,
            width=model.fusion.width,
            embed_dim=model.fusion.embed_dim,
        )
    elif isinstance(model, MPAEResult):
        meta.update(
            model=FusedKind.MPAE, strategy=FusionStrategy.MPAE, n_labels=model.gate.n_labels
        )
    elif isinstance(model, JointResult):
        meta.update(
            model=FusedKind.EHR_JOINT,
            width=model.mri_head.in_dim // 3,
            n_labels=model.mri_head.n_labels,
            ehr_stats=model.ehr.encoder.stats,
            gamma=tuple(float(g) for g in model.gamma.gamma.detach()),
        )
    else:
        meta.update(model=FusedKind.EHR_ONLY, ehr_stats=model.encoder.stats)
    manifest = FusionManifest.model_validate(
        {**meta, "tensors": save_state(root, _state(_fused_modules(model)))}
    )
    manifest.write(root / MANIFEST_FILE)
    logger.info(f"Saved {manifest.model.value} model {root} ({manifest.digest[:12]})")
    return manifest


def load_fused(root: Path) -> Tuple[FusedModel, FusionManifest]:
    manifest = FusionManifest.read(root / MANIFEST_FILE)
    stage1 = load_stage1_set({o: Path(p) for o, p in manifest.stage1.items()})
    for o, r in stage1.items():
        if r.checksum() != manifest.stage1_checksums[o]:
            raise FreezeViolation(f"stage-1 {o.value} model changed since fusion training")
    k = manifest.n_labels
    model: FusedModel
    if manifest.model is FusedKind.FEATURE:
        assert manifest.strategy is not None
        fusion = build_fusion(manifest.strategy, manifest.width, manifest.embed_dim)
        model = FusionResult(manifest.strategy, stage1, fusion, ClassifierHead(fusion.out_dim, k))
    elif manifest.model is FusedKind.MPAE:
        width = stage1[Orientation.SAGITTAL].width
        experts = {o: ClassifierHead(width, k) for o in ORIENTATIONS}
        model = MPAEResult(stage1, experts, MPAEGate(k))
    elif manifest.model is FusedKind.EHR_JOINT:
        assert manifest.ehr_stats is not None
        ehr = EHRResult(EHREncoder(manifest.ehr_stats), EHRHead(k))
        model = JointResult(stage1, ClassifierHead(3 * manifest.width, k), ehr, FusionGamma(k))
    else:
        assert manifest.ehr_stats is not None
        model = EHRResult(EHREncoder(manifest.ehr_stats), EHRHead(k))
    modules = _fused_modules(model)
    _load_into(root, manifest.tensors, modules)
    for m in modules.values():
        m.eval()
    return model, manifest


class SegmentationManifest(Manifest):
    KIND = "segmentation"

    orientation: Orientation
    tap: TapPoint
    n_structures: int
    noise_seed: int
    checksum: str
    tensors: Dict[str, TensorEntry]


def save_segmentation(
    root: Path, result: SegmentationResult, schedule: ScheduleConfig
) -> SegmentationManifest:
    save_checkpoint(root / DENOISER_DIR, result.denoiser, schedule, 0, 0, result.orientation)
    manifest = SegmentationManifest(
        orientation=result.orientation,
        tap=result.tap,
        n_structures=result.n_structures,
        noise_seed=result.noise_seed,
        checksum=result.checksum(),
        tensors=save_state(root, _state({"head": result.head})),
    )
    manifest.write(root / MANIFEST_FILE)
    return manifest


def load_segmentation(root: Path) -> Tuple[SegmentationResult, SegmentationManifest]:
    manifest = SegmentationManifest.read(root / MANIFEST_FILE)
    denoiser, ckpt = load_checkpoint(root / DENOISER_DIR)
    head = SegHead(denoiser.config.bottleneck_channels, manifest.n_structures)
    _load_into(root, manifest.tensors, {"head": head})
    result = SegmentationResult(
        manifest.orientation,
        manifest.tap,
        denoiser,
        head,
        NoiseSchedule.from_config(ckpt.schedule),
        manifest.noise_seed,
        manifest.n_structures,
    )
    if result.checksum() != manifest.checksum:
        raise FreezeViolation(f"segmentation model {root} differs from its recorded checksum")
    denoiser.eval()
    head.eval()
    return result, manifest
