from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import torch

from planediff.dataset import StudyStore
from planediff.denoiser import Block, DenoiserConfig, UNet3D, build_denoiser
from planediff.diffusion import NoiseSchedule, build_schedule
from planediff.feature_tap import TapPoint
from planediff.pooling import PoolingMethod
from planediff.synth_data import (
    PhantomSpec,
    PhantomStudy,
    StudyRecord,
    generate_cohort,
    split_by_patient,
)
from planediff.training import Setting, Stage, Stage1Result, TrainPlan, train_stage1
from planediff.volume import ORIENTATIONS, Orientation, VolumeTensor

TINY_RESOLUTION = (4, 4, 4)
TINY_TAP = TapPoint(timestep=10, block=Block.MID_2)

TINY_SETTINGS = (
    "phantom.resolution=[4,4,4]",
    "denoiser.base_channels=4",
    "denoiser.channel_multipliers=[1,2]",
    "denoiser.attention_resolution=2",
    "schedule.T=100",
    "timesteps=[10,30]",
    "pretrain.steps=2",
    "pretrain.batch_size=2",
)
"""`--set` assignments that shrink every CLI stage to a few seconds."""


def tiny_spec(n_patients: int = 12, **kwargs: object) -> PhantomSpec:
    return PhantomSpec(n_patients=n_patients, resolution=TINY_RESOLUTION, **kwargs)  # type: ignore


def tiny_schedule(T: int = 100) -> NoiseSchedule:
    return build_schedule(T, 1e-4, 0.02)


def tiny_denoiser(*seed: object) -> UNet3D:
    return build_denoiser(DenoiserConfig.tiny(), "test", *seed)  # type: ignore[arg-type]


def tiny_store(
    n_patients: int = 12,
    fractions: Tuple[float, float, float] = (0.5, 0.25, 0.25),
    sealed: bool = True,
    **kwargs: object,
) -> Tuple[StudyStore, List[PhantomStudy]]:
    studies = generate_cohort(tiny_spec(n_patients, **kwargs))
    index = split_by_patient([s.record for s in studies], fractions, seed=0)
    return StudyStore.from_studies(index, studies, sealed=sealed), studies


def make_record(
    patient_id: str,
    counts: Sequence[int] = (1, 1, 1),
    labels: Sequence[int] = (0, 1),
) -> StudyRecord:
    scans = {
        o: tuple(f"{patient_id}_{o.value}_{i}" for i in range(n))
        for o, n in zip(Orientation, counts)
    }
    return StudyRecord(patient_id=patient_id, scans=scans, labels=tuple(labels))


def random_volume(
    seed: int,
    shape: Tuple[int, int, int] = TINY_RESOLUTION,
    orientation: Orientation = Orientation.SAGITTAL,
    scan_id: str = "P0000_sagittal_0",
) -> VolumeTensor:
    g = torch.Generator().manual_seed(seed)
    data = torch.rand((1, *shape), generator=g) * 2.0 - 1.0
    return VolumeTensor(data=data, orientation=orientation, study_id="P0000", scan_id=scan_id)


def tiny_args(*assignments: str) -> List[str]:
    """`--set` arguments for the tiny settings plus `assignments`."""
    args: List[str] = []
    for a in (*TINY_SETTINGS, *assignments):
        args += ["--set", a]
    return args


def tiny_stage1(
    store: StudyStore, pooling: PoolingMethod = PoolingMethod.GAP, epochs: int = 1
) -> Dict[Orientation, Stage1Result]:
    """Linear probes on fresh tiny denoisers, one per orientation."""
    plan = TrainPlan.for_stage(Stage.STAGE1_LP, epochs=epochs)
    sched = tiny_schedule()
    return {
        o: train_stage1(
            store, o, TINY_TAP, Setting.LP, plan, tiny_denoiser(o.value), sched, 0, pooling
        )
        for o in ORIENTATIONS
    }
