# flake8: noqa

"""Multi-plane diffusion representations for volumetric multi-label diagnosis.

A 3D denoising diffusion model is pretrained per acquisition orientation
(sagittal, coronal, axial).  Its bottleneck activations at a chosen timestep
and block serve as features: pooled into one vector per scan, classified per
orientation (stage 1), then fused across orientations (stage 2) with a
feature-level strategy or with per-label gating of the orientation experts.
The same features drive a segmentation head.

The package ships a synthetic phantom cohort so that every stage can run on a
desk-scale CPU.

## Usage

Most users drive the pipeline with the `planediff` command; see `planediff.cli`.
Each stage is also a plain function:

```python
from planediff.dataset import StudyStore
from planediff.diffusion import NoiseSchedule, PretrainConfig, pretrain
from planediff.denoiser import DenoiserConfig, ScheduleConfig
from planediff.synth_data import PhantomSpec, generate_cohort, split_by_patient
from planediff.volume import Orientation

spec = PhantomSpec(n_patients=32)
studies = generate_cohort(spec)
index = split_by_patient([s.record for s in studies], (0.6, 0.2, 0.2), seed=0)
store = StudyStore.from_studies(index, studies)

sched = NoiseSchedule.from_config(ScheduleConfig())
result = pretrain(store, Orientation.SAGITTAL, PretrainConfig(steps=50), sched, DenoiserConfig())
```

Every record, configuration and manifest is a frozen pydantic model; on-disk
artifacts are content-addressed (see `planediff.manifest`).
"""
