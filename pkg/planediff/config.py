"""Run configuration.

A run is configured by one JSON file holding a `RunConfig`; every key may be
overridden on the command line with `--set key.path=value`, where `value` is
parsed as JSON when it can be and taken as a string otherwise:

```
planediff probe --config run.json --set plans.stage1_LP.lr=0.01 --set pooling=sap ...
```

The phantom resolution defaults to the selected profile's, and the network
defaults to the profile's preset sized to the phantom resolution.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Final, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from planediff.denoiser import DenoiserConfig, ScheduleConfig
from planediff.diffusion import PretrainConfig
from planediff.exceptions import ConfigurationError
from planediff.feature_tap import TIMESTEP_GRID
from planediff.fusion import FusionStrategy
from planediff.manifest import canonical_digest
from planediff.metrics import DEFAULT_RESAMPLES, DEFAULT_THRESHOLD
from planediff.pooling import PoolingMethod
from planediff.selection import SHORTLIST
from planediff.synth_data import PhantomSpec
from planediff.training import Stage, TrainPlan
from planediff.volume import ProfileName, ResolutionProfile

logger: Final = logging.getLogger(__name__)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    profile: ProfileName = ProfileName.DESK
    seed: int = 0
    """Seed of the training plans and the patient split."""
    noise_seed: int = 0
    """Seed of the fixed feature-extraction noise."""
    phantom: PhantomSpec
    split_fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    """Train, validation and test shares of the patients."""
    denoiser: DenoiserConfig
    schedule: ScheduleConfig = ScheduleConfig()
    pretrain: PretrainConfig = PretrainConfig()
    plans: Dict[Stage, Dict[str, Any]] = {}
    """Per-stage overrides of the `TrainPlan` defaults."""
    timesteps: Tuple[int, ...] = TIMESTEP_GRID
    pooling: PoolingMethod = PoolingMethod.SAP
    fusion: FusionStrategy = FusionStrategy.SIMPLE_CONCAT
    embed_dim: int | None = Field(default=None, gt=0)
    """Projection width of the linear and cross-attention fusions; default the embedding width."""
    threshold: float = Field(default=DEFAULT_THRESHOLD, gt=0.0, lt=1.0)
    resamples: int = Field(default=DEFAULT_RESAMPLES, gt=0)
    label_fractions: Tuple[float, ...] = (0.1, 0.3, 0.5, 1.0)
    shortlist: int = Field(default=SHORTLIST, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _profile_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        profile = ProfileName(data.get("profile", ProfileName.DESK))
        phantom = data.get("phantom")
        if phantom is None:
            phantom = {}
        if isinstance(phantom, dict) and "resolution" not in phantom:
            phantom = {**phantom, "resolution": ResolutionProfile.named(profile).shape}
        data["phantom"] = phantom
        denoiser = data.get("denoiser")
        if denoiser is None or isinstance(denoiser, dict):
            preset = DenoiserConfig.preset(profile).model_dump()
            if isinstance(phantom, dict):
                preset["input_shape"] = phantom["resolution"]
            data["denoiser"] = {**preset, **(denoiser or {})}
        return data

    @model_validator(mode="after")
    def _consistent(self) -> RunConfig:
        if tuple(self.denoiser.input_shape) != tuple(self.phantom.resolution):
            raise ValueError(
                f"denoiser input {self.denoiser.input_shape} != phantom resolution"
                f" {self.phantom.resolution}"
            )
        late = [t for t in self.timesteps if not 0 <= t < self.schedule.T]
        if late:
            raise ValueError(f"timesteps {late} outside [0, {self.schedule.T})")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split fractions must be non-negative and sum to 1")
        for stage in self.plans:
            try:
                self.plan(stage)
            except ValidationError as e:
                raise ValueError(f"plans.{stage.value}: {e}") from e
        return self

    def plan(self, stage: Stage, **overrides: Any) -> TrainPlan:
        values: Dict[str, Any] = {"seed": self.seed, **self.plans.get(stage, {}), **overrides}
        return TrainPlan.for_stage(stage, **values)

    @property
    def digest(self) -> str:
        return canonical_digest(self.model_dump(mode="json"))


def apply_overrides(data: Dict[str, Any], assignments: Sequence[str]) -> Dict[str, Any]:
    """Set `key.path=value` assignments in a nested dict, in order."""
    for assignment in assignments:
        key, sep, raw = assignment.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"expected key.path=value, got {assignment!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        *parents, leaf = key.split(".")
        node = data
        for p in parents:
            child = node.get(p)
            if child is None:
                child = node[p] = {}
            elif not isinstance(child, dict):
                raise ConfigurationError(f"{key}: {p} is not a section")
            node = child
        node[leaf] = value
        logger.debug(f"Config override {key} = {value!r}")
    return data


def load_config(path: Path | None, assignments: Sequence[str] = ()) -> RunConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        if not path.is_file():
            raise ConfigurationError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}") from e
    return RunConfig.model_validate(apply_overrides(data, assignments))
