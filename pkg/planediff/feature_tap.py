"""Bottleneck activations of a denoiser at a chosen timestep.

A `TapPoint` names a diffusion timestep and one of the three bottleneck
sub-blocks.  The clean volume is noised to that timestep with a noise draw that
depends only on `(noise_seed, scan_id, timestep)`, the encoder and bottleneck are
run, and the activation leaving the tapped sub-block is returned.  All three
blocks of one timestep therefore see the same noised input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Final, List, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field

from planediff import codec
from planediff.denoiser import Block, UNet3D
from planediff.diffusion import NoiseSchedule, forward_noise
from planediff.exceptions import CodecError, ShapeMismatch, ValidationFailure
from planediff.manifest import canonical_digest
from planediff.seeding import torch_generator
from planediff.volume import Orientation, VolumeTensor

logger: Final = logging.getLogger(__name__)

TIMESTEP_GRID: Final = (10, 30, 50, 100, 150, 200, 300, 500)


class TapPoint(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    timestep: int = Field(ge=0)
    block: Block

    def check(self, sched: NoiseSchedule) -> None:
        if self.timestep >= sched.T:
            raise ValidationFailure(f"tap timestep {self.timestep} >= T={sched.T}")

    def __str__(self) -> str:
        return f"t{self.timestep}/{self.block.value}"

    def sort_key(self) -> Tuple[int, int]:
        """Smaller timestep first, then lower block index."""
        return (self.timestep, self.block.index)


def tap_grid(timesteps: Sequence[int] = TIMESTEP_GRID) -> List[TapPoint]:
    return [TapPoint(timestep=t, block=b) for t in timesteps for b in Block]


@dataclass(frozen=True)
class FeatureMap:
    """Activation of shape (C', D', H', W') for one scan and tap."""

    data: torch.Tensor
    tap: TapPoint
    orientation: Orientation
    scan_id: str

    def __post_init__(self) -> None:
        if self.data.dim() != 4 or self.data.numel() == 0:
            raise ShapeMismatch(
                f"feature map must be non-empty (C, D, H, W), got {tuple(self.data.shape)}"
            )

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])


def tap_noise(volume: VolumeTensor, timestep: int, noise_seed: int) -> torch.Tensor:
    """The single fixed noise draw for `(scan, timestep)`."""
    g = torch_generator(noise_seed, volume.scan_id, timestep)
    return torch.randn(volume.data.shape, generator=g, dtype=volume.data.dtype)


def extract_batch(
    model: UNet3D,
    volumes: Sequence[VolumeTensor],
    tap: TapPoint,
    sched: NoiseSchedule,
    noise_seed: int,
) -> torch.Tensor:
    """Stacked (B, C', D', H', W') activations; differentiable when grad is enabled."""
    tap.check(sched)
    param = next(model.parameters())
    x_t = torch.stack(
        [
            forward_noise(v, tap.timestep, tap_noise(v, tap.timestep, noise_seed), sched)
            for v in volumes
        ]
    ).to(dtype=param.dtype, device=param.device)
    return model.encode(x_t, tap.timestep, upto=tap.block)[tap.block]


def extract_features(
    model: UNet3D,
    x0: VolumeTensor,
    tap: TapPoint,
    sched: NoiseSchedule,
    noise_seed: int,
) -> FeatureMap:
    with torch.no_grad():
        data = extract_batch(model, [x0], tap, sched, noise_seed)[0]
    return FeatureMap(data=data, tap=tap, orientation=x0.orientation, scan_id=x0.scan_id)


class FeatureCache:
    """On-disk features keyed by checkpoint digest, noise seed, scan and tap."""

    def __init__(self, root: Path, checkpoint_digest: str, noise_seed: int) -> None:
        self.checkpoint_digest = checkpoint_digest
        self.noise_seed = noise_seed
        self.root = root / f"{checkpoint_digest[:16]}_n{noise_seed}"
        self.hits = 0
        self.misses = 0

    def key(self, scan_id: str, tap: TapPoint) -> str:
        return canonical_digest(
            [self.checkpoint_digest, self.noise_seed, scan_id, tap.timestep, tap.block.value]
        )

    def _path(self, scan_id: str, tap: TapPoint) -> Path:
        return self.root / f"{scan_id}__t{tap.timestep}_{tap.block.value}.bin"

    def get(
        self, model: UNet3D, x0: VolumeTensor, tap: TapPoint, sched: NoiseSchedule
    ) -> FeatureMap:
        path = self._path(x0.scan_id, tap)
        key = self.key(x0.scan_id, tap)
        if codec.sidecar_path(path).is_file():
            try:
                data, sidecar = codec.read_tensor(path)
                if sidecar.name == key:
                    self.hits += 1
                    logger.debug(f"Feature cache hit {x0.scan_id} {tap}")
                    return FeatureMap(data, tap, x0.orientation, x0.scan_id)
            except CodecError as e:
                logger.warning(f"Discarding unreadable cached feature {path}: {e}")
        self.misses += 1
        fm = extract_features(model, x0, tap, sched, self.noise_seed)
        codec.write_tensor(
            path,
            fm.data,
            codec.DType.F32LE,
            orientation=x0.orientation,
            scan_id=x0.scan_id,
            name=key,
        )
        return fm
