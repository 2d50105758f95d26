"""The volumetric U-Net noise predictor and its checkpoints.

The network follows the usual DDPM layout in 3D:

```
conv_in -> down levels (ResBlock [+ attention]) x blocks_per_level, stride-2 conv between
        -> mid_0 ResBlock -> mid_1 self-attention -> mid_2 ResBlock
        -> up levels (ResBlock on [h, skip] [+ attention]) x (blocks_per_level + 1),
           upsample between
        -> GroupNorm -> SiLU -> conv_out
```

The timestep enters every ResBlock as an additive channel shift computed from a
sinusoidal embedding followed by a two-layer MLP.

Parameters are grouped for freeze contracts: `encoder` (conv_in and the down
path), `time_embed`, `bottleneck` (mid_0..mid_2) and `decoder` (the up path and
the output head).  `encode()` runs only encoder and bottleneck and returns the
three bottleneck activations, which is what feature extraction uses.
"""

from __future__ import annotations

import hashlib
import logging
import math
from enum import Enum, unique
from pathlib import Path
from typing import Dict, Final, Iterable, Iterator, List, Mapping, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn

from planediff import codec
from planediff.exceptions import (
    ConfigurationError,
    MissingUpstreamArtifact,
    NumericError,
    ShapeMismatch,
)
from planediff.manifest import Manifest
from planediff.seeding import seeded
from planediff.volume import Orientation, ProfileName

logger: Final = logging.getLogger(__name__)


@unique
class Block(str, Enum):
    """The three bottleneck sub-blocks features are tapped from."""

    MID_0 = "mid_0"
    MID_1 = "mid_1"
    MID_2 = "mid_2"

    @property
    def index(self) -> int:
        return int(self.value[-1])


@unique
class ParamGroup(str, Enum):
    ENCODER = "encoder"
    TIME_EMBED = "time_embed"
    BOTTLENECK = "bottleneck"
    DECODER = "decoder"


class DenoiserConfig(BaseModel):
    """U-Net hyperparameters; see `preset()` for the named profiles."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    base_channels: int = Field(default=16, ge=1)
    channel_multipliers: Tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = Field(default=1, ge=1)
    attention_resolution: int = 8
    """Self-attention is added at the down/up level whose height equals this."""
    in_channels: int = 1
    out_channels: int = 1
    input_shape: Tuple[int, int, int] = (8, 32, 32)
    """(D, H, W) accepted by the network."""

    @field_validator("channel_multipliers")
    @classmethod
    def _at_least_two_levels(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(v) < 2 or min(v) < 1:
            raise ValueError(f"need at least two positive multipliers, got {v}")
        return v

    @field_validator("in_channels", "out_channels")
    @classmethod
    def _single_channel(cls, v: int) -> int:
        if v != 1:
            raise ValueError("volumes are single-channel")
        return v

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * self.channel_multipliers[-1]

    def level_shapes(self) -> List[Tuple[int, int, int]]:
        """(D, H, W) at each down level; the last is the bottleneck."""
        shapes = [self.input_shape]
        for _ in self.channel_multipliers[1:]:
            shapes.append(tuple(math.ceil(s / 2) for s in shapes[-1]))  # type: ignore[misc]
        return shapes

    @property
    def bottleneck_shape(self) -> Tuple[int, int, int, int]:
        return (self.bottleneck_channels, *self.level_shapes()[-1])

    @staticmethod
    def preset(name: ProfileName | str) -> DenoiserConfig:
        if ProfileName(name) is ProfileName.PAPER:
            return DenoiserConfig(
                base_channels=64,
                channel_multipliers=(1, 1, 2, 2, 4),
                blocks_per_level=1,
                attention_resolution=16,
                input_shape=(16, 256, 256),
            )
        return DenoiserConfig()

    @staticmethod
    def tiny() -> DenoiserConfig:
        """A 4x4x4 network small enough for finite-difference checks."""
        return DenoiserConfig(
            base_channels=4,
            channel_multipliers=(1, 2),
            attention_resolution=2,
            input_shape=(4, 4, 4),
        )


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / max(half, 1)
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1)
        self.skip: nn.Module = (
            nn.Conv3d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head self-attention over all voxels, with a residual connection."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1)
        self.proj = nn.Conv3d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c = x.shape[:2]
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, -1).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        h = torch.einsum("bij,bcj->bci", attn, v).reshape(x.shape)
        return x + self.proj(h)


class _Level(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        self.resample: nn.Module | None = None


class UNet3D(nn.Module):
    """Predicts the noise in `x_t` given the timestep `t`."""

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        base = config.base_channels
        temb_dim = 4 * base
        self.time_embed = nn.Sequential(
            nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.conv_in = nn.Conv3d(config.in_channels, base, 3, padding=1)

        heights = [s[1] for s in config.level_shapes()]
        last = len(config.channel_multipliers) - 1
        channels = [base]
        c = base
        self.down = nn.ModuleList()
        for i, mult in enumerate(config.channel_multipliers):
            level = _Level()
            for _ in range(config.blocks_per_level):
                level.blocks.append(ResBlock(c, base * mult, temb_dim))
                c = base * mult
                level.attns.append(
                    AttnBlock(c) if heights[i] == config.attention_resolution else nn.Identity()
                )
                channels.append(c)
            if i != last:
                level.resample = nn.Conv3d(c, c, 3, stride=2, padding=1)
                channels.append(c)
            self.down.append(level)

        self.mid = nn.ModuleList([ResBlock(c, c, temb_dim), AttnBlock(c), ResBlock(c, c, temb_dim)])

        self.up = nn.ModuleList()
        for i, mult in reversed(list(enumerate(config.channel_multipliers))):
            level = _Level()
            for _ in range(config.blocks_per_level + 1):
                level.blocks.append(ResBlock(c + channels.pop(), base * mult, temb_dim))
                c = base * mult
                level.attns.append(
                    AttnBlock(c) if heights[i] == config.attention_resolution else nn.Identity()
                )
            if i != 0:
                level.resample = nn.Conv3d(c, c, 3, padding=1)
            self.up.append(level)

        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv3d(c, config.out_channels, 3, padding=1)

    def _check(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        expected = (self.config.in_channels, *self.config.input_shape)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise ShapeMismatch(f"denoiser expects (B, {expected}), got {tuple(x.shape)}")
        if not bool(torch.isfinite(x).all()):
            raise NumericError("denoiser input has non-finite values")
        t = torch.as_tensor(t, device=x.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        if t.numel() != x.shape[0]:
            raise ShapeMismatch(f"{t.numel()} timesteps for a batch of {x.shape[0]}")
        return t

    def _temb(self, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        return self.time_embed(timestep_embedding(t, self.config.base_channels).to(dtype))

    def _down(self, x: torch.Tensor, temb: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        h = self.conv_in(x)
        hs = [h]
        for level in self.down:
            for block, attn in zip(level.blocks, level.attns):
                h = attn(block(h, temb))
                hs.append(h)
            if level.resample is not None:
                h = level.resample(h)
                hs.append(h)
        return h, hs

    def encode(
        self, x: torch.Tensor, t: torch.Tensor | int, upto: Block = Block.MID_2
    ) -> Dict[Block, torch.Tensor]:
        """Bottleneck activations up to and including `upto`; the decoder is not run."""
        t = self._check(x, torch.as_tensor(t))
        temb = self._temb(t, x.dtype)
        h, _ = self._down(x, temb)
        out: Dict[Block, torch.Tensor] = {}
        h = self.mid[0](h, temb)
        out[Block.MID_0] = h
        if upto.index >= 1:
            h = self.mid[1](h)
            out[Block.MID_1] = h
        if upto.index >= 2:
            h = self.mid[2](h, temb)
            out[Block.MID_2] = h
        return out

    def forward(self, x: torch.Tensor, t: torch.Tensor | int) -> torch.Tensor:
        t = self._check(x, torch.as_tensor(t))
        temb = self._temb(t, x.dtype)
        h, hs = self._down(x, temb)
        h = self.mid[0](h, temb)
        h = self.mid[1](h)
        h = self.mid[2](h, temb)
        for level in self.up:
            for block, attn in zip(level.blocks, level.attns):
                h = attn(block(torch.cat([h, hs.pop()], dim=1), temb))
            if level.resample is not None:
                h = F.interpolate(h, size=hs[-1].shape[2:], mode="nearest")
                h = level.resample(h)
        return self.conv_out(F.silu(self.norm_out(h)))

    def named_group_parameters(self, group: ParamGroup) -> Iterator[Tuple[str, nn.Parameter]]:
        prefixes = {
            ParamGroup.ENCODER: ("conv_in.", "down."),
            ParamGroup.TIME_EMBED: ("time_embed.",),
            ParamGroup.BOTTLENECK: ("mid.",),
            ParamGroup.DECODER: ("up.", "norm_out.", "conv_out."),
        }[group]
        for name, p in self.named_parameters():
            if name.startswith(prefixes):
                yield name, p

    def group_parameters(self, *groups: ParamGroup) -> List[nn.Parameter]:
        return [p for g in groups for _, p in self.named_group_parameters(g)]


def denoiser_forward(model: UNet3D, x_t: torch.Tensor, t: int | torch.Tensor) -> torch.Tensor:
    """Predicted noise for `x_t` of shape (1, D, H, W) or (B, 1, D, H, W)."""
    if x_t.dim() == 4:
        return model(x_t.unsqueeze(0), t).squeeze(0)
    return model(x_t, t)


def build_denoiser(config: DenoiserConfig, *seed_parts: int | str) -> UNet3D:
    """Construct a denoiser whose initial weights depend only on `seed_parts`."""
    with seeded("init", *seed_parts):
        return UNet3D(config)


def parameter_checksum(params: Iterable[Tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over names and raw bytes of named tensors, in the order given."""
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def group_checksums(model: UNet3D) -> Dict[ParamGroup, str]:
    return {g: parameter_checksum(model.named_group_parameters(g)) for g in ParamGroup}


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    T: int = Field(default=1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02


class TensorEntry(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    shape: Tuple[int, ...]
    crc32: int


class CheckpointManifest(Manifest):
    """`manifest.json` of a checkpoint directory."""

    KIND = "checkpoint"

    config: DenoiserConfig
    schedule: ScheduleConfig
    orientation: Orientation | None = None
    step: int
    seed: int
    tensors: Dict[str, TensorEntry]
    """State-dict key to the sidecar facts of its tensor file."""


CHECKPOINT_MANIFEST: Final = "manifest.json"


def save_state(root: Path, state: Mapping[str, torch.Tensor]) -> Dict[str, TensorEntry]:
    """Write one f32 tensor file per state-dict entry under `root/tensors`."""
    tensors: Dict[str, TensorEntry] = {}
    for key, value in state.items():
        path = root / "tensors" / f"{key}.bin"
        sidecar = codec.write_tensor(path, value, codec.DType.F32LE, name=key)
        tensors[key] = TensorEntry(shape=sidecar.shape, crc32=sidecar.crc32)
    return tensors


def load_state(root: Path, entries: Mapping[str, TensorEntry]) -> Dict[str, torch.Tensor]:
    """Read the tensors listed in `entries`, checking each against its entry."""
    state: Dict[str, torch.Tensor] = {}
    for key, entry in entries.items():
        path = root / "tensors" / f"{key}.bin"
        if not codec.sidecar_path(path).is_file():
            raise MissingUpstreamArtifact(str(path))
        value, sidecar = codec.read_tensor(path)
        if sidecar.crc32 != entry.crc32 or tuple(sidecar.shape) != tuple(entry.shape):
            raise ConfigurationError(f"tensor {key} in {root} does not match the manifest")
        state[key] = value
    return state


def save_checkpoint(
    root: Path,
    model: UNet3D,
    schedule: ScheduleConfig,
    step: int,
    seed: int,
    orientation: Orientation | None = None,
) -> CheckpointManifest:
    manifest = CheckpointManifest(
        config=model.config,
        schedule=schedule,
        orientation=orientation,
        step=step,
        seed=seed,
        tensors=save_state(root, model.state_dict()),
    )
    manifest.write(root / CHECKPOINT_MANIFEST)
    logger.info(f"Saved checkpoint {root} ({manifest.digest[:12]})")
    return manifest


def load_checkpoint(root: Path) -> Tuple[UNet3D, CheckpointManifest]:
    manifest = CheckpointManifest.read(root / CHECKPOINT_MANIFEST)
    model = UNet3D(manifest.config)
    if set(model.state_dict()) != set(manifest.tensors):
        raise ConfigurationError(f"checkpoint {root} does not match its configured network")
    model.load_state_dict(load_state(root, manifest.tensors))
    return model, manifest
