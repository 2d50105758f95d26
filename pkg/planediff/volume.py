"""Volumes, masks and the resolution profiles they are stored at."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, unique
from typing import ClassVar, Dict, Tuple

import torch

from planediff.exceptions import NumericError, ShapeMismatch, ValidationFailure


@unique
class Orientation(str, Enum):
    """The three acquisition planes, in the fixed fusion order."""

    SAGITTAL = "sagittal"
    CORONAL = "coronal"
    AXIAL = "axial"

    @property
    def index(self) -> int:
        return ORIENTATIONS.index(self)


ORIENTATIONS: Tuple[Orientation, ...] = (
    Orientation.SAGITTAL,
    Orientation.CORONAL,
    Orientation.AXIAL,
)
"""Fusion order: every (sag, cor, ax) triple and 3-row matrix uses this order."""


@unique
class ProfileName(str, Enum):
    DESK = "desk"
    PAPER = "paper"


@dataclass(frozen=True)
class ResolutionProfile:
    """The (D, H, W) every preprocessed volume is brought to."""

    depth: int
    height: int
    width: int

    PROFILES: ClassVar[Dict[ProfileName, Tuple[int, int, int]]] = {
        ProfileName.DESK: (8, 32, 32),
        ProfileName.PAPER: (16, 256, 256),
    }

    def __post_init__(self) -> None:
        if min(self.shape) <= 0:
            raise ValidationFailure(f"profile dimensions must be positive, got {self.shape}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.depth, self.height, self.width)

    @staticmethod
    def named(name: ProfileName | str) -> ResolutionProfile:
        return ResolutionProfile(*ResolutionProfile.PROFILES[ProfileName(name)])


@dataclass(frozen=True)
class VolumeTensor:
    """A preprocessed single-channel volume of shape (1, D, H, W) in [-1, 1]."""

    data: torch.Tensor
    orientation: Orientation
    study_id: str
    scan_id: str

    def __post_init__(self) -> None:
        if self.data.dim() != 4 or self.data.shape[0] != 1:
            raise ShapeMismatch(f"expected (1, D, H, W), got {tuple(self.data.shape)}")
        if not bool(torch.isfinite(self.data).all()):
            raise NumericError(f"volume {self.scan_id} has non-finite values")
        if self.data.numel() and (self.data.min() < -1.0 or self.data.max() > 1.0):
            raise ValidationFailure(f"volume {self.scan_id} is outside [-1, 1]")

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        _, d, h, w = self.data.shape
        return (int(d), int(h), int(w))

    def conforms_to(self, profile: ResolutionProfile) -> bool:
        return self.spatial_shape == profile.shape


@dataclass(frozen=True)
class SegMask:
    """Integer class map of shape (D, H, W); 0 is background, 1..S are structures."""

    classes: torch.Tensor
    n_structures: int

    def __post_init__(self) -> None:
        if self.classes.dim() != 3:
            raise ShapeMismatch(f"expected (D, H, W), got {tuple(self.classes.shape)}")
        if self.classes.dtype not in (torch.uint8, torch.int64, torch.int32):
            raise ValidationFailure(f"mask dtype must be integral, got {self.classes.dtype}")
        if self.classes.numel() and (
            int(self.classes.min()) < 0 or int(self.classes.max()) > self.n_structures
        ):
            raise ValidationFailure(f"mask ids must lie in [0, {self.n_structures}]")

    @property
    def shape(self) -> Tuple[int, int, int]:
        d, h, w = self.classes.shape
        return (int(d), int(h), int(w))

    def check_matches(self, volume: VolumeTensor) -> None:
        if self.shape != volume.spatial_shape:
            raise ShapeMismatch(
                f"mask shape {self.shape} != volume shape {volume.spatial_shape}"
                f" for scan {volume.scan_id}"
            )
