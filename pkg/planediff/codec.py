"""Raw tensor files with JSON sidecars.

Every tensor planediff persists (volumes, masks, checkpoint parameters, cached
features) is written as a headerless little-endian array next to a JSON sidecar
describing it:

```
P0001/sagittal_0.f32     raw little-endian float32, C order
P0001/sagittal_0.json    {"shape": [1, 8, 32, 32], "dtype": "f32le", "crc32": ..., ...}
```

The sidecar carries the CRC-32 of the payload so that truncated or corrupted
files are detected on read rather than silently producing garbage features.
"""

from __future__ import annotations

import json
import logging
from enum import Enum, unique
from pathlib import Path
from typing import Dict, Final, Tuple

import numpy as np
import torch
from crcmod.predefined import mkPredefinedCrcFun  # type: ignore
from pydantic import BaseModel, ConfigDict, ValidationError

from planediff.exceptions import BadChecksum, BadSidecar, ShapeMismatch
from planediff.volume import Orientation, SegMask, VolumeTensor

crc32_func: Final = mkPredefinedCrcFun("crc-32")

logger: Final = logging.getLogger(__name__)


@unique
class DType(str, Enum):
    F32LE = "f32le"
    U8 = "u8"


_NUMPY_DTYPES: Final[Dict[DType, str]] = {DType.F32LE: "<f4", DType.U8: "u1"}
_SUFFIXES: Final[Dict[DType, str]] = {DType.F32LE: ".f32", DType.U8: ".u8"}


class TensorSidecar(BaseModel):
    """The JSON description of a raw tensor file."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    shape: Tuple[int, ...]
    dtype: DType
    crc32: int
    """CRC-32 of the raw payload."""
    orientation: Orientation | None = None
    study_id: str | None = None
    scan_id: str | None = None
    name: str | None = None
    """Parameter address or cache key, for tensors that are not volumes."""

    @property
    def nbytes(self) -> int:
        itemsize = np.dtype(_NUMPY_DTYPES[self.dtype]).itemsize
        return int(np.prod(self.shape, dtype=np.int64)) * itemsize


def encode(tensor: torch.Tensor, dtype: DType) -> bytes:
    """Serialize `tensor` to little-endian bytes of `dtype`."""
    array = tensor.detach().cpu().numpy()
    return np.ascontiguousarray(array.astype(_NUMPY_DTYPES[dtype])).tobytes()


def decode(payload: bytes, sidecar: TensorSidecar) -> torch.Tensor:
    """Deserialize and verify a payload described by `sidecar`."""
    if len(payload) != sidecar.nbytes:
        raise BadSidecar(f"payload is {len(payload)}B, sidecar describes {sidecar.nbytes}B")
    crc = crc32_func(payload)
    if crc != sidecar.crc32:
        raise BadChecksum(f"payload CRC {crc:#010x} != sidecar CRC {sidecar.crc32:#010x}")
    array = np.frombuffer(payload, dtype=_NUMPY_DTYPES[sidecar.dtype]).reshape(sidecar.shape)
    if sidecar.dtype is DType.U8:
        return torch.from_numpy(array.copy())
    return torch.from_numpy(array.astype(np.float32))


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_tensor(path: Path, tensor: torch.Tensor, dtype: DType, **meta: object) -> TensorSidecar:
    """Write `tensor` to `path` (suffix replaced by the dtype's) and its sidecar."""
    path = path.with_suffix(_SUFFIXES[dtype])
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode(tensor, dtype)
    sidecar = TensorSidecar(
        shape=tuple(int(s) for s in tensor.shape),
        dtype=dtype,
        crc32=crc32_func(payload),
        **meta,  # type: ignore[arg-type]
    )
    path.write_bytes(payload)
    sidecar_path(path).write_text(sidecar.model_dump_json(exclude_none=True, indent=1))
    logger.debug(f"Wrote {path} {sidecar.shape} {sidecar.dtype.value}")
    return sidecar


def read_sidecar(path: Path) -> TensorSidecar:
    try:
        return TensorSidecar.model_validate_json(sidecar_path(path).read_text())
    except (ValidationError, json.JSONDecodeError) as e:
        raise BadSidecar(f"invalid sidecar for {path}: {e}") from e


def read_tensor(path: Path) -> Tuple[torch.Tensor, TensorSidecar]:
    """Read a tensor file written by `write_tensor`; `path` may omit the suffix."""
    sidecar = read_sidecar(path)
    payload = path.with_suffix(_SUFFIXES[sidecar.dtype]).read_bytes()
    return decode(payload, sidecar), sidecar


def write_volume(path: Path, volume: VolumeTensor) -> TensorSidecar:
    return write_tensor(
        path,
        volume.data,
        DType.F32LE,
        orientation=volume.orientation,
        study_id=volume.study_id,
        scan_id=volume.scan_id,
    )


def read_volume(path: Path) -> VolumeTensor:
    data, sidecar = read_tensor(path)
    if sidecar.orientation is None or sidecar.study_id is None or sidecar.scan_id is None:
        raise BadSidecar(f"{path} is not a volume sidecar")
    return VolumeTensor(
        data=data,
        orientation=sidecar.orientation,
        study_id=sidecar.study_id,
        scan_id=sidecar.scan_id,
    )


def write_mask(path: Path, mask: SegMask, scan_id: str) -> TensorSidecar:
    name = f"S={mask.n_structures}"
    return write_tensor(path, mask.classes, DType.U8, scan_id=scan_id, name=name)


def read_mask(path: Path) -> SegMask:
    classes, sidecar = read_tensor(path)
    if sidecar.dtype is not DType.U8 or sidecar.name is None or not sidecar.name.startswith("S="):
        raise BadSidecar(f"{path} is not a mask sidecar")
    if classes.dim() != 3:
        raise ShapeMismatch(f"mask {path} has shape {tuple(classes.shape)}")
    return SegMask(classes=classes, n_structures=int(sidecar.name[2:]))
