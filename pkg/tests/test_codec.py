"""Test the tensor file codec."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import pytest
import torch

from planediff import codec
from planediff.codec import DType
from planediff.exceptions import BadChecksum, BadSidecar
from planediff.volume import Orientation, SegMask
from tests.helpers import random_volume


def test_encode_little_endian() -> None:
    assert struct.pack("<2f", 1.0, -2.5) == codec.encode(torch.tensor([1.0, -2.5]), DType.F32LE)
    assert bytes([0, 1, 255]) == codec.encode(
        torch.tensor([0, 1, 255], dtype=torch.uint8), DType.U8
    )


def test_volume(tmp_path: Path) -> None:
    v = random_volume(3, orientation=Orientation.CORONAL, scan_id="P0000_coronal_1")
    path = tmp_path / "P0000" / "P0000_coronal_1"
    sidecar = codec.write_volume(path, v)

    assert path.with_suffix(".f32").is_file()
    assert 4 * 64 == len(path.with_suffix(".f32").read_bytes())
    assert sidecar.nbytes == len(path.with_suffix(".f32").read_bytes())
    meta = json.loads(path.with_suffix(".json").read_text())
    assert [1, 4, 4, 4] == meta["shape"]
    assert "f32le" == meta["dtype"]
    assert "coronal" == meta["orientation"]
    assert "P0000" == meta["study_id"]
    assert "P0000_coronal_1" == meta["scan_id"]

    r = codec.read_volume(path)
    assert torch.equal(v.data, r.data)
    assert Orientation.CORONAL is r.orientation
    assert v.study_id == r.study_id
    assert v.scan_id == r.scan_id


def test_mask(tmp_path: Path) -> None:
    classes = torch.tensor([[[0, 1], [2, 3]], [[3, 2], [1, 0]]], dtype=torch.uint8)
    path = tmp_path / "P0000_sagittal_0_mask"
    codec.write_mask(path, SegMask(classes, 3), "P0000_sagittal_0")

    r = codec.read_mask(path)
    assert torch.equal(classes, r.classes)
    assert 3 == r.n_structures
    assert torch.uint8 == r.classes.dtype


def test_mask_not_a_volume(tmp_path: Path) -> None:
    path = tmp_path / "v"
    codec.write_volume(path, random_volume(0))
    with pytest.raises(BadSidecar):
        codec.read_mask(path)

    path = tmp_path / "t"
    codec.write_tensor(path, torch.zeros(3), DType.F32LE, name="w")
    with pytest.raises(BadSidecar):
        codec.read_volume(path)


def test_corrupt_payload(tmp_path: Path) -> None:
    path = tmp_path / "v"
    codec.write_volume(path, random_volume(1))
    payload = bytearray(path.with_suffix(".f32").read_bytes())
    payload[5] ^= 0xFF
    path.with_suffix(".f32").write_bytes(bytes(payload))
    with pytest.raises(BadChecksum):
        codec.read_volume(path)


def test_truncated_payload(tmp_path: Path) -> None:
    path = tmp_path / "v"
    codec.write_volume(path, random_volume(1))
    path.with_suffix(".f32").write_bytes(path.with_suffix(".f32").read_bytes()[:-4])
    with pytest.raises(BadSidecar):
        codec.read_volume(path)


def test_invalid_sidecar(tmp_path: Path) -> None:
    path = tmp_path / "v"
    codec.write_volume(path, random_volume(1))
    path.with_suffix(".json").write_text("{not json")
    with pytest.raises(BadSidecar):
        codec.read_volume(path)
