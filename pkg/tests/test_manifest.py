"""Test the content-addressed manifests."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from planediff.exceptions import DigestMismatch, ManifestError, MissingUpstreamArtifact
from planediff.manifest import (
    RUN_MANIFEST,
    RunManifest,
    canonical_digest,
    directory_digest,
    file_digest,
)


def make_run(**kwargs: object) -> RunManifest:
    fields = {
        "command": "synth",
        "seeds": {"seed": 0},
        "config_digest": "c0ffee",
        "inputs": {},
        "outputs": {"out": "abc"},
    }
    fields.update(kwargs)
    return RunManifest(**fields)  # type: ignore[arg-type]


def test_canonical_digest() -> None:
    assert canonical_digest({"a": 1, "b": [2, 3]}) == canonical_digest({"b": [2, 3], "a": 1})
    assert canonical_digest({"a": 1}) != canonical_digest({"a": 2})
    assert 64 == len(canonical_digest(None))


def test_RunManifest() -> None:
    m = make_run()
    assert "run" == m.kind
    assert m.digest == make_run().digest
    assert m.digest != make_run(command="pretrain").digest

    r = RunManifest.loads(m.dumps())
    assert m == r
    assert m.digest == r.digest


def test_cache_key_ignores_outputs() -> None:
    a = make_run(wall_time_s=1.0, results={"x": 1})
    b = make_run(wall_time_s=2.0, outputs={"out": "def"})
    assert a.digest != b.digest
    assert a.cache_key() == b.cache_key()
    assert a.cache_key() != make_run(inputs={"data": "1"}).cache_key()
    assert a.cache_key() != make_run(config_digest="other").cache_key()


def test_tampered_manifest() -> None:
    data = json.loads(make_run().dumps())
    data["command"] = "evaluate"
    with pytest.raises(DigestMismatch):
        RunManifest.loads(json.dumps(data))


def test_wrong_kind() -> None:
    data = json.loads(make_run().dumps())
    data["kind"] = "error"
    with pytest.raises(ManifestError):
        RunManifest.loads(json.dumps(data))


def test_read_write(tmp_path: Path) -> None:
    m = make_run()
    path = m.write(tmp_path / "a" / "manifest.json")
    assert m == RunManifest.read(path)

    with pytest.raises(MissingUpstreamArtifact) as e:
        RunManifest.read(tmp_path / "missing.json")
    assert str(tmp_path / "missing.json") == e.value.required


def test_directory_digest(tmp_path: Path) -> None:
    for root in (tmp_path / "a", tmp_path / "b"):
        (root / "sub").mkdir(parents=True)
        (root / "x.bin").write_bytes(b"\x00\x01")
        (root / "sub" / "y.csv").write_text("step,loss\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert directory_digest(a) == directory_digest(b)

    (a / RUN_MANIFEST).write_text("{}")
    (a / ".lock").write_text("1234")
    assert directory_digest(a) == directory_digest(b)

    (a / "sub" / RUN_MANIFEST).write_text("{}")
    assert directory_digest(a) != directory_digest(b)

    (b / "sub" / RUN_MANIFEST).write_text("{}")
    (b / "x.bin").write_bytes(b"\x00\x02")
    assert directory_digest(a) != directory_digest(b)


def test_file_digest(tmp_path: Path) -> None:
    (tmp_path / "f").write_bytes(b"")
    assert "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855" == file_digest(
        tmp_path / "f"
    )
