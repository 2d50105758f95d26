"""The manifest base class.

A manifest is a frozen pydantic model that knows its own content hash.  On
construction the model is dumped to JSON-compatible values, encoded with
canonical CBOR and hashed with SHA-256; the hex digest is stored in the `digest`
attribute.  Two manifests with equal content therefore have equal digests on any
platform, which is what run caching and reproducibility checks compare.

```python
from planediff.manifest import RunManifest

m = RunManifest(command="synth", seeds={"run": 7}, inputs={}, outputs={})
assert RunManifest.loads(m.dumps()) == m
```

`loads()` re-derives the digest and raises `DigestMismatch` if the stored value
differs, so an edited manifest is never trusted.
"""

from __future__ import annotations

import hashlib
import logging
from abc import ABC
from pathlib import Path
from typing import Any, ClassVar, Dict, Final, Type, TypeVar

import cbor2
from pydantic import BaseModel, ConfigDict

from planediff.exceptions import DigestMismatch, ManifestError, MissingUpstreamArtifact

T = TypeVar("T", bound="Manifest")

logger: Final = logging.getLogger(__name__)

RUN_MANIFEST: Final = "manifest.json"


def canonical_digest(value: Any) -> str:
    """SHA-256 of the canonical CBOR encoding of a JSON-compatible value."""
    return hashlib.sha256(cbor2.dumps(value, canonical=True)).hexdigest()


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def directory_digest(root: Path) -> str:
    """Digest of every file under `root`, keyed by relative path.

    The run manifest at the top of `root` and hidden files such as run locks
    are left out.
    """
    return canonical_digest(
        {
            p.relative_to(root).as_posix(): file_digest(p)
            for p in sorted(root.rglob("*"))
            if p.is_file() and p != root / RUN_MANIFEST and not p.name.startswith(".")
        }
    )


class Manifest(ABC, BaseModel):
    """The base class for content-addressed records."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    KIND: ClassVar[str]

    kind: str = None  # type: ignore
    digest: str = None  # type: ignore

    def content(self) -> Dict[str, Any]:
        """The hashed content: everything except the digest itself."""
        return self.model_dump(mode="json", exclude={"digest"})

    def model_post_init(self, _: Any) -> None:
        if self.kind is None:
            object.__setattr__(self, "kind", self.KIND)
        elif self.kind != self.KIND:
            raise ManifestError(f"{type(self).__name__} expects kind {self.KIND}, got {self.kind}")
        digest = canonical_digest(self.content())
        if self.digest is not None and self.digest != digest:
            raise DigestMismatch(f"{self.KIND} manifest digest {self.digest} != content {digest}")
        object.__setattr__(self, "digest", digest)

    def dumps(self) -> str:
        return self.model_dump_json(indent=1)

    @classmethod
    def loads(cls: Type[T], text: str | bytes) -> T:
        """Deserialize and verify the manifest."""
        return cls.model_validate_json(text)

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        logger.debug(f"Wrote {self.KIND} manifest {path} ({self.digest[:12]})")
        return path

    @classmethod
    def read(cls: Type[T], path: Path) -> T:
        if not path.is_file():
            raise MissingUpstreamArtifact(str(path))
        return cls.loads(path.read_bytes())


class RunManifest(Manifest):
    """What a CLI command consumed and produced."""

    KIND = "run"

    command: str
    seeds: Dict[str, int]
    config_digest: str | None = None
    inputs: Dict[str, str]
    """Input artifact name to content digest."""
    outputs: Dict[str, str]
    """Output artifact name to content digest."""
    results: Dict[str, Any] = {}
    """Small JSON results such as metric values or the selected configuration."""
    wall_time_s: float | None = None
    """Excluded from cache comparisons; see `cache_key`."""

    def cache_key(self) -> str:
        return canonical_digest(
            {"command": self.command, "config": self.config_digest, "inputs": self.inputs}
        )
