"""The dataset directory and split-aware access to it.

```
dataset/
  index.json                  DatasetIndex manifest (splits and records)
  ehr.csv                     health records, one row per patient
  P0000/P0000_sagittal_0.f32  volume payload
  P0000/P0000_sagittal_0.json volume sidecar
  P0000/P0000_sagittal_0_mask.u8
  P0000/P0000_sagittal_0_mask.json
```

A `StudyStore` opened with `sealed=True` refuses to hand out anything belonging
to a test patient until `unseal()` is called, which only the evaluate stage does.
Every split that is read is recorded in `accessed`, so a command can prove it
never looked at the test split.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Final, Iterable, List, Set

from planediff import codec
from planediff.ehr import EHRRecord, read_ehr_csv, write_ehr_csv
from planediff.exceptions import LeakageError, MissingUpstreamArtifact, TestSplitSealed
from planediff.synth_data import DatasetIndex, PhantomStudy, Split, StudyRecord
from planediff.volume import SegMask, VolumeTensor

logger: Final = logging.getLogger(__name__)

INDEX_FILE: Final = "index.json"
EHR_FILE: Final = "ehr.csv"


class StudyStore:
    """Volumes, masks and records of one dataset, read through the split guard."""

    def __init__(
        self,
        index: DatasetIndex,
        root: Path | None = None,
        volumes: Dict[str, VolumeTensor] | None = None,
        masks: Dict[str, SegMask] | None = None,
        sealed: bool = True,
    ) -> None:
        self.index = index
        self.root = root
        self.sealed = sealed
        self.accessed: Set[Split] = set()
        self._volumes: Dict[str, VolumeTensor] = dict(volumes or {})
        self._masks: Dict[str, SegMask] = dict(masks or {})
        self._owner: Dict[str, str] = {
            scan_id: pid for pid, r in index.records.items() for scan_id in r.all_scans
        }

    @classmethod
    def from_studies(
        cls, index: DatasetIndex, studies: Iterable[PhantomStudy], sealed: bool = True
    ) -> StudyStore:
        volumes: Dict[str, VolumeTensor] = {}
        masks: Dict[str, SegMask] = {}
        for s in studies:
            volumes.update(s.volumes)
            masks.update(s.masks)
        return cls(index, volumes=volumes, masks=masks, sealed=sealed)

    @classmethod
    def open(cls, root: Path, sealed: bool = True) -> StudyStore:
        index_path = root / INDEX_FILE
        if not index_path.is_file():
            raise MissingUpstreamArtifact(str(index_path))
        return cls(DatasetIndex.read(index_path), root=root, sealed=sealed)

    def unseal(self) -> None:
        """Allow test-split reads; called by the evaluate stage only."""
        logger.info("Test split unsealed")
        self.sealed = False

    def _guard(self, patient_id: str) -> Split:
        split = self.index.split_of(patient_id)
        if split is Split.TEST and self.sealed:
            raise TestSplitSealed(f"test patient {patient_id} read before evaluation")
        self.accessed.add(split)
        return split

    def records(self, split: Split) -> List[StudyRecord]:
        if split is Split.TEST and self.sealed:
            raise TestSplitSealed("test split read before evaluation")
        self.accessed.add(split)
        return self.index.records_in(split)

    def assert_test_unread(self) -> None:
        if Split.TEST in self.accessed:
            raise LeakageError("the test split was read before evaluation")

    def record(self, patient_id: str) -> StudyRecord:
        self._guard(patient_id)
        return self.index.records[patient_id]

    def _path(self, scan_id: str) -> Path:
        if self.root is None:
            raise MissingUpstreamArtifact(f"volume {scan_id}")
        return self.root / self._owner[scan_id] / scan_id

    def volume(self, scan_id: str) -> VolumeTensor:
        self._guard(self._owner[scan_id])
        if scan_id not in self._volumes:
            self._volumes[scan_id] = codec.read_volume(self._path(scan_id))
        return self._volumes[scan_id]

    def mask(self, scan_id: str) -> SegMask:
        self._guard(self._owner[scan_id])
        if scan_id not in self._masks:
            path = self._path(scan_id)
            self._masks[scan_id] = codec.read_mask(path.with_name(f"{scan_id}_mask"))
        return self._masks[scan_id]

    def ehr(self) -> Dict[str, EHRRecord]:
        """Health records of every patient that has one; callers restrict by split."""
        if self.root is not None and (self.root / EHR_FILE).is_file():
            return read_ehr_csv(self.root / EHR_FILE)
        return {pid: r.ehr for pid, r in self.index.records.items() if r.ehr is not None}

    def write(self, root: Path) -> Path:
        """Write the whole dataset; the store must hold every tensor in memory."""
        root.mkdir(parents=True, exist_ok=True)
        for pid, r in self.index.records.items():
            for scan_id in r.all_scans:
                codec.write_volume(root / pid / scan_id, self._volumes[scan_id])
            for scan_id in r.seg_scans:
                codec.write_mask(root / pid / f"{scan_id}_mask", self._masks[scan_id], scan_id)
        write_ehr_csv(
            root / EHR_FILE,
            {pid: r.ehr for pid, r in self.index.records.items() if r.ehr is not None},
        )
        self.index.write(root / INDEX_FILE)
        logger.info(f"Wrote {len(self.index.records)} patients to {root}")
        return root
