"""Test the phantom cohort generator and the patient-level split."""

from __future__ import annotations

import itertools
import math
from typing import Tuple

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from planediff.exceptions import LeakageError, NumericError, ShapeMismatch, ValidationFailure
from planediff.metrics import ScoredLabels, auroc
from planediff.synth_data import (
    OFF_HOME_VISIBILITY,
    DatasetIndex,
    PhantomSpec,
    Split,
    enumerate_fusion_samples,
    generate_cohort,
    generate_phantom_study,
    home_orientation,
    lesion_amplitude,
    patient_ids,
    preprocess_volume,
    split_by_patient,
)
from planediff.volume import ORIENTATIONS, Orientation, ResolutionProfile
from tests.helpers import make_record, tiny_spec


@pytest.mark.parametrize("fraction", [-0.1, 0.5, 0.6])
def test_PhantomSpec_multi_scan_fraction(fraction: float) -> None:
    with pytest.raises(ValidationError):
        PhantomSpec(multi_scan_fraction=fraction)


def test_PhantomSpec_raw_shape() -> None:
    spec = PhantomSpec()
    assert (8, 32, 32) == spec.profile.shape
    assert (12, 40, 40) == spec.raw_shape
    with pytest.raises(ValidationError):
        PhantomSpec(resolution=(0, 4, 4))


def test_generate_phantom_study() -> None:
    spec = tiny_spec(multi_scan_fraction=0.4)
    study = generate_phantom_study(spec, "P0003")
    r = study.record

    assert "P0003" == r.patient_id
    assert spec.n_labels == len(r.labels)
    assert set(ORIENTATIONS) == set(r.scans)
    assert set(r.all_scans) == set(study.volumes)
    for scan_id, v in study.volumes.items():
        assert (1, 4, 4, 4) == tuple(v.data.shape)
        assert -1.0 <= float(v.data.min()) and float(v.data.max()) <= 1.0
        assert r.orientation_of(scan_id) is v.orientation
        assert "P0003" == v.study_id

    assert set(r.seg_scans) == set(study.masks)
    assert set(r.seg_scans) == {
        s for o in (Orientation.SAGITTAL, Orientation.CORONAL) for s in r.scans[o]
    }
    for scan_id, m in study.masks.items():
        m.check_matches(study.volumes[scan_id])
        assert spec.n_structures == m.n_structures
    assert r.ehr is not None


def test_generate_phantom_study_deterministic() -> None:
    spec = tiny_spec()
    a = generate_phantom_study(spec, "P0001")
    b = generate_phantom_study(spec, "P0001")
    assert a.record == b.record
    for scan_id in a.volumes:
        assert torch.equal(a.volumes[scan_id].data, b.volumes[scan_id].data)

    c = generate_phantom_study(tiny_spec(seed=1), "P0001")
    assert any(
        not torch.equal(a.volumes[s].data, c.volumes[s].data)
        for s in set(a.volumes) & set(c.volumes)
    )


def test_force_labels() -> None:
    spec = tiny_spec()
    drawn = generate_phantom_study(spec, "P0002")
    forced = generate_phantom_study(spec, "P0002", force_labels=drawn.record.labels)
    assert drawn.record == forced.record
    for scan_id in drawn.volumes:
        assert torch.equal(drawn.volumes[scan_id].data, forced.volumes[scan_id].data)

    ones = generate_phantom_study(spec, "P0002", force_labels=(1,) * spec.n_labels)
    assert (1,) * spec.n_labels == ones.record.labels

    with pytest.raises(ValidationFailure):
        generate_phantom_study(spec, "P0002", force_labels=(1, 0))


def test_lesion_visibility() -> None:
    spec = PhantomSpec()
    assert Orientation.SAGITTAL is home_orientation(0)
    assert Orientation.AXIAL is home_orientation(2)
    assert Orientation.SAGITTAL is home_orientation(3)
    assert spec.label_effect_strength == lesion_amplitude(spec, 1, Orientation.CORONAL)
    assert spec.label_effect_strength * OFF_HOME_VISIBILITY == pytest.approx(
        lesion_amplitude(spec, 1, Orientation.AXIAL)
    )


def test_labels_are_learnable() -> None:
    """A least-squares probe on lesion-region means separates every label."""
    spec = PhantomSpec(n_patients=40, seed=5)
    studies = generate_cohort(spec)
    truth = np.array([s.record.labels for s in studies])
    features = np.zeros((len(studies), spec.n_labels))
    for i, s in enumerate(studies):
        for k in range(spec.n_labels):
            o = home_orientation(k)
            region = s.lesion_regions[o][k]
            volume = s.volumes[s.record.scans[o][0]].data[0]
            features[i, k] = float(volume[region].mean())
    design = np.hstack([features, np.ones((len(studies), 1))])
    for k in range(spec.n_labels):
        coef, *_ = np.linalg.lstsq(design, truth[:, k].astype(np.float64), rcond=None)
        score = auroc(ScoredLabels(design @ coef, truth[:, k]))
        assert score is not None
        assert score > 0.9


def test_preprocess_central_window() -> None:
    profile = ResolutionProfile(8, 4, 4)
    raw = torch.arange(11, dtype=torch.float64).reshape(1, 11, 1, 1).expand(1, 11, 6, 6)
    v = preprocess_volume(raw, profile)
    assert (8, 4, 4) == v.spatial_shape
    expected = torch.tensor([-1.0 + 2.0 * j / 7.0 for j in range(8)])
    torch.testing.assert_close(v.data[0, :, 0, 0], expected.to(torch.float32))
    torch.testing.assert_close(v.data[0, :, 3, 2], expected.to(torch.float32))
    assert -1.0 == float(v.data.min())
    assert 1.0 == float(v.data.max())


def test_preprocess_constant() -> None:
    v = preprocess_volume(torch.full((1, 10, 5, 5), 3.0), ResolutionProfile(8, 4, 4))
    assert torch.equal(torch.zeros((1, 8, 4, 4)), v.data)


def test_preprocess_invalid() -> None:
    profile = ResolutionProfile(8, 4, 4)
    with pytest.raises(ShapeMismatch):
        preprocess_volume(torch.zeros((1, 7, 4, 4)), profile)
    with pytest.raises(ShapeMismatch):
        preprocess_volume(torch.zeros((10, 4, 4)), profile)
    raw = torch.zeros((1, 8, 4, 4))
    raw[0, 3, 1, 1] = float("nan")
    with pytest.raises(NumericError):
        preprocess_volume(raw, profile)


@pytest.mark.parametrize(
    "n, fractions, sizes",
    [
        (10, (0.6, 0.2, 0.2), (6, 2, 2)),
        (12, (0.5, 0.25, 0.25), (6, 3, 3)),
        (7, (0.7, 0.15, 0.15), (5, 1, 1)),
        (3, (1.0, 0.0, 0.0), (3, 0, 0)),
    ],
)
def test_split_by_patient(n: int, fractions: Tuple[float, float, float], sizes: tuple) -> None:
    records = [make_record(f"P{i:04d}") for i in range(n)]
    index = split_by_patient(records, fractions, seed=3)
    assert sizes == tuple(len(index.splits[s]) for s in Split)

    ids = [pid for s in Split for pid in index.splits[s]]
    assert sorted(ids) == sorted(r.patient_id for r in records)
    assert len(set(ids)) == len(ids)

    again = split_by_patient(list(reversed(records)), fractions, seed=3)
    assert index.splits == again.splits
    assert index.digest == again.digest
    assert index.digest == DatasetIndex.loads(index.dumps()).digest


def test_split_seed() -> None:
    records = [make_record(f"P{i:04d}") for i in range(20)]
    a = split_by_patient(records, (0.6, 0.2, 0.2), seed=0)
    b = split_by_patient(records, (0.6, 0.2, 0.2), seed=1)
    assert a.splits != b.splits


def test_split_invalid() -> None:
    records = [make_record(f"P{i:04d}") for i in range(4)]
    with pytest.raises(ValidationFailure):
        split_by_patient([], (0.6, 0.2, 0.2), 0)
    with pytest.raises(ValidationFailure):
        split_by_patient(records, (0.6, 0.2, 0.3), 0)
    with pytest.raises(ValidationFailure):
        split_by_patient(records + records[:1], (0.6, 0.2, 0.2), 0)
    with pytest.raises(ValidationFailure):
        split_by_patient(
            records + [make_record("P9999", labels=(1, 0, 1))], (0.6, 0.2, 0.2), 0
        )


def test_DatasetIndex_leakage() -> None:
    r = make_record("P0000")
    with pytest.raises(LeakageError):
        DatasetIndex(
            n_labels=2,
            splits={Split.TRAIN: ("P0000",), Split.TEST: ("P0000",)},
            records={"P0000": r},
            seed=0,
        )
    with pytest.raises(LeakageError):
        DatasetIndex(n_labels=2, splits={Split.TRAIN: ()}, records={"P0000": r}, seed=0)
    with pytest.raises(ValueError):
        DatasetIndex(n_labels=3, splits={Split.TRAIN: ("P0000",)}, records={"P0000": r}, seed=0)


def test_generate_cohort() -> None:
    spec = tiny_spec(n_patients=5)
    studies = generate_cohort(spec)
    assert ["P0000", "P0001", "P0002", "P0003", "P0004"] == patient_ids(spec)
    assert patient_ids(spec) == [s.record.patient_id for s in studies]
    index = split_by_patient([s.record for s in studies], (0.6, 0.2, 0.2), 0)
    again = split_by_patient([s.record for s in generate_cohort(spec)], (0.6, 0.2, 0.2), 0)
    assert index.dumps() == again.dumps()


@pytest.mark.parametrize("counts", list(itertools.product(range(1, 5), repeat=3)))
def test_enumerate_fusion_samples(counts: Tuple[int, int, int]) -> None:
    samples = enumerate_fusion_samples(make_record("P0000", counts))
    assert samples is not None
    assert math.prod(counts) == len(samples)
    assert len(set(samples)) == len(samples)
    assert 1.0 == pytest.approx(sum(s.weight for s in samples), abs=1e-12)
    assert all(s.sagittal.startswith("P0000_sagittal") for s in samples)


@pytest.mark.parametrize(
    "counts, n, weight", [((2, 1, 1), 2, 0.5), ((4, 4, 4), 64, 1 / 64), ((1, 1, 1), 1, 1.0)]
)
def test_fusion_sample_weights(counts: Tuple[int, int, int], n: int, weight: float) -> None:
    samples = enumerate_fusion_samples(make_record("P0000", counts))
    assert samples is not None
    assert n == len(samples)
    assert all(weight == s.weight for s in samples)


def test_fusion_samples_missing_orientation() -> None:
    assert None is enumerate_fusion_samples(make_record("P0000", (2, 0, 1)))
