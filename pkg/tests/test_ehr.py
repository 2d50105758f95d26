"""Test the health-record encoder, head and late fusion."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import pytest
import torch
import torch.nn.functional as F

from planediff.ehr import (
    FEATURE_DIM,
    HIDDEN_DIM,
    EHREncoder,
    EHRFeature,
    EHRHead,
    EHRRecord,
    EHRStats,
    Event,
    FusionGamma,
    PatientType,
    Sex,
    ehr_head,
    encode_ehr,
    late_fuse,
    read_ehr_csv,
    write_ehr_csv,
)
from planediff.exceptions import ConfigurationError, ShapeMismatch, ValidationFailure
from planediff.metrics import ScoredLabels, auroc

RECORDS = [
    EHRRecord(age=20.0, height=170.0, weight=60.0, sex=Sex.MALE, event=Event.SPORTS),
    EHRRecord(age=40.0, height=180.0, sex=Sex.FEMALE, patient_type=PatientType.ATHLETE),
    EHRRecord(age=60.0, height=190.0, event=Event.TRAFFIC),
]


def test_EHRStats() -> None:
    stats = EHRStats.fit(RECORDS)
    assert (40.0, 180.0, 60.0) == stats.mean
    assert math.sqrt(800.0 / 3.0) == pytest.approx(stats.std[0])
    assert math.sqrt(200.0 / 3.0) == pytest.approx(stats.std[1])
    assert 1e-6 == stats.std[2]


def test_EHRStats_no_values(caplog: pytest.LogCaptureFixture) -> None:
    with caplog.at_level(logging.WARNING):
        stats = EHRStats.fit([EHRRecord(age=30.0)])
    assert (30.0, 0.0, 0.0) == stats.mean
    assert (1e-6, 1.0, 1.0) == stats.std
    assert "height" in caplog.text


def test_EHRStats_from_training_split_only() -> None:
    test_record = EHRRecord(age=90.0)
    assert EHRStats.fit(RECORDS) != EHRStats.fit(RECORDS + [test_record])


def test_encode_ehr() -> None:
    stats = EHRStats.fit(RECORDS)
    encoder = EHREncoder(stats)

    f = encode_ehr(RECORDS[1], stats, encoder)
    assert (FEATURE_DIM,) == tuple(f.vector.shape)
    assert 0.0 == float(f.continuous[0])
    assert 0.0 == float(f.continuous[1])
    assert 0.0 == float(f.continuous[2])
    assert [0.0, 1.0, 0.0] == f.sex.tolist()
    assert [1.0, 0.0, 0.0] == f.patient_type.tolist()
    assert torch.equal(encoder.event_embedding.weight[Event.UNK.index], f.event)

    f = encode_ehr(RECORDS[0], stats, encoder)
    assert float((20.0 - 40.0) / stats.std[0]) == pytest.approx(float(f.continuous[0]))
    assert torch.equal(encoder.event_embedding.weight[Event.SPORTS.index], f.event)


def test_encode_ehr_missing() -> None:
    stats = EHRStats.fit(RECORDS)
    f = encode_ehr(EHRRecord(), stats, EHREncoder(stats))
    assert [0.0, 0.0, 0.0] == f.continuous.tolist()
    assert [0.0, 0.0, 1.0] == f.sex.tolist()
    assert [0.0, 0.0, 1.0] == f.patient_type.tolist()


def test_encode_ehr_batch() -> None:
    stats = EHRStats.fit(RECORDS)
    encoder = EHREncoder(stats)
    batch = encoder(RECORDS)
    assert (3, FEATURE_DIM) == tuple(batch.shape)
    for i, r in enumerate(RECORDS):
        assert torch.equal(encode_ehr(r, stats, encoder).vector, batch[i])


def test_encode_ehr_foreign_stats() -> None:
    stats = EHRStats.fit(RECORDS)
    with pytest.raises(ConfigurationError):
        encode_ehr(RECORDS[0], EHRStats.fit(RECORDS[:2]), EHREncoder(stats))


def test_EHRFeature_invalid() -> None:
    with pytest.raises(ShapeMismatch):
        EHRFeature(vector=torch.zeros(16))
    v = torch.zeros(FEATURE_DIM)
    v[6] = 1.0
    with pytest.raises(ValidationFailure):
        EHRFeature(vector=v)


def test_ehr_head_zero() -> None:
    head = EHRHead(n_labels=4).eval()
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    stats = EHRStats.fit(RECORDS)
    logits = ehr_head(encode_ehr(RECORDS[0], stats, EHREncoder(stats)), head)
    assert torch.equal(torch.zeros(4), logits)


def test_ehr_head_forward() -> None:
    torch.manual_seed(0)
    head = EHRHead(n_labels=3).eval()
    x = torch.randn(5, FEATURE_DIM)
    first, _, norm, _, last = head.net
    expected = F.linear(
        F.layer_norm(
            F.relu(F.linear(x, first.weight, first.bias)),
            (HIDDEN_DIM,),
            norm.weight,
            norm.bias,
        ),
        last.weight,
        last.bias,
    )
    torch.testing.assert_close(expected, head(x))
    assert torch.equal(head(x), head(x))


def test_ehr_head_width() -> None:
    with pytest.raises(ConfigurationError):
        EHRHead(n_labels=2)(torch.zeros(1, 16))


def test_late_fuse() -> None:
    z_mri = torch.tensor([[2.0, -1.0]])
    z_ehr = torch.tensor([[0.0, 3.0]])
    gamma = FusionGamma(2)
    torch.testing.assert_close(torch.tensor([0.5, 0.5]), gamma.gamma)
    torch.testing.assert_close(torch.tensor([[1.0, 1.0]]), gamma(z_mri, z_ehr))

    with torch.no_grad():
        gamma.w.fill_(math.log(3.0))
    torch.testing.assert_close(torch.tensor([0.75, 0.75]), gamma.gamma)
    torch.testing.assert_close(torch.tensor([[1.5, 0.0]]), gamma(z_mri, z_ehr))


def test_late_fuse_convex() -> None:
    g = torch.Generator().manual_seed(0)
    z_mri = torch.randn(20, 4, generator=g)
    z_ehr = torch.randn(20, 4, generator=g)
    gamma = torch.rand(4, generator=g)
    fused = late_fuse(z_mri, z_ehr, gamma)
    assert bool((fused <= torch.maximum(z_mri, z_ehr) + 1e-6).all())
    assert bool((fused >= torch.minimum(z_mri, z_ehr) - 1e-6).all())


def test_late_fuse_constant_ehr_keeps_ranking() -> None:
    g = torch.Generator().manual_seed(1)
    z_mri = torch.randn(30, dtype=torch.float64, generator=g)
    truth = (torch.rand(30, generator=g) < 0.5).long()
    truth[0], truth[1] = 0, 1
    fused = late_fuse(
        z_mri[:, None], torch.full((30, 1), 0.7, dtype=torch.float64), torch.tensor([0.3])
    )
    assert auroc(ScoredLabels(z_mri.numpy(), truth.numpy())) == auroc(
        ScoredLabels(fused[:, 0].numpy(), truth.numpy())
    )


def test_late_fuse_shape() -> None:
    with pytest.raises(ShapeMismatch):
        late_fuse(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(3))
    with pytest.raises(ShapeMismatch):
        late_fuse(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(4))


def test_ehr_csv(tmp_path: Path) -> None:
    records = {f"P{i:04d}": r for i, r in enumerate(RECORDS + [EHRRecord()])}
    write_ehr_csv(tmp_path / "ehr.csv", records)
    assert records == read_ehr_csv(tmp_path / "ehr.csv")
    lines = (tmp_path / "ehr.csv").read_text().splitlines()
    assert "patient_id,age,height,weight,sex,patient_type,event" == lines[0]
    assert "P0003,,,,UNK,UNK,UNK" == lines[4]


def test_ehr_csv_header(tmp_path: Path) -> None:
    (tmp_path / "ehr.csv").write_text("patient_id,age\nP0000,30\n")
    with pytest.raises(ValidationFailure):
        read_ehr_csv(tmp_path / "ehr.csv")
