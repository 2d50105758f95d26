"""Test bottleneck feature extraction and the feature cache."""

from __future__ import annotations

import itertools
from pathlib import Path

import pytest
import torch

from planediff.denoiser import Block, DenoiserConfig, ParamGroup, build_denoiser, group_checksums
from planediff.diffusion import PretrainConfig, build_schedule, pretrain
from planediff.exceptions import ShapeMismatch, ValidationFailure
from planediff.feature_tap import (
    TIMESTEP_GRID,
    FeatureCache,
    FeatureMap,
    TapPoint,
    extract_batch,
    extract_features,
    tap_grid,
    tap_noise,
)
from planediff.synth_data import Split
from planediff.volume import Orientation
from tests.helpers import random_volume, tiny_denoiser, tiny_schedule, tiny_store


def test_TapPoint() -> None:
    tap = TapPoint(timestep=30, block=Block.MID_2)
    assert "t30/mid_2" == str(tap)
    assert tap == TapPoint.model_validate_json(tap.model_dump_json())
    assert sorted(tap_grid(), key=TapPoint.sort_key) == tap_grid()
    assert TapPoint(timestep=10, block=Block.MID_2).sort_key() < tap.sort_key()
    with pytest.raises(ValueError):
        TapPoint(timestep=-1, block=Block.MID_0)


def test_tap_grid() -> None:
    grid = tap_grid()
    assert 3 * len(TIMESTEP_GRID) == len(grid)
    assert 24 == len(grid)
    assert len(set(grid)) == len(grid)
    assert [TapPoint(timestep=10, block=b) for b in Block] == tap_grid([10])


def test_tap_noise() -> None:
    v = random_volume(0)
    assert torch.equal(tap_noise(v, 30, 0), tap_noise(v, 30, 0))
    assert not torch.equal(tap_noise(v, 30, 0), tap_noise(v, 50, 0))
    assert not torch.equal(tap_noise(v, 30, 0), tap_noise(v, 30, 1))
    other = random_volume(0, scan_id="P0000_sagittal_1")
    assert not torch.equal(tap_noise(v, 30, 0), tap_noise(other, 30, 0))


def test_extract_features() -> None:
    model = tiny_denoiser()
    sched = tiny_schedule()
    v = random_volume(2)
    before = group_checksums(model)

    maps = {b: extract_features(model, v, TapPoint(timestep=30, block=b), sched, 0) for b in Block}
    for fm in maps.values():
        assert model.config.bottleneck_shape == tuple(fm.data.shape)
        assert model.config.bottleneck_channels == fm.channels
        assert Orientation.SAGITTAL is fm.orientation
        assert v.scan_id == fm.scan_id
        assert not fm.data.requires_grad
    assert not torch.equal(maps[Block.MID_0].data, maps[Block.MID_2].data)
    assert before == group_checksums(model)

    tap = TapPoint(timestep=30, block=Block.MID_1)
    again = extract_features(model, v, tap, sched, 0)
    assert torch.equal(maps[Block.MID_1].data, again.data)
    assert not torch.equal(again.data, extract_features(model, v, tap, sched, 1).data)


def test_blocks_distinct_after_pretraining() -> None:
    store, _ = tiny_store(n_patients=6)
    sched = tiny_schedule()
    cfg = PretrainConfig(steps=20, batch_size=2, base_lr=1e-3)
    model = pretrain(store, Orientation.AXIAL, cfg, sched, DenoiserConfig.tiny()).model
    v = store.volume(store.records(Split.TRAIN)[0].scans[Orientation.AXIAL][0])
    for timestep in (10, 50):
        maps = [
            extract_features(model, v, TapPoint(timestep=timestep, block=block), sched, 0).data
            for block in Block
        ]
        for a, b in itertools.combinations(maps, 2):
            assert not torch.allclose(a, b)


def test_extract_desk_shape() -> None:
    model = build_denoiser(DenoiserConfig(), 0)
    v = random_volume(0, shape=(8, 32, 32))
    tap = TapPoint(timestep=30, block=Block.MID_2)
    fm = extract_features(model, v, tap, build_schedule(1000, 1e-4, 0.02), 0)
    assert (32, 2, 8, 8) == tuple(fm.data.shape)


def test_extract_batch() -> None:
    model = tiny_denoiser()
    sched = tiny_schedule()
    volumes = [random_volume(i, scan_id=f"P000{i}_sagittal_0") for i in range(3)]
    tap = TapPoint(timestep=10, block=Block.MID_2)
    with torch.no_grad():
        batch = extract_batch(model, volumes, tap, sched, 0)
    assert (3, *model.config.bottleneck_shape) == tuple(batch.shape)
    for i, v in enumerate(volumes):
        torch.testing.assert_close(extract_features(model, v, tap, sched, 0).data, batch[i])

    batch = extract_batch(model, volumes, tap, sched, 0)
    batch.sum().backward()
    used = model.group_parameters(
        ParamGroup.ENCODER, ParamGroup.TIME_EMBED, ParamGroup.BOTTLENECK
    )
    assert all(p.grad is not None for p in used)
    assert all(p.grad is None for p in model.group_parameters(ParamGroup.DECODER))


def test_extract_timestep_out_of_range() -> None:
    tap = TapPoint(timestep=100, block=Block.MID_0)
    with pytest.raises(ValidationFailure):
        tap.check(tiny_schedule())
    with pytest.raises(ValidationFailure):
        extract_features(tiny_denoiser(), random_volume(0), tap, tiny_schedule(), 0)


def test_FeatureMap_invalid() -> None:
    tap = TapPoint(timestep=10, block=Block.MID_0)
    with pytest.raises(ShapeMismatch):
        FeatureMap(torch.zeros((1, 8, 2, 2, 2)), tap, Orientation.AXIAL, "s")
    with pytest.raises(ShapeMismatch):
        FeatureMap(torch.zeros((0, 2, 2, 2)), tap, Orientation.AXIAL, "s")


def test_FeatureCache(tmp_path: Path) -> None:
    model = tiny_denoiser()
    sched = tiny_schedule()
    v = random_volume(4)
    tap = TapPoint(timestep=30, block=Block.MID_2)
    cache = FeatureCache(tmp_path, "ab" * 32, noise_seed=0)

    first = cache.get(model, v, tap, sched)
    second = cache.get(model, v, tap, sched)
    assert (1, 1) == (cache.misses, cache.hits)
    assert torch.equal(first.data, second.data)
    assert torch.equal(extract_features(model, v, tap, sched, 0).data, second.data)
    assert cache.key(v.scan_id, tap) != FeatureCache(tmp_path, "ab" * 32, 1).key(v.scan_id, tap)
    mid_1 = TapPoint(timestep=30, block=Block.MID_1)
    assert cache.key(v.scan_id, tap) != cache.key(v.scan_id, mid_1)

    other = FeatureCache(tmp_path, "cd" * 32, noise_seed=0)
    other.get(model, v, tap, sched)
    assert (1, 0) == (other.misses, other.hits)


def test_FeatureCache_corrupt(tmp_path: Path) -> None:
    model = tiny_denoiser()
    sched = tiny_schedule()
    v = random_volume(4)
    tap = TapPoint(timestep=30, block=Block.MID_0)
    cache = FeatureCache(tmp_path, "ab" * 32, noise_seed=0)
    cache.get(model, v, tap, sched)

    (payload,) = cache.root.glob("*.f32")
    payload.write_bytes(b"\x00" * len(payload.read_bytes()))
    fm = cache.get(model, v, tap, sched)
    assert (2, 0) == (cache.misses, cache.hits)
    assert torch.equal(extract_features(model, v, tap, sched, 0).data, fm.data)
    cache.get(model, v, tap, sched)
    assert 1 == cache.hits
