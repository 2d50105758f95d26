"""Test the GAP, GLP and SAP pooling operators."""

from __future__ import annotations

import json
import math
from pathlib import Path

import pytest
import torch

from planediff.denoiser import Block
from planediff.exceptions import ConfigurationError, ShapeMismatch
from planediff.feature_tap import FeatureMap, TapPoint
from planediff.pooling import (
    GAPPool,
    GLPPool,
    PooledEmbedding,
    PoolingMethod,
    SAPPool,
    build_pooling,
    gap,
    glp,
    pool,
    sap,
    tokens,
)
from planediff.volume import Orientation

VECTORS = Path(__file__).parent / "vectors"
TAP = TapPoint(timestep=30, block=Block.MID_2)


def _features(token_list: list, channels: int) -> torch.Tensor:
    """Tokens of width C laid out along W of a (1, C, 1, 1, N) map."""
    return torch.tensor(token_list).T.reshape(1, channels, 1, 1, len(token_list))


def _feature_map(data: torch.Tensor) -> FeatureMap:
    return FeatureMap(data, TAP, Orientation.CORONAL, "P0000_coronal_0")


def test_tokens() -> None:
    x = torch.arange(24.0).reshape(1, 3, 2, 2, 2)
    t = tokens(x)
    assert (1, 8, 3) == tuple(t.shape)
    assert [0.0, 8.0, 16.0] == t[0, 0].tolist()
    with pytest.raises(ShapeMismatch):
        tokens(torch.zeros(3, 2, 2, 2))
    with pytest.raises(ShapeMismatch):
        tokens(torch.zeros(1, 3, 0, 2, 2))


@pytest.mark.parametrize("method, out", [("gap", 8), ("glp", 16), ("sap", 16)])
def test_output_dim(method: str, out: int) -> None:
    module = build_pooling(method, 8)
    assert PoolingMethod(method) is module.method
    assert out == PoolingMethod(method).output_dim(8)
    assert (3, out) == tuple(module(torch.randn(3, 8, 2, 2, 2)).shape)


def test_gap() -> None:
    assert [2.0] == GAPPool()(_features([[1.0], [3.0]], 1))[0].tolist()
    constant = torch.full((1, 4, 2, 3, 2), 0.5)
    assert torch.equal(torch.full((1, 4), 0.5), GAPPool()(constant))


def test_gap_permutation_invariant() -> None:
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 4, 2, 2, 2, generator=g)
    perm = torch.randperm(8, generator=g)
    shuffled = x.flatten(2)[:, :, perm].reshape(x.shape)
    torch.testing.assert_close(GAPPool()(x), GAPPool()(shuffled))


def test_glp_zero_scorer_is_gap() -> None:
    module = GLPPool(16)
    for p in module.parameters():
        torch.nn.init.zeros_(p)
    x = torch.randn(2, 16, 2, 2, 2)
    mean = GAPPool()(x)
    torch.testing.assert_close(torch.cat([mean, mean], dim=-1), module(x))


def test_glp_scored() -> None:
    module = GLPPool(1)
    first, _, last = module.score
    with torch.no_grad():
        first.weight.fill_(1.0)
        first.bias.fill_(0.0)
        last.weight.fill_(-math.log(3.0) / 4)
        last.bias.fill_(5 * math.log(3.0) / 4)
    x = _features([[1.0], [5.0]], 1)
    torch.testing.assert_close(torch.tensor([[0.75, 0.25]]), module.weights(tokens(x)))
    torch.testing.assert_close(torch.tensor([[3.0, 2.0]]), module(x))


def test_glp_weights_sum_to_one() -> None:
    x = tokens(torch.randn(3, 16, 2, 2, 2))
    w = GLPPool(16).weights(x)
    assert (3, 8) == tuple(w.shape)
    torch.testing.assert_close(torch.ones(3), w.sum(dim=-1))


def test_sap_single_token() -> None:
    module = SAPPool(4, heads=2)
    with torch.no_grad():
        for w in (module.w_q, module.w_k, module.w_v, module.w_o):
            w.copy_(torch.eye(4))
    x = torch.tensor([1.0, -2.0, 0.5, 3.0]).reshape(1, 4, 1, 1, 1)
    torch.testing.assert_close(torch.cat([x.flatten(), x.flatten()])[None], module(x))


def test_sap_uniform_attention() -> None:
    module = SAPPool(4, heads=1)
    with torch.no_grad():
        module.w_q.zero_()
        module.w_k.zero_()
    x = torch.randn(1, 4, 2, 2, 1)
    mean = tokens(x).mean(dim=1)
    torch.testing.assert_close(torch.full((1, 1, 4, 4), 0.25), module.attention(tokens(x)))
    expected = torch.cat([mean, mean @ module.w_v @ module.w_o], dim=-1)
    torch.testing.assert_close(expected, module(x))


def test_sap_two_tokens() -> None:
    vector = json.loads((VECTORS / "sap_two_token.json").read_text())
    module = SAPPool(vector["channels"], heads=vector["heads"])
    with torch.no_grad():
        for name in ("w_q", "w_k", "w_v", "w_o"):
            getattr(module, name).copy_(torch.tensor(vector[name]))
    x = _features(vector["tokens"], vector["channels"])
    torch.testing.assert_close(
        torch.tensor(vector["attention"])[None, None], module.attention(tokens(x))
    )
    torch.testing.assert_close(torch.tensor(vector["expected"])[None], module(x))


def test_sap_attention_rows_sum_to_one() -> None:
    module = SAPPool(32)
    assert 2 == module.heads
    a = module.attention(tokens(torch.randn(2, 32, 2, 2, 2)))
    assert (2, 2, 8, 8) == tuple(a.shape)
    torch.testing.assert_close(torch.ones(2, 2, 8), a.sum(dim=-1))


@pytest.mark.parametrize("channels, heads", [(6, 4), (8, 0), (8, -1)])
def test_sap_heads_invalid(channels: int, heads: int) -> None:
    with pytest.raises(ConfigurationError):
        SAPPool(channels, heads=heads)


def test_pooled_embedding() -> None:
    fm = _feature_map(torch.randn(8, 2, 2, 2))
    e = gap(fm)
    assert (8,) == tuple(e.vector.shape)
    assert PoolingMethod.GAP is e.method
    assert (TAP, Orientation.CORONAL, "P0000_coronal_0") == (e.tap, e.orientation, e.scan_id)
    assert (16,) == tuple(glp(fm, GLPPool(8)).vector.shape)
    assert (16,) == tuple(sap(fm, SAPPool(8)).vector.shape)
    torch.testing.assert_close(e.vector, pool(fm, GAPPool()).vector)


def test_pooled_embedding_invalid() -> None:
    with pytest.raises(ShapeMismatch):
        PooledEmbedding(torch.zeros(8), PoolingMethod.GLP, 8, TAP, Orientation.AXIAL, "s")
    with pytest.raises(ShapeMismatch):
        PooledEmbedding(torch.zeros(1, 8), PoolingMethod.GAP, 8, TAP, Orientation.AXIAL, "s")
