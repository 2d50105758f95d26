"""Collapse a bottleneck feature map into a vector.

The feature map `(C, D, H, W)` is read as `N = D*H*W` tokens of width `C`.

| method | output                        | length |
|--------|-------------------------------|--------|
| GAP    | token mean                    | C      |
| GLP    | [token mean, attention-weighted token sum] with a C -> C/8 -> 1 scorer | 2C |
| SAP    | [token mean, token mean of multi-head self-attention] | 2C |

SAP uses no positional encoding; its head count defaults to `C / 16`, which keeps
the per-head width at 16.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum, unique
from typing import ClassVar, Final

import torch
from torch import nn

from planediff.exceptions import ConfigurationError, ShapeMismatch
from planediff.feature_tap import FeatureMap, TapPoint
from planediff.volume import Orientation

logger: Final = logging.getLogger(__name__)

SAP_HEAD_DIM: Final = 16


@unique
class PoolingMethod(str, Enum):
    GAP = "gap"
    GLP = "glp"
    SAP = "sap"

    def output_dim(self, channels: int) -> int:
        return channels if self is PoolingMethod.GAP else 2 * channels


@dataclass(frozen=True)
class PooledEmbedding:
    vector: torch.Tensor
    method: PoolingMethod
    channels: int
    tap: TapPoint
    orientation: Orientation
    scan_id: str

    def __post_init__(self) -> None:
        expected = self.method.output_dim(self.channels)
        if tuple(self.vector.shape) != (expected,):
            raise ShapeMismatch(
                f"{self.method.value} embedding must have length {expected},"
                f" got {tuple(self.vector.shape)}"
            )


def tokens(features: torch.Tensor) -> torch.Tensor:
    """(B, C, D, H, W) -> (B, N, C)."""
    if features.dim() != 5 or features[0].numel() == 0:
        raise ShapeMismatch(f"expected non-empty (B, C, D, H, W), got {tuple(features.shape)}")
    return features.flatten(2).transpose(1, 2)


class Pooling(nn.Module):
    """A pooling operator over (B, C, D, H, W) features."""

    method: ClassVar[PoolingMethod]


class GAPPool(Pooling):
    method = PoolingMethod.GAP

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return tokens(features).mean(dim=1)


class GLPPool(Pooling):
    """Global mean concatenated with a softmax-scored local summary."""

    method = PoolingMethod.GLP

    def __init__(self, channels: int) -> None:
        super().__init__()
        hidden = max(1, channels // 8)
        self.score = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """Attention over positions, (B, N), rows summing to 1."""
        return torch.softmax(self.score(x).squeeze(-1), dim=-1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = tokens(features)
        local = torch.einsum("bn,bnc->bc", self.weights(x), x)
        return torch.cat([x.mean(dim=1), local], dim=-1)


class SAPPool(Pooling):
    """Global mean concatenated with the token mean of multi-head self-attention.

    The projections are right-multiplied: `Q = X @ w_q`, and the head outputs,
    concatenated, are mapped by `@ w_o`.
    """

    method = PoolingMethod.SAP

    def __init__(self, channels: int, heads: int | None = None) -> None:
        super().__init__()
        heads = heads if heads is not None else max(1, channels // SAP_HEAD_DIM)
        if heads <= 0 or channels % heads:
            raise ConfigurationError(f"{channels} channels cannot be split into {heads} heads")
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(channels, channels))
        self.w_k = nn.Parameter(torch.empty(channels, channels))
        self.w_v = nn.Parameter(torch.empty(channels, channels))
        self.w_o = nn.Parameter(torch.empty(channels, channels))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.xavier_uniform_(w)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Per-head attention matrices, (B, h, N, N), rows summing to 1."""
        q, k = self._split(x @ self.w_q), self._split(x @ self.w_k)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        """Multi-head self-attention output, (B, N, C)."""
        heads = self.attention(x) @ self._split(x @ self.w_v)
        return heads.transpose(1, 2).reshape(x.shape) @ self.w_o

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = tokens(features)
        return torch.cat([x.mean(dim=1), self.attend(x).mean(dim=1)], dim=-1)


def build_pooling(method: PoolingMethod | str, channels: int) -> Pooling:
    method = PoolingMethod(method)
    if method is PoolingMethod.GAP:
        return GAPPool()
    if method is PoolingMethod.GLP:
        return GLPPool(channels)
    return SAPPool(channels)


def _embed(fm: FeatureMap, module: Pooling) -> PooledEmbedding:
    vector = module(fm.data.unsqueeze(0))[0]
    return PooledEmbedding(
        vector=vector,
        method=module.method,
        channels=fm.channels,
        tap=fm.tap,
        orientation=fm.orientation,
        scan_id=fm.scan_id,
    )


def gap(fm: FeatureMap) -> PooledEmbedding:
    return _embed(fm, GAPPool())


def glp(fm: FeatureMap, params: GLPPool) -> PooledEmbedding:
    return _embed(fm, params)


def sap(fm: FeatureMap, params: SAPPool) -> PooledEmbedding:
    return _embed(fm, params)


def pool(fm: FeatureMap, module: Pooling) -> PooledEmbedding:
    return _embed(fm, module)
