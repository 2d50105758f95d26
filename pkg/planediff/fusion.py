"""Combining the three orientations.

Feature-level strategies take the pooled embeddings `e_sag, e_cor, e_ax` (each of
width C') and produce one vector for a linear classifier:

- `simple_concat`: `[e_sag, e_cor, e_ax]`, width 3C'.
- `linear_add` / `linear_concat`: per-orientation projections `H_o = e_o @ W_o`
  to width E, then summed (E) or concatenated (3E).
- `cross_attention`: each projected `H_o` queries one partner in the cyclic
  order sagittal -> coronal -> axial -> sagittal through multi-head attention,
  and `LayerNorm(H_o + attended)` is concatenated (3E).

Label-level fusion (MPAE) takes the three orientation experts' logits `z`
(3 x K) and, for each label k, a small gate MLP maps `z[:, k]` to a softmax over
orientations, `alpha[:, k]`.  The fused logit is `sum_o alpha[o, k] * z[o, k]`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum, unique
from pathlib import Path
from typing import Final, Iterable, List, Sequence, Tuple, Union

import torch
from torch import nn

from planediff.exceptions import ConfigurationError, NumericError, ShapeMismatch, ValidationFailure
from planediff.pooling import PooledEmbedding
from planediff.volume import ORIENTATIONS

logger: Final = logging.getLogger(__name__)

CROSS_ATTENTION_HEADS: Final = 4
GATE_HIDDEN: Final = 16
GATE_DROPOUT: Final = 0.1
PARTNER: Final = (1, 2, 0)
"""Index of the orientation each orientation attends to, in `ORIENTATIONS` order."""
GATE_CSV_HEADER: Final = ("patient_id", "label", "alpha_sag", "alpha_cor", "alpha_ax")


@unique
class FusionStrategy(str, Enum):
    SIMPLE_CONCAT = "simple_concat"
    LINEAR_ADD = "linear_add"
    LINEAR_CONCAT = "linear_concat"
    CROSS_ATTENTION = "cross_attention"
    MPAE = "mpae"

    @property
    def feature_level(self) -> bool:
        return self is not FusionStrategy.MPAE

    def output_dim(self, width: int, embed_dim: int) -> int:
        if self is FusionStrategy.SIMPLE_CONCAT:
            return 3 * width
        if self is FusionStrategy.LINEAR_ADD:
            return embed_dim
        if self is FusionStrategy.MPAE:
            raise ConfigurationError("MPAE fuses logits, not features")
        return 3 * embed_dim


@dataclass(frozen=True)
class FusedFeature:
    vector: torch.Tensor
    strategy: FusionStrategy


Embedding = Union[PooledEmbedding, torch.Tensor]


def _vectors(*embeddings: Embedding) -> Tuple[torch.Tensor, ...]:
    vs = tuple(e.vector if isinstance(e, PooledEmbedding) else e for e in embeddings)
    if len({v.shape for v in vs}) != 1:
        shapes = [tuple(v.shape) for v in vs]
        raise ShapeMismatch(f"orientation embeddings differ in shape: {shapes}")
    return vs


def simple_concat(e_sag: Embedding, e_cor: Embedding, e_ax: Embedding) -> FusedFeature:
    vector = torch.cat(_vectors(e_sag, e_cor, e_ax), dim=-1)
    return FusedFeature(vector, FusionStrategy.SIMPLE_CONCAT)


class FeatureFusion(nn.Module):
    """Feature-level fusion of (…, C') embeddings in orientation order."""

    strategy: FusionStrategy

    def __init__(self, width: int, embed_dim: int) -> None:
        super().__init__()
        self.width = width
        self.embed_dim = embed_dim

    @property
    def out_dim(self) -> int:
        return self.strategy.output_dim(self.width, self.embed_dim)

    def fuse(self, e_sag: torch.Tensor, e_cor: torch.Tensor, e_ax: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, e_sag: torch.Tensor, e_cor: torch.Tensor, e_ax: torch.Tensor) -> torch.Tensor:
        return self.fuse(*_vectors(e_sag, e_cor, e_ax))


class SimpleConcat(FeatureFusion):
    strategy = FusionStrategy.SIMPLE_CONCAT

    def fuse(self, e_sag: torch.Tensor, e_cor: torch.Tensor, e_ax: torch.Tensor) -> torch.Tensor:
        return torch.cat([e_sag, e_cor, e_ax], dim=-1)


class LinearFusion(FeatureFusion):
    """Per-orientation bias-free projections to width E, summed or concatenated."""

    def __init__(self, width: int, embed_dim: int, mode: FusionStrategy) -> None:
        super().__init__(width, embed_dim)
        if mode not in (FusionStrategy.LINEAR_ADD, FusionStrategy.LINEAR_CONCAT):
            raise ConfigurationError(f"{mode.value} is not a linear fusion mode")
        self.strategy = mode
        self.proj = nn.ModuleList([nn.Linear(width, embed_dim, bias=False) for _ in ORIENTATIONS])

    def project(self, *es: torch.Tensor) -> List[torch.Tensor]:
        if es[0].shape[-1] != self.width:
            raise ShapeMismatch(f"projection expects width {self.width}, got {es[0].shape[-1]}")
        return [p(e) for p, e in zip(self.proj, es)]

    def fuse(self, e_sag: torch.Tensor, e_cor: torch.Tensor, e_ax: torch.Tensor) -> torch.Tensor:
        hs = self.project(e_sag, e_cor, e_ax)
        if self.strategy is FusionStrategy.LINEAR_ADD:
            return hs[0] + hs[1] + hs[2]
        return torch.cat(hs, dim=-1)


class CrossAttention(nn.Module):
    """Multi-head attention of one query token over one key/value token, no biases."""

    def __init__(self, embed_dim: int, heads: int) -> None:
        super().__init__()
        if heads <= 0 or embed_dim % heads:
            raise ConfigurationError(f"E={embed_dim} cannot be split into {heads} heads")
        self.heads = heads
        self.q = nn.Linear(embed_dim, embed_dim, bias=False)
        self.k = nn.Linear(embed_dim, embed_dim, bias=False)
        self.v = nn.Linear(embed_dim, embed_dim, bias=False)
        self.o = nn.Linear(embed_dim, embed_dim, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(*x.shape[:-1], self.heads, x.shape[-1] // self.heads)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q = self._split(self.q(query))[..., None, :]
        k = self._split(self.k(context))[..., None, :]
        v = self._split(self.v(context))[..., None, :]
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        out = (torch.softmax(scores, dim=-1) @ v).squeeze(-2)
        return self.o(out.flatten(-2))


class CrossAttentionFusion(LinearFusion):
    def __init__(self, width: int, embed_dim: int, heads: int = CROSS_ATTENTION_HEADS) -> None:
        super().__init__(width, embed_dim, FusionStrategy.LINEAR_CONCAT)
        self.strategy = FusionStrategy.CROSS_ATTENTION
        self.attn = nn.ModuleList([CrossAttention(embed_dim, heads) for _ in ORIENTATIONS])
        self.norm = nn.ModuleList([nn.LayerNorm(embed_dim) for _ in ORIENTATIONS])

    def fuse(self, e_sag: torch.Tensor, e_cor: torch.Tensor, e_ax: torch.Tensor) -> torch.Tensor:
        hs = self.project(e_sag, e_cor, e_ax)
        out = [
            norm(h + attn(h, hs[partner]))
            for h, attn, norm, partner in zip(hs, self.attn, self.norm, PARTNER)
        ]
        return torch.cat(out, dim=-1)


def build_fusion(strategy: FusionStrategy | str, width: int, embed_dim: int) -> FeatureFusion:
    strategy = FusionStrategy(strategy)
    if strategy is FusionStrategy.SIMPLE_CONCAT:
        return SimpleConcat(width, embed_dim)
    if strategy is FusionStrategy.CROSS_ATTENTION:
        return CrossAttentionFusion(width, embed_dim)
    if strategy is FusionStrategy.MPAE:
        raise ConfigurationError("MPAE is built with MPAEGate")
    return LinearFusion(width, embed_dim, strategy)


def linear_fuse(
    e_sag: Embedding, e_cor: Embedding, e_ax: Embedding, params: LinearFusion
) -> FusedFeature:
    return FusedFeature(params(*_vectors(e_sag, e_cor, e_ax)), params.strategy)


def cross_attention_fuse(
    e_sag: Embedding, e_cor: Embedding, e_ax: Embedding, params: CrossAttentionFusion
) -> FusedFeature:
    return FusedFeature(params(*_vectors(e_sag, e_cor, e_ax)), FusionStrategy.CROSS_ATTENTION)


@dataclass(frozen=True)
class ExpertLogits:
    """Orientation expert logits, (…, 3, K), rows in `ORIENTATIONS` order."""

    z: torch.Tensor
    patient_id: str = ""

    def __post_init__(self) -> None:
        if self.z.dim() < 2 or self.z.shape[-2] != len(ORIENTATIONS):
            raise ShapeMismatch(f"expert logits must be (..., 3, K), got {tuple(self.z.shape)}")
        if not bool(torch.isfinite(self.z).all()):
            raise NumericError(f"non-finite expert logits for {self.patient_id}")


@dataclass(frozen=True)
class GateWeights:
    """Per-label orientation weights, (…, 3, K); each column is on the simplex."""

    alpha: torch.Tensor

    def __post_init__(self) -> None:
        if self.alpha.dim() < 2 or self.alpha.shape[-2] != len(ORIENTATIONS):
            raise ShapeMismatch(f"gate weights must be (..., 3, K), got {tuple(self.alpha.shape)}")
        sums = self.alpha.sum(dim=-2)
        if bool((self.alpha < 0).any()) or not torch.allclose(
            sums, torch.ones_like(sums), rtol=0.0, atol=1e-6
        ):
            raise ValidationFailure("gate weights must be non-negative with columns summing to 1")


class MPAEGate(nn.Module):
    """One 3 -> 16 -> 3 MLP per label; dropout is active in training mode only."""

    def __init__(
        self, n_labels: int, hidden: int = GATE_HIDDEN, dropout: float = GATE_DROPOUT
    ) -> None:
        super().__init__()
        self.n_labels = n_labels
        self.mlps = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Linear(3, hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(hidden, 3)
                )
                for _ in range(n_labels)
            ]
        )

    def scores(self, z: torch.Tensor) -> torch.Tensor:
        """(…, 3, K) logits -> (…, 3, K) gate scores."""
        if z.shape[-1] != self.n_labels:
            raise ShapeMismatch(f"gate built for K={self.n_labels}, got {z.shape[-1]}")
        return torch.stack([mlp(z[..., k]) for k, mlp in enumerate(self.mlps)], dim=-1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.scores(z), dim=-2)


def mpae_gate(z: ExpertLogits, gate_params: MPAEGate) -> GateWeights:
    return GateWeights(gate_params(z.z))


def mpae_fuse(z: ExpertLogits, alpha: GateWeights | torch.Tensor) -> torch.Tensor:
    """Fused logits (…, K)."""
    weights = alpha if isinstance(alpha, GateWeights) else GateWeights(alpha)
    if weights.alpha.shape != z.z.shape:
        raise ShapeMismatch(f"alpha {tuple(weights.alpha.shape)} != z {tuple(z.z.shape)}")
    return (weights.alpha * z.z).sum(dim=-2)


def write_gate_weights(path: Path, rows: Iterable[Tuple[str, GateWeights]]) -> Path:
    """Write one `patient_id,label,alpha_sag,alpha_cor,alpha_ax` row per patient and label."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(GATE_CSV_HEADER)
        for patient_id, weights in rows:
            alpha = weights.alpha.detach().to(torch.float64)
            for k in range(alpha.shape[-1]):
                writer.writerow([patient_id, k, *(repr(float(a)) for a in alpha[:, k])])
    return path


def read_gate_weights(path: Path) -> List[Tuple[str, int, Sequence[float]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        if tuple(next(reader)) != GATE_CSV_HEADER:
            raise ValidationFailure(f"{path} is not a gate-weight file")
        return [(row[0], int(row[1]), tuple(float(v) for v in row[2:])) for row in reader]
