"""Task heads on top of pooled or fused features and bottleneck feature maps.

Classification uses a single linear layer trained with binary cross-entropy.
Segmentation uses a shallow decoder from a bottleneck feature map back to the
input resolution, trained with cross-entropy plus soft Dice.
"""

from __future__ import annotations

import logging
from typing import Final, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from planediff.exceptions import ShapeMismatch, ValidationFailure

logger: Final = logging.getLogger(__name__)

DICE_SMOOTH: Final = 1.0


class ClassifierHead(nn.Module):
    """One linear map from features to K logits, no hidden units."""

    def __init__(self, in_dim: int, n_labels: int) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.n_labels = n_labels
        self.linear = nn.Linear(in_dim, n_labels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"head expects {self.in_dim} features, got {x.shape[-1]}")
        return self.linear(x)


class SegHead(nn.Module):
    """3x3x3 conv, SiLU, trilinear upsampling to the volume size, 1x1x1 conv to S + 1 classes."""

    def __init__(self, channels: int, n_structures: int, hidden: int | None = None) -> None:
        super().__init__()
        hidden = hidden or channels
        self.n_classes = n_structures + 1
        self.conv = nn.Conv3d(channels, hidden, 3, padding=1)
        self.classify = nn.Conv3d(hidden, self.n_classes, 1)

    def forward(self, features: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
        """(B, C', D', H', W') features to (B, S + 1, D, H, W) class scores."""
        h = F.silu(self.conv(features))
        h = F.interpolate(h, size=tuple(size), mode="trilinear", align_corners=False)
        return self.classify(h)


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over foreground classes of `1 - (2|P.T| + 1) / (|P| + |T| + 1)`.

    `probs` is (B, S + 1, D, H, W) with class 0 the background, `target` is the
    (B, D, H, W) class map.  Sums run over the batch and all voxels.
    """
    if probs.dim() != 5 or target.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeMismatch(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    n_classes = probs.shape[1]
    if n_classes < 2:
        raise ValidationFailure("soft Dice needs at least one foreground class")
    onehot = F.one_hot(target.long(), n_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)[1:]
    total = probs.sum(dims)[1:] + onehot.sum(dims)[1:]
    dice = (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)
    return (1.0 - dice).mean()


def segmentation_loss(
    logits: torch.Tensor, target: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """`(ce + dice, ce, dice)` with equal weights."""
    ce = F.cross_entropy(logits, target.long())
    dice = soft_dice_loss(torch.softmax(logits, dim=1), target)
    return ce + dice, ce, dice


def weighted_bce(
    logits: torch.Tensor, target: torch.Tensor, weight: torch.Tensor, mean_weight: float = 1.0
) -> torch.Tensor:
    """`sum_i w_i * mean_k bce_ik / (len(batch) * mean_weight)`.

    `mean_weight` is the mean sample weight of the whole training set, so the
    normalizer does not depend on which samples share a minibatch.  With
    inverse-frequency weights (each patient's combinations sum to 1), the
    sample-averaged epoch loss is the mean over patients and a patient with 64
    combinations counts as much as a patient with one.
    """
    if weight.shape != logits.shape[:1]:
        raise ShapeMismatch(f"{weight.numel()} weights for {logits.shape[0]} samples")
    if mean_weight <= 0.0:
        raise ValidationFailure(f"mean_weight must be positive, got {mean_weight}")
    per_sample = F.binary_cross_entropy_with_logits(logits, target, reduction="none").mean(-1)
    return (weight * per_sample).sum() / (len(weight) * mean_weight)
