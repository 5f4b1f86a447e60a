"""From final queries and pixel features to per-voxel class probabilities.

Query responses (pixel-by-query affinities) are softmaxed over queries into a
soft exclusive mask prediction; a shared MLP classifies each query into the K
classes; the product of the two gives the segmentation, whose rows sum to 1
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import _init_conv_or_linear
from .errors import NumericError


@dataclass
class ClusterClassification:
    """Per-query class probabilities with the raw logits retained.

    The logits are the query distribution used by the query-level
    consistency loss.
    """

    probs: torch.Tensor   # (..., N, K)
    logits: torch.Tensor  # (..., N, K)


@dataclass
class Segmentation:
    """Per-voxel class probabilities (rows sum to 1) plus the crop shape."""

    probs: torch.Tensor  # (..., M, K)
    origin_shape: tuple[int, int, int]


def query_response(pixels: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
    """Raw voxel-by-query affinity logits: pixels (..., M, C) x queries
    (..., N, C) -> (..., M, N)."""
    if pixels.shape[-1] != queries.shape[-1]:
        raise ValueError(
            f"channel mismatch: pixels C={pixels.shape[-1]}, "
            f"queries C={queries.shape[-1]}"
        )
    return pixels @ queries.transpose(-1, -2)


def mask_predict(response: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over queries (max-subtracted for stability)."""
    if not torch.isfinite(response).all():
        raise NumericError("query response contains non-finite values")
    return torch.softmax(response, dim=-1)


class ClusterClassifier(nn.Module):
    """Two-layer MLP, shared across queries, mapping each query to K logits."""

    def __init__(self, channels: int, num_classes: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, num_classes)
        self.apply(_init_conv_or_linear)

    def forward(self, queries: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(queries)))


def classify_clusters(classifier: ClusterClassifier,
                      queries: torch.Tensor) -> ClusterClassification:
    """Classify each query; keeps both softmax probabilities and raw logits."""
    logits = classifier(queries)
    return ClusterClassification(probs=torch.softmax(logits, dim=-1), logits=logits)


def aggregate(mask_probs: torch.Tensor, cluster_probs: torch.Tensor) -> torch.Tensor:
    """Combine soft masks (..., M, N) with query classifications (..., N, K)
    into per-voxel class probabilities (..., M, K); rows sum to 1."""
    if mask_probs.shape[-1] != cluster_probs.shape[-2]:
        raise ValueError(
            f"query count mismatch: masks N={mask_probs.shape[-1]}, "
            f"classifications N={cluster_probs.shape[-2]}"
        )
    return mask_probs @ cluster_probs
