"""Object queries updated by k-means cross-attention.

Instead of a spatial softmax over voxels, every voxel is hard-assigned to its
highest-affinity query (cluster-wise argmax); queries then move toward the
mean feature of their assigned voxels, residually. The hard assignment is a
constant in the backward pass: gradients flow through pixel features and
queries only.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .backbone import FeatureMap, _init_conv_or_linear


def flatten_feature_map(fmap: FeatureMap | torch.Tensor) -> torch.Tensor:
    """(B, C, d, h, w) feature map -> (B, d*h*w, C) pixel-feature matrix."""
    t = fmap.data if isinstance(fmap, FeatureMap) else fmap
    return t.flatten(2).transpose(1, 2)


def cluster_assign(queries: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """Hard one-hot assignment of each pixel to its argmax-affinity query.

    queries: (..., N, C); pixels: (..., M, C). Returns (..., M, N) with one 1
    per row. Ties break to the lowest query index. The result carries no
    gradient.
    """
    if queries.shape[-1] != pixels.shape[-1]:
        raise ValueError(
            f"channel mismatch: queries C={queries.shape[-1]}, "
            f"pixels C={pixels.shape[-1]}"
        )
    with torch.no_grad():
        affinity = queries @ pixels.transpose(-1, -2)  # (..., N, M)
        idx = affinity.argmax(dim=-2)  # first max wins on ties
        return F.one_hot(idx, num_classes=queries.shape[-2]).to(pixels.dtype)


def cluster_update(queries: torch.Tensor, assignment: torch.Tensor,
                   pixels: torch.Tensor) -> torch.Tensor:
    """Residual k-means centroid step: each query moves by the mean feature of
    its assigned pixels; queries owning no pixels stay unchanged.

    Gradients flow through queries and pixels, not the assignment.
    """
    if assignment.shape[-2] != pixels.shape[-2] or assignment.shape[-1] != queries.shape[-2]:
        raise ValueError(
            f"shape mismatch: assignment {tuple(assignment.shape)} vs "
            f"queries {tuple(queries.shape)}, pixels {tuple(pixels.shape)}"
        )
    if queries.shape[-1] != pixels.shape[-1]:
        raise ValueError(
            f"channel mismatch: queries C={queries.shape[-1]}, "
            f"pixels C={pixels.shape[-1]}"
        )
    a = assignment.detach()
    totals = a.transpose(-1, -2) @ pixels  # (..., N, C)
    counts = a.sum(dim=-2).unsqueeze(-1)  # (..., N, 1)
    means = totals / counts.clamp(min=1.0)
    return queries + means


class KMaxBlock(nn.Module):
    """One assign -> centroid-update -> per-query MLP round.

    The MLP is shared across queries and applied residually with layer
    normalization; its final projection starts at zero, so a freshly built
    block reduces to the centroid update.
    """

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * channels
        self.norm = nn.LayerNorm(channels)
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, channels)
        self.apply(_init_conv_or_linear)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, queries: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        assignment = cluster_assign(queries, pixels)
        updated = cluster_update(queries, assignment, pixels)
        return updated + self.fc2(self.act(self.fc1(self.norm(updated))))


def run_decoder_stack(
    queries: torch.Tensor,
    taps: list[FeatureMap],
    rounds: int,
    blocks: KMaxBlock | list[KMaxBlock],
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Apply kmax blocks over the taps, coarse to fine, `rounds` times per tap.

    Returns the final queries and one snapshot per block application (for
    auxiliary supervision). A single block may be shared across taps, or one
    block given per tap.
    """
    if not taps:
        raise ValueError("tap list must not be empty")
    if isinstance(blocks, KMaxBlock):
        blocks = [blocks] * len(taps)
    if len(blocks) != len(taps):
        raise ValueError(f"expected {len(taps)} blocks, got {len(blocks)}")
    snapshots = []
    for tap, block in zip(taps, blocks):
        pixels = flatten_feature_map(tap)
        for _ in range(rounds):
            queries = block(queries, pixels)
            snapshots.append(queries)
    return queries, snapshots


class QueryDecoder(nn.Module):
    """Learnable query set plus the kmax block(s) run over the backbone taps."""

    def __init__(self, num_queries: int, channels: int, num_taps: int,
                 rounds_per_tap: int = 1, hidden: int | None = None,
                 share_block: bool = True):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(num_queries, channels))
        nn.init.trunc_normal_(self.queries, std=0.02)
        self.rounds_per_tap = rounds_per_tap
        if share_block:
            self.blocks = nn.ModuleList([KMaxBlock(channels, hidden)])
        else:
            self.blocks = nn.ModuleList(
                [KMaxBlock(channels, hidden) for _ in range(num_taps)]
            )
        self.share_block = share_block
        self.num_taps = num_taps

    def forward(self, taps: list[FeatureMap]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        batch = taps[0].data.shape[0]
        q = self.queries.unsqueeze(0).expand(batch, -1, -1)
        blocks = self.blocks[0] if self.share_block else list(self.blocks)
        return run_decoder_stack(q, taps, self.rounds_per_tap, blocks)
