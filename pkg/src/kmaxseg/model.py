"""Full segmentation network: encoder, pixel decoder, query decoder, heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import BackboneOutput, Encoder, PixelDecoder
from .config import ModelConfig
from .kmax import QueryDecoder, flatten_feature_map
from .postprocess import ClusterClassifier, aggregate, classify_clusters, mask_predict, query_response


@dataclass
class ModelOutput:
    """Everything a training step or inference pass needs from one forward."""

    seg_probs: torch.Tensor      # (B, M, K) per-voxel class probabilities
    qd_logits: torch.Tensor      # (B, N, K) query distribution logits
    mask_probs: torch.Tensor     # (B, M, N)
    cluster_probs: torch.Tensor  # (B, N, K)
    queries: torch.Tensor        # (B, N, C) final queries
    origin_shape: tuple[int, int, int]
    aux_seg_probs: list[torch.Tensor] | None = None

    def seg_volume(self) -> torch.Tensor:
        """Segmentation as (B, K, D, H, W)."""
        b, m, k = self.seg_probs.shape
        d, h, w = self.origin_shape
        return self.seg_probs.transpose(1, 2).reshape(b, k, d, h, w)


class SegModel(nn.Module):
    """Backbone + query decoder + cluster-classification postprocessing."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.pixel_decoder = PixelDecoder(config)
        self.query_decoder = QueryDecoder(
            num_queries=config.num_queries,
            channels=config.query_channels,
            num_taps=len(self.pixel_decoder.tap_stages),
            rounds_per_tap=config.rounds_per_tap,
            hidden=config.query_mlp_hidden,
            share_block=config.share_query_mlp,
        )
        self.classifier = ClusterClassifier(
            config.query_channels, config.num_classes, config.classifier_hidden
        )

    def forward(self, x: torch.Tensor) -> ModelOutput:
        feats = self.encoder(x)
        backbone: BackboneOutput = self.pixel_decoder(feats)
        queries, snapshots = self.query_decoder(backbone.taps)
        pixels = flatten_feature_map(backbone.pixel_features)

        mask_probs = mask_predict(query_response(pixels, queries))
        classification = classify_clusters(self.classifier, queries)
        seg = aggregate(mask_probs, classification.probs)

        aux = None
        if self.config.aux_supervision and len(snapshots) > 1:
            aux = []
            for snap in snapshots[:-1]:
                m = mask_predict(query_response(pixels, snap))
                c = classify_clusters(self.classifier, snap)
                aux.append(aggregate(m, c.probs))

        return ModelOutput(
            seg_probs=seg,
            qd_logits=classification.logits,
            mask_probs=mask_probs,
            cluster_probs=classification.probs,
            queries=queries,
            origin_shape=tuple(x.shape[-3:]),
            aux_seg_probs=aux,
        )


def build_model(config: ModelConfig) -> SegModel:
    return SegModel(config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
