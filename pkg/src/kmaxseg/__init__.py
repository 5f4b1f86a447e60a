"""Semi-supervised volumetric segmentation with k-means cross-attention
queries and dual contrastive consistency training."""

__version__ = "0.1.0"
