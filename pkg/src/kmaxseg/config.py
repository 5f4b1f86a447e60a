"""Network configuration shared by the encoder, pixel decoder, query decoder
and classification head."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Widths and counts for the full segmentation network.

    Stage widths double per stage starting from base_width; query_channels is
    the shared channel width C of pixel features, taps and object queries.
    """

    in_channels: int = 1
    base_width: int = 8
    num_stages: int = 4
    num_queries: int = 8
    query_channels: int = 32
    num_classes: int = 3
    rounds_per_tap: int = 1
    query_mlp_hidden: int | None = None
    classifier_hidden: int | None = None
    share_query_mlp: bool = True
    upsample_mode: str = "trilinear"
    aux_supervision: bool = False

    def __post_init__(self):
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        if self.num_queries < self.num_classes:
            raise ConfigError(
                f"need at least one query per class: num_queries={self.num_queries} "
                f"< num_classes={self.num_classes}"
            )
        if self.upsample_mode not in ("trilinear", "nearest"):
            raise ConfigError(f"unsupported upsample_mode {self.upsample_mode!r}")

    @property
    def stride(self) -> int:
        """Total downsampling factor; input crops must be divisible by it."""
        return 2 ** self.num_stages

    def stage_width(self, stage: int) -> int:
        """Channel width at encoder stage `stage` (stage 0 = stem)."""
        if stage == 0:
            return self.base_width
        return self.base_width * 2 ** (stage - 1)

    def validate_crop(self, crop_shape) -> None:
        if any(int(c) % self.stride != 0 for c in crop_shape):
            raise ConfigError(
                f"crop shape {tuple(crop_shape)} not divisible by {self.stride}"
            )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)
