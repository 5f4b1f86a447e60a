"""ConvNeXt-style 3D encoder and convolutional upsampling decoder.

The encoder is a stem plus `num_stages` stages; each stage halves the spatial
dims with a stride-2 downsampling block and refines with a depthwise-conv
residual block. The decoder mirrors it with upsample + skip fusion and emits
the per-voxel pixel features plus coarse-to-fine taps for the query decoder,
all projected to the query channel width.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError


@dataclass
class FeatureMap:
    """Channels-first feature tensor (batch, C, d, h, w) with its stage index."""

    data: torch.Tensor
    stage: int

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[-3:])


@dataclass
class EncoderFeatures:
    """Stem output (full resolution) plus one feature tensor per stage."""

    stem: torch.Tensor
    stages: list[torch.Tensor]


@dataclass
class BackboneOutput:
    """Full-resolution pixel features plus query-decoder taps, coarse to fine."""

    pixel_features: FeatureMap
    taps: list[FeatureMap]


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel dim only, for (B, C, *spatial)."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        xhat = (x - mu) / torch.sqrt(var + self.eps)
        shape = (1, -1) + (1,) * (x.dim() - 2)
        return xhat * self.weight.view(shape) + self.bias.view(shape)


def _init_conv_or_linear(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv3d, nn.Linear)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class UXBlock(nn.Module):
    """Depthwise 7^3 conv -> channel norm -> pointwise x4 expansion -> GELU ->
    pointwise projection, added residually.

    The final projection is zero-initialized so the block starts as identity.
    """

    def __init__(self, channels: int, expansion: int = 4):
        super().__init__()
        self.dwconv = nn.Conv3d(channels, channels, 7, padding=3, groups=channels)
        self.norm = ChannelLayerNorm(channels)
        self.pw1 = nn.Conv3d(channels, expansion * channels, 1)
        self.act = nn.GELU()
        self.pw2 = nn.Conv3d(expansion * channels, channels, 1)
        self.apply(_init_conv_or_linear)
        nn.init.zeros_(self.pw2.weight)
        nn.init.zeros_(self.pw2.bias)

    def forward(self, x):
        return x + self.pw2(self.act(self.pw1(self.norm(self.dwconv(x)))))


class DownsampleBlock(nn.Module):
    """Channel norm followed by a 2^3 stride-2 convolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.norm = ChannelLayerNorm(in_channels)
        self.conv = nn.Conv3d(in_channels, out_channels, 2, stride=2)
        self.apply(_init_conv_or_linear)

    def forward(self, x):
        return self.conv(self.norm(x))


class ConvBlock(nn.Module):
    """3^3 conv -> channel norm -> GELU, used on the decoder path."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.norm = ChannelLayerNorm(out_channels)
        self.act = nn.GELU()
        self.apply(_init_conv_or_linear)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class Encoder(nn.Module):
    """Stem plus `num_stages` (downsample, depthwise block) stages."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w0 = config.stage_width(0)
        self.stem = nn.Conv3d(config.in_channels, w0, 3, padding=1)
        self.stem_norm = ChannelLayerNorm(w0)
        downs, blocks = [], []
        for i in range(1, config.num_stages + 1):
            downs.append(DownsampleBlock(config.stage_width(i - 1), config.stage_width(i)))
            blocks.append(UXBlock(config.stage_width(i)))
        self.downsamples = nn.ModuleList(downs)
        self.blocks = nn.ModuleList(blocks)
        _init_conv_or_linear(self.stem)

    def forward(self, x: torch.Tensor) -> EncoderFeatures:
        if x.dim() != 5:
            raise ValueError(f"expected (B, C, D, H, W) input, got shape {tuple(x.shape)}")
        stride = self.config.stride
        if any(s % stride != 0 for s in x.shape[-3:]):
            raise ConfigError(
                f"input spatial shape {tuple(x.shape[-3:])} not divisible by {stride}"
            )
        stem = self.stem_norm(self.stem(x))
        stages = []
        h = stem
        for down, block in zip(self.downsamples, self.blocks):
            h = block(down(h))
            stages.append(h)
        return EncoderFeatures(stem=stem, stages=stages)


def build_encoder(config: ModelConfig, crop_shape=None) -> Encoder:
    """Construct the encoder, optionally validating the intended crop shape."""
    if crop_shape is not None:
        config.validate_crop(crop_shape)
    return Encoder(config)


def _stack_batch(batch, dtype=None) -> torch.Tensor:
    """Stack a batch of crops into a (B, 1, D, H, W) tensor.

    Accepts a ready tensor, or a list of 3D arrays / Volume objects, which
    must share one shape.
    """
    if isinstance(batch, torch.Tensor):
        return batch
    arrays = []
    for item in batch:
        vox = getattr(item, "voxels", item)
        arrays.append(torch.as_tensor(vox, dtype=dtype or torch.float32))
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"batch crops must share one shape, got {sorted(shapes)}")
    return torch.stack(arrays).unsqueeze(1)


def encode(encoder: Encoder, batch) -> list[FeatureMap]:
    """Run the encoder on a uniform batch of crops; one FeatureMap per stage."""
    x = _stack_batch(batch, dtype=next(encoder.parameters()).dtype)
    feats = encoder(x)
    return [FeatureMap(data=t, stage=i + 1) for i, t in enumerate(feats.stages)]


class PixelDecoder(nn.Module):
    """Upsampling path with skip fusion mirroring the encoder.

    Each level does a x2 upsample, concatenates the matching encoder feature
    and applies two conv blocks. Emits full-resolution pixel features plus
    taps at the bottleneck and each fused level down to stage 2 (stage 1 when
    only one stage exists), all projected to the query channel width.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.query_channels
        n = config.num_stages
        self.tap_stages = [1] if n == 1 else list(range(n, 1, -1))
        ups = []
        for i in range(n - 1, 0, -1):  # produce features at stage i resolution
            ups.append(nn.Sequential(
                ConvBlock(config.stage_width(i + 1) + config.stage_width(i),
                          config.stage_width(i)),
                ConvBlock(config.stage_width(i), config.stage_width(i)),
            ))
        self.fuse = nn.ModuleList(ups)
        w1 = config.stage_width(1)
        w0 = config.stage_width(0)
        self.final = nn.Sequential(ConvBlock(w1 + w0, w0), ConvBlock(w0, w0))
        self.tap_projs = nn.ModuleDict({
            str(s): nn.Conv3d(config.stage_width(s), c, 1) for s in self.tap_stages
        })
        self.pixel_proj = nn.Conv3d(w0, c, 1)
        for m in (self.pixel_proj, *self.tap_projs.values()):
            _init_conv_or_linear(m)

    def _up(self, x):
        mode = self.config.upsample_mode
        return F.interpolate(x, scale_factor=2, mode=mode,
                             align_corners=False if mode == "trilinear" else None)

    def forward(self, features: EncoderFeatures) -> BackboneOutput:
        n = self.config.num_stages
        if len(features.stages) != n:
            raise ValueError(
                f"expected {n} stage features, got {len(features.stages)}"
            )
        taps: dict[int, torch.Tensor] = {}
        x = features.stages[-1]
        if n in self.tap_stages:
            taps[n] = self.tap_projs[str(n)](x)
        for level, fuse in zip(range(n - 1, 0, -1), self.fuse):
            skip = features.stages[level - 1]
            x = self._up(x)
            if skip.shape[1] + x.shape[1] != fuse[0].conv.in_channels:
                raise ConfigError(
                    f"skip channels {skip.shape[1]} do not match decoder level "
                    f"expecting {fuse[0].conv.in_channels - x.shape[1]}"
                )
            x = fuse(torch.cat([x, skip], dim=1))
            if level in self.tap_stages:
                taps[level] = self.tap_projs[str(level)](x)
        x = self._up(x)
        x = self.final(torch.cat([x, features.stem], dim=1))
        pixel = self.pixel_proj(x)
        tap_maps = [FeatureMap(data=taps[s], stage=s) for s in self.tap_stages]
        return BackboneOutput(pixel_features=FeatureMap(data=pixel, stage=0),
                              taps=tap_maps)


def build_decoder(config: ModelConfig) -> PixelDecoder:
    return PixelDecoder(config)


def decode_pixels(decoder: PixelDecoder, features: EncoderFeatures) -> BackboneOutput:
    """Decode stage features to pixel features and query-decoder taps."""
    return decoder(features)
