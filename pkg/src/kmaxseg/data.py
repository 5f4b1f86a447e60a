"""Volume containers, synthetic phantom generation, file I/O and the paired
weak/strong augmentation pipeline.

All operations are pure functions of (inputs, seed): calling twice with the
same arguments produces bit-identical results.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class Volume:
    """A 3D scalar grid with physical voxel spacing in mm.

    voxels has shape (D, H, W), float32; spacing is per-axis and strictly
    positive.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume intensities must be finite")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class LabelMask:
    """Integer class grid aligned with a Volume; values lie in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {self.labels.shape}")
        self.num_classes = int(self.num_classes)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError(
                f"label values must lie in [0, {self.num_classes}), "
                f"found {int(self.labels.max())}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class SpatialRecord:
    """The spatial transform shared by both views of an augmented pair."""

    crop_offset: tuple[int, int, int]
    crop_shape: tuple[int, int, int]
    flips: tuple[bool, bool, bool]


@dataclass
class AugmentedPair:
    """Weak/strong views of one volume under an identical spatial transform.

    Only intensity transforms differ between the views; the optional mask is
    transformed spatially only and stays aligned with both.
    """

    weak: Volume
    strong: Volume
    mask_weak: LabelMask | None
    spatial_record: SpatialRecord


@dataclass
class PhantomConfig:
    """Intensity and geometry model for the synthetic organ/tumor phantoms.

    Class means and noise sigma follow a simple "separable but overlapping"
    regime. mean_jitter shifts each class mean by its own per-volume uniform
    draw in [-mean_jitter, mean_jitter], emulating contrast drift between
    acquisitions; a shared shift would be removed by standardization, so the
    draws are independent per class.
    """

    class_means: tuple[float, ...] = (0.2, 0.6, 0.9)
    noise_sigma: float = 0.1
    mean_jitter: float = 0.0
    organ_axis_range: tuple[float, float] = (0.5, 0.85)
    organ_center_jitter: float = 0.05
    tumor_axis_range: tuple[float, float] = (0.3, 0.45)
    tumor_center_jitter: float = 0.1
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def generate_phantom(
    seed: int,
    shape: tuple[int, int, int],
    k_classes: int,
    config: PhantomConfig | None = None,
) -> tuple[Volume, LabelMask]:
    """Generate a random ellipsoidal "organ" (class 1) and, for k_classes=3,
    a "tumor" blob (class 2) strictly inside the organ.

    Intensities are per-class means plus iid Gaussian noise. Deterministic in
    (seed, shape, k_classes, config).
    """
    cfg = config or PhantomConfig()
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 16 for s in shape):
        raise ValueError(f"each shape axis must be >= 16, got {shape}")
    if k_classes not in (2, 3):
        raise ValueError(f"k_classes must be 2 or 3, got {k_classes}")
    if len(cfg.class_means) < k_classes:
        raise ValueError("config.class_means must cover every class")

    rng = np.random.default_rng(seed)
    dims = np.asarray(shape, dtype=np.float64)

    # Organ ellipsoid: semi-axes and center jitter as fractions of the extent,
    # chosen so the organ always fits inside the volume.
    lo, hi = cfg.organ_axis_range
    organ_axes = rng.uniform(lo, hi, size=3) * dims / 2.0
    organ_center = dims / 2.0 + rng.uniform(-1.0, 1.0, size=3) * cfg.organ_center_jitter * dims

    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    organ_field = sum(
        ((g - c) / a) ** 2 for g, c, a in zip(grids, organ_center, organ_axes)
    )
    labels = np.zeros(shape, dtype=np.uint8)
    labels[organ_field <= 1.0] = 1

    if k_classes == 3:
        # Tumor ellipsoid scaled and offset relative to the organ. The offset
        # and axis fractions keep the tumor boundary well clear of the organ
        # boundary, so a one-step dilation of class 2 never reaches class 0.
        t_lo, t_hi = cfg.tumor_axis_range
        tumor_axes = rng.uniform(t_lo, t_hi, size=3) * organ_axes
        tumor_center = organ_center + rng.uniform(-1.0, 1.0, size=3) * cfg.tumor_center_jitter * organ_axes
        tumor_field = sum(
            ((g - c) / a) ** 2 for g, c, a in zip(grids, tumor_center, tumor_axes)
        )
        labels[tumor_field <= 1.0] = 2

    means = np.asarray(cfg.class_means[:k_classes], dtype=np.float64)
    if cfg.mean_jitter > 0:
        means = means + rng.uniform(-cfg.mean_jitter, cfg.mean_jitter,
                                    size=k_classes)
    voxels = means[labels] + cfg.noise_sigma * rng.standard_normal(shape)

    volume = Volume(voxels.astype(np.float32), spacing=cfg.spacing)
    mask = LabelMask(labels, num_classes=k_classes)
    return volume, mask


def _header_payload_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix == ".json" else p
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".raw")


def save_volume(path, item: Volume | LabelMask) -> None:
    """Write a Volume or LabelMask as a JSON header plus raw payload.

    `path` may be a bare stem or the header path; `<stem>.json` holds the
    header and `<stem>.raw` the little-endian contiguous payload. Round-trip
    through load_volume is bit-exact.
    """
    header_path, payload_path = _header_payload_paths(path)
    if isinstance(item, Volume):
        arr = np.ascontiguousarray(item.voxels, dtype=_DTYPE_TAGS["f32"])
        header = {
            "dims": list(item.shape),
            "spacing": list(item.spacing),
            "dtype": "f32",
            "order": "row-major",
        }
    elif isinstance(item, LabelMask):
        arr = np.ascontiguousarray(item.labels, dtype=_DTYPE_TAGS["u8"])
        header = {
            "dims": list(item.shape),
            "spacing": [1.0, 1.0, 1.0],
            "dtype": "u8",
            "order": "row-major",
            "num_classes": item.num_classes,
        }
    else:
        raise ValueError(f"cannot save object of type {type(item).__name__}")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, sort_keys=True) + "\n")
    payload_path.write_bytes(arr.tobytes())


def load_volume(path) -> Volume | LabelMask:
    """Read a Volume (dtype f32) or LabelMask (dtype u8) written by save_volume."""
    header_path, payload_path = _header_payload_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed header {header_path}: {exc}") from exc
    for key in ("dims", "spacing", "dtype", "order"):
        if key not in header:
            raise FormatError(f"header {header_path} missing field '{key}'")
    if header["order"] != "row-major":
        raise FormatError(f"unsupported order tag {header['order']!r}")
    tag = header["dtype"]
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag!r} in {header_path}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3:
        raise FormatError(f"dims must have 3 entries, got {header['dims']}")
    dtype = _DTYPE_TAGS[tag]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = payload_path.read_bytes()
    if len(payload) != expected:
        raise FormatError(
            f"payload size mismatch for {payload_path}: expected {expected} bytes, "
            f"got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    if tag == "u8":
        num_classes = int(header.get("num_classes", int(arr.max()) + 1 if arr.size else 1))
        return LabelMask(arr.copy(), num_classes=num_classes)
    return Volume(arr.copy(), spacing=tuple(float(s) for s in header["spacing"]))


@dataclass
class AugmentConfig:
    """Magnitudes for the augmentation pipeline.

    Spatial randomness (crop position, flips) is shared between views; the
    strong view additionally receives intensity noise, gamma jitter and one
    cuboid cutout. Setting every magnitude to 0 and flip_prob to 0 makes both
    views equal to the deterministic center crop.
    """

    flip_prob: float = 0.5
    crop_jitter: float = 1.0
    noise_sigma: float = 0.1
    gamma_log_range: float = 0.3
    cutout_frac: float = 0.25


def augment_pair(
    volume: Volume,
    mask: LabelMask | None,
    crop_shape: tuple[int, int, int],
    seed: int,
    config: AugmentConfig | None = None,
) -> AugmentedPair:
    """Produce spatially identical weak/strong views of one volume.

    One random crop plus per-axis flips are applied identically to both views
    (and the mask); the strong view then gets Gaussian noise, gamma jitter,
    and one random cuboid cutout, all scaled by the config magnitudes.
    """
    cfg = config or AugmentConfig()
    crop_shape = tuple(int(c) for c in crop_shape)
    if len(crop_shape) != 3:
        raise ValueError(f"crop_shape must have 3 entries, got {crop_shape}")
    if any(c <= 0 for c in crop_shape):
        raise ValueError(f"crop_shape must be positive, got {crop_shape}")
    if any(c > s for c, s in zip(crop_shape, volume.shape)):
        raise ValueError(
            f"crop_shape {crop_shape} exceeds volume shape {volume.shape}"
        )
    if mask is not None and mask.shape != volume.shape:
        raise ValueError(f"mask shape {mask.shape} != volume shape {volume.shape}")

    rng = np.random.default_rng(seed)

    # Shared spatial transform: crop offset blends between the deterministic
    # center (jitter 0) and a uniform draw over all valid offsets (jitter 1).
    offsets = []
    for size, crop in zip(volume.shape, crop_shape):
        max_off = size - crop
        center = max_off // 2
        u = int(rng.integers(0, max_off + 1))
        offsets.append(center + int(round(cfg.crop_jitter * (u - center))))
    flips = tuple(bool(f) for f in rng.random(3) < cfg.flip_prob)
    record = SpatialRecord(tuple(offsets), crop_shape, flips)

    def spatial(arr: np.ndarray) -> np.ndarray:
        sl = tuple(slice(o, o + c) for o, c in zip(offsets, crop_shape))
        out = arr[sl]
        for axis, flip in enumerate(flips):
            if flip:
                out = np.flip(out, axis=axis)
        return np.ascontiguousarray(out)

    weak_vox = spatial(volume.voxels)
    strong_vox = weak_vox.copy()

    # Strong-view intensity transforms; draws happen in a fixed order so the
    # stream consumed per call only depends on the config, not the data.
    strong_vox = strong_vox + cfg.noise_sigma * rng.standard_normal(crop_shape).astype(np.float32)
    gamma = float(np.exp(rng.uniform(-cfg.gamma_log_range, cfg.gamma_log_range)))
    if gamma != 1.0:
        lo, hi = float(strong_vox.min()), float(strong_vox.max())
        if hi - lo > 1e-8:
            strong_vox = lo + (hi - lo) * ((strong_vox - lo) / (hi - lo)) ** gamma
    if cfg.cutout_frac > 0:
        sizes = [max(1, int(round(cfg.cutout_frac * c))) for c in crop_shape]
        corner = [int(rng.integers(0, c - s + 1)) for c, s in zip(crop_shape, sizes)]
        fill = float(strong_vox.mean())
        sl = tuple(slice(o, o + s) for o, s in zip(corner, sizes))
        strong_vox[sl] = fill

    weak = Volume(weak_vox, spacing=volume.spacing)
    strong = Volume(strong_vox.astype(np.float32), spacing=volume.spacing)
    mask_weak = None
    if mask is not None:
        mask_weak = LabelMask(spatial(mask.labels), num_classes=mask.num_classes)
    return AugmentedPair(weak=weak, strong=strong, mask_weak=mask_weak, spatial_record=record)


def standardize(volume: Volume) -> Volume:
    """Zero-mean / unit-variance rescale of one volume."""
    v = volume.voxels
    std = float(v.std())
    if std < 1e-8:
        return Volume(v - v.mean(), spacing=volume.spacing)
    return Volume((v - v.mean()) / std, spacing=volume.spacing)
