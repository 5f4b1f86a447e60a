"""Segmentation quality metrics: Dice, Jaccard, 95th-percentile Hausdorff
distance, and average surface distance, all spacing-aware.

Surface distances use brute-force nearest-surface lookups (chunked to bound
memory); this is exact and fast enough at the volume sizes handled here.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _binary(mask, class_id: int) -> np.ndarray:
    labels = mask.labels if hasattr(mask, "labels") else np.asarray(mask)
    return labels == class_id


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice_score(pred, gt, class_id: int) -> float:
    """Overlap coefficient 2|A∩B| / (|A| + |B|); both masks empty scores 1.0."""
    a, b = _binary(pred, class_id), _binary(gt, class_id)
    _check_shapes(a, b)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def jaccard(pred, gt, class_id: int) -> float:
    """Intersection over union; both masks empty scores 1.0."""
    a, b = _binary(pred, class_id), _binary(gt, class_id)
    _check_shapes(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


_NEIGHBOR_OFFSETS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def extract_surface(mask, class_id: int) -> np.ndarray:
    """Voxel coordinates of the class surface, shape (S, 3).

    A voxel is surface if any of its six face neighbors is outside the class;
    voxels on the volume border always count.
    """
    binary = _binary(mask, class_id)
    if not binary.any():
        return np.zeros((0, 3), dtype=np.int64)
    interior = np.ones_like(binary)
    # a voxel is interior only if all six face neighbors exist and are set
    for axis in range(3):
        shifted = np.zeros_like(binary)
        sl_to = [slice(None)] * 3
        sl_from = [slice(None)] * 3
        sl_to[axis], sl_from[axis] = slice(1, None), slice(None, -1)
        shifted[tuple(sl_to)] = binary[tuple(sl_from)]
        interior &= shifted
        shifted = np.zeros_like(binary)
        sl_to[axis], sl_from[axis] = slice(None, -1), slice(1, None)
        shifted[tuple(sl_to)] = binary[tuple(sl_from)]
        interior &= shifted
    surface = binary & ~interior
    return np.argwhere(surface).astype(np.int64)


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing,
                        chunk: int = 4096) -> np.ndarray:
    """Distance from every src surface voxel to its nearest dst voxel, in mm."""
    scale = np.asarray(spacing, dtype=np.float64)
    src_mm = src.astype(np.float64) * scale
    dst_mm = dst.astype(np.float64) * scale
    out = np.empty(len(src_mm), dtype=np.float64)
    for start in range(0, len(src_mm), chunk):
        block = src_mm[start:start + chunk]
        diff = block[:, None, :] - dst_mm[None, :, :]
        out[start:start + chunk] = np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)
    return out


def _nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    ordered = np.sort(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def hd95(pred, gt, class_id: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max over both directions of the nearest-rank 95th-percentile surface
    distance; NaN when either surface is empty."""
    sp, sg = extract_surface(pred, class_id), extract_surface(gt, class_id)
    if len(sp) == 0 or len(sg) == 0:
        return float("nan")
    forward = _directed_distances(sp, sg, spacing)
    backward = _directed_distances(sg, sp, spacing)
    return max(_nearest_rank_percentile(forward, 95.0),
               _nearest_rank_percentile(backward, 95.0))


def asd(pred, gt, class_id: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Mean of all directed surface distances pooled from both directions;
    NaN when either surface is empty."""
    sp, sg = extract_surface(pred, class_id), extract_surface(gt, class_id)
    if len(sp) == 0 or len(sg) == 0:
        return float("nan")
    forward = _directed_distances(sp, sg, spacing)
    backward = _directed_distances(sg, sp, spacing)
    pooled = np.concatenate([forward, backward])
    # exactly-rounded sum keeps the pooled mean independent of direction order
    return math.fsum(pooled) / len(pooled)


def jsonable(obj):
    """Deep-copy with non-finite floats replaced by None (valid JSON)."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass
class VolumeRecord:
    """Per-volume, per-class scores. Distances are mm; NaN marks an undefined
    surface metric (an empty predicted or reference surface)."""

    volume_id: str
    class_id: int
    dice: float
    jaccard: float
    hd95: float
    asd: float


def score_volume(volume_id: str, pred, gt, num_classes: int,
                 spacing=(1.0, 1.0, 1.0)) -> list[VolumeRecord]:
    """Score every foreground class (1..num_classes-1) of one volume."""
    records = []
    for c in range(1, num_classes):
        records.append(VolumeRecord(
            volume_id=volume_id, class_id=c,
            dice=dice_score(pred, gt, c), jaccard=jaccard(pred, gt, c),
            hd95=hd95(pred, gt, c, spacing), asd=asd(pred, gt, c, spacing),
        ))
    return records


@dataclass
class MetricsReport:
    """Evaluation outcome: per-volume records plus aggregate means.

    Aggregates average over foreground classes and volumes; NaN distance
    entries are excluded from their mean (and the mean is NaN if all are)."""

    records: list[VolumeRecord] = field(default_factory=list)

    def extend(self, records) -> None:
        self.records.extend(records)

    def _mean(self, key: str) -> float:
        values = np.array([getattr(r, key) for r in self.records], dtype=np.float64)
        if values.size == 0:
            return float("nan")
        finite = values[np.isfinite(values)]
        return float(finite.mean()) if finite.size else float("nan")

    def aggregate(self) -> dict:
        return {
            "num_records": len(self.records),
            "dice": self._mean("dice"),
            "jaccard": self._mean("jaccard"),
            "hd95": self._mean("hd95"),
            "asd": self._mean("asd"),
        }

    def write_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["volume_id", "class_id", "dice", "jaccard", "hd95", "asd"])
            for r in self.records:
                writer.writerow([r.volume_id, r.class_id,
                                 f"{r.dice:.9g}", f"{r.jaccard:.9g}",
                                 f"{r.hd95:.9g}", f"{r.asd:.9g}"])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(jsonable(self.aggregate()), indent=2) + "\n")

    @staticmethod
    def read_csv(path) -> "MetricsReport":
        report = MetricsReport()
        with Path(path).open(newline="") as f:
            for row in csv.DictReader(f):
                report.records.append(VolumeRecord(
                    volume_id=row["volume_id"], class_id=int(row["class_id"]),
                    dice=float(row["dice"]), jaccard=float(row["jaccard"]),
                    hd95=float(row["hd95"]), asd=float(row["asd"]),
                ))
        return report
