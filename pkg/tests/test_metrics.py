"""Overlap and surface-distance metrics against the brute-force oracle in
metric_oracle.py, checked exactly rather than to a tolerance."""

import json
import math

import numpy as np
import pytest

from kmaxseg.metrics import (
    MetricsReport,
    VolumeRecord,
    asd,
    dice_score,
    extract_surface,
    hd95,
    jaccard,
    score_volume,
)

from metric_oracle import (
    brute_distances,
    brute_hd95_asd,
    brute_nearest_rank,
    brute_surface,
    random_mask,
)


class TestOverlap:
    def test_identical_masks(self):
        m = np.zeros((6, 6, 6), np.uint8)
        m[2:4, 2:4, 2:4] = 1
        assert dice_score(m, m, 1) == 1.0
        assert jaccard(m, m, 1) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((6, 6, 6), np.uint8)
        b = np.zeros((6, 6, 6), np.uint8)
        a[0, 0, :2] = 1
        b[5, 5, :2] = 1
        assert dice_score(a, b, 1) == 0.0
        assert jaccard(a, b, 1) == 0.0

    def test_half_overlap_counts(self):
        # |A| = |B| = 8 with 4 shared voxels: dice 0.5, jaccard 1/3
        a = np.zeros((4, 4, 4), np.uint8)
        b = np.zeros((4, 4, 4), np.uint8)
        a.reshape(-1)[0:8] = 1
        b.reshape(-1)[4:12] = 1
        assert dice_score(a, b, 1) == 0.5
        assert jaccard(a, b, 1) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_both_empty_scores_one(self):
        z = np.zeros((4, 4, 4), np.uint8)
        assert dice_score(z, z, 1) == 1.0
        assert jaccard(z, z, 1) == 1.0

    def test_one_empty_scores_zero(self):
        a = np.zeros((4, 4, 4), np.uint8)
        b = a.copy()
        b[1, 1, 1] = 1
        assert dice_score(a, b, 1) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice_score(np.zeros((4, 4, 4), np.uint8), np.zeros((4, 4, 5), np.uint8), 1)

    def test_dice_jaccard_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = random_mask(rng), random_mask(rng)
            d, j = dice_score(a, b, 1), jaccard(a, b, 1)
            assert abs(d - 2.0 * j / (1.0 + j)) < 1e-12


class TestSurface:
    def test_single_voxel(self):
        m = np.zeros((5, 5, 5), np.uint8)
        m[2, 3, 1] = 1
        surf = extract_surface(m, 1)
        assert surf.tolist() == [[2, 3, 1]]

    def test_solid_cube_excludes_interior(self):
        m = np.zeros((5, 5, 5), np.uint8)
        m[1:4, 1:4, 1:4] = 1
        surf = {tuple(r) for r in extract_surface(m, 1)}
        assert len(surf) == 26
        assert (2, 2, 2) not in surf

    def test_border_voxels_count_as_surface(self):
        # every voxel except the single interior one (1,1,1) is surface
        m = np.ones((3, 3, 3), np.uint8)
        surf = {tuple(r) for r in extract_surface(m, 1)}
        assert len(surf) == 26
        assert (1, 1, 1) not in surf

    def test_empty_mask(self):
        assert extract_surface(np.zeros((4, 4, 4), np.uint8), 1).shape == (0, 3)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            m = random_mask(rng)
            fast = {tuple(r) for r in extract_surface(m, 1)}
            assert fast == set(brute_surface(m == 1))


class TestSurfaceDistances:
    def test_identical_masks_zero(self):
        m = np.zeros((6, 6, 6), np.uint8)
        m[2:4, 2:4, 2:4] = 1
        assert hd95(m, m, 1) == 0.0
        assert asd(m, m, 1) == 0.0

    def test_two_voxels_three_apart(self):
        a = np.zeros((8, 8, 8), np.uint8)
        b = np.zeros((8, 8, 8), np.uint8)
        a[2, 4, 4] = 1
        b[5, 4, 4] = 1
        assert hd95(a, b, 1) == 3.0
        assert asd(a, b, 1) == 3.0

    def test_spacing_scales_distances(self):
        a = np.zeros((8, 8, 8), np.uint8)
        b = np.zeros((8, 8, 8), np.uint8)
        a[2, 4, 4] = 1
        b[5, 4, 4] = 1
        assert hd95(a, b, 1, spacing=(2.0, 1.0, 1.0)) == 6.0

    def test_empty_surface_gives_nan(self):
        a = np.zeros((6, 6, 6), np.uint8)
        b = a.copy()
        b[2, 2, 2] = 1
        assert math.isnan(hd95(a, b, 1))
        assert math.isnan(asd(a, b, 1))
        # both surfaces empty is also undefined
        assert math.isnan(hd95(a, a.copy(), 1))

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(2)
        spacing = (0.5, 2.0, 1.0)
        for _ in range(10):
            a, b = random_mask(rng), random_mask(rng)
            h_expect, a_expect = brute_hd95_asd(a == 1, b == 1, spacing)
            assert hd95(a, b, 1, spacing) == h_expect
            assert asd(a, b, 1, spacing) == a_expect

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a, b = random_mask(rng), random_mask(rng)
            assert hd95(a, b, 1) == hd95(b, a, 1)
            assert asd(a, b, 1) == asd(b, a, 1)

    def test_doubling_spacing_doubles_exactly(self):
        rng = np.random.default_rng(4)
        a, b = random_mask(rng), random_mask(rng)
        s1, s2 = (1.0, 1.0, 1.0), (2.0, 2.0, 2.0)
        assert hd95(a, b, 1, s2) == 2.0 * hd95(a, b, 1, s1)
        assert asd(a, b, 1, s2) == 2.0 * asd(a, b, 1, s1)


class TestReport:
    def _records(self):
        rng = np.random.default_rng(5)
        a, b = random_mask(rng), random_mask(rng)
        return score_volume("v0", a, b, num_classes=2)

    def test_score_volume_covers_foreground_classes(self):
        rng = np.random.default_rng(6)
        a = (rng.random((8, 8, 8)) * 3).astype(np.uint8)
        b = (rng.random((8, 8, 8)) * 3).astype(np.uint8)
        records = score_volume("x", a, b, num_classes=3)
        assert [r.class_id for r in records] == [1, 2]

    def test_csv_round_trip(self, tmp_path):
        report = MetricsReport(records=self._records())
        report.write_csv(tmp_path / "m.csv")
        back = MetricsReport.read_csv(tmp_path / "m.csv")
        for r1, r2 in zip(report.records, back.records):
            assert r1.volume_id == r2.volume_id
            assert abs(r1.dice - r2.dice) < 1e-7
            assert abs(r1.hd95 - r2.hd95) < 1e-7

    def test_aggregate_means(self):
        records = [
            VolumeRecord("a", 1, dice=0.8, jaccard=0.7, hd95=2.0, asd=1.0),
            VolumeRecord("b", 1, dice=0.6, jaccard=0.5, hd95=4.0, asd=3.0),
        ]
        agg = MetricsReport(records=records).aggregate()
        assert agg["dice"] == pytest.approx(0.7)
        assert agg["hd95"] == pytest.approx(3.0)

    def test_aggregate_skips_nan_distances(self):
        records = [
            VolumeRecord("a", 1, dice=0.8, jaccard=0.7, hd95=2.0, asd=1.0),
            VolumeRecord("b", 1, dice=0.0, jaccard=0.0, hd95=math.nan, asd=math.nan),
        ]
        agg = MetricsReport(records=records).aggregate()
        assert agg["dice"] == pytest.approx(0.4)
        assert agg["hd95"] == pytest.approx(2.0)

    def test_json_is_valid_with_nan_as_null(self, tmp_path):
        records = [VolumeRecord("a", 1, 0.0, 0.0, math.nan, math.nan)]
        MetricsReport(records=records).write_json(tmp_path / "agg.json")
        agg = json.loads((tmp_path / "agg.json").read_text())
        assert agg["hd95"] is None
        assert agg["dice"] == 0.0
