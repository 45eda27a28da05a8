"""Metrics: connected components vs BFS oracle, overlap scores, HD95 oracle,
region composition, dataset evaluation."""

import numpy as np
import pytest

from oracles import bfs_components, hd95_bruteforce, surface_bruteforce
from voltta.metrics import (MetricRow, NestingError, RegionSpec, aggregate,
                            compose_regions, connected_components_3d, evaluate_dataset,
                            grid_diagonal_mm, hd95, overlap_metrics, rows_to_csv,
                            surface_voxels)
from voltta.rng import stream
from voltta.volume import LabelMap, Volume


def same_partition(lab_a, lab_b):
    """Two labelings describe the same partition (up to label names)."""
    if (lab_a > 0).sum() != (lab_b > 0).sum():
        return False
    mapping = {}
    for a, b in zip(lab_a.ravel(), lab_b.ravel()):
        if (a == 0) != (b == 0):
            return False
        if a == 0:
            continue
        if a in mapping and mapping[a] != b:
            return False
        mapping[a] = b
    return len(set(mapping.values())) == len(mapping)


class TestConnectedComponents:
    def test_plus_sign_single_component(self):
        mask = np.zeros((3, 3, 3), dtype=bool)
        mask[1, 1, :] = True
        mask[1, :, 1] = True
        mask[:, 1, 1] = True
        for conn in (6, 26):
            _, regions = connected_components_3d(mask, conn)
            assert len(regions) == 1

    def test_corner_touch_depends_on_connectivity(self):
        mask = np.zeros((2, 2, 2), dtype=bool)
        mask[0, 0, 0] = True
        mask[1, 1, 1] = True
        _, r26 = connected_components_3d(mask, 26)
        _, r6 = connected_components_3d(mask, 6)
        assert len(r26) == 1
        assert len(r6) == 2

    @pytest.mark.parametrize("conn", [6, 26])
    def test_matches_bfs_oracle(self, conn):
        rng = stream(1, f"cc/oracle/{conn}")
        for _ in range(20):
            mask = rng.random((16, 16, 16)) < 0.2
            lab, regions = connected_components_3d(mask, conn)
            oracle_lab, oracle_n = bfs_components(mask, conn)
            assert len(regions) == oracle_n
            assert same_partition(lab, oracle_lab)

    def test_scan_order_labeling(self):
        mask = np.zeros((1, 1, 5), dtype=bool)
        mask[0, 0, 0] = True
        mask[0, 0, 2] = True
        mask[0, 0, 4] = True
        lab, regions = connected_components_3d(mask, 6)
        assert lab[0, 0, 0] == 1 and lab[0, 0, 2] == 2 and lab[0, 0, 4] == 3
        assert [tuple(r[0]) for r in regions] == [(0, 0, 0), (0, 0, 2), (0, 0, 4)]

    def test_partition_properties(self):
        rng = stream(2, "cc/partition")
        mask = rng.random((10, 10, 10)) < 0.3
        lab, regions = connected_components_3d(mask, 26)
        assert (lab > 0).sum() == mask.sum()
        assert ((lab > 0) == mask).all()
        total = sum(len(r) for r in regions)
        assert total == mask.sum()


class TestOverlapMetrics:
    def test_identical_masks(self):
        rng = stream(3, "ov/ident")
        m = rng.random((6, 6, 6)) < 0.4
        assert overlap_metrics(m, m) == (1.0, 1.0, 1.0)

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 4), dtype=bool)
        b = np.zeros((4, 4, 4), dtype=bool)
        a[0, 0, 0] = True
        b[3, 3, 3] = True
        assert overlap_metrics(a, b) == (0.0, 0.0, 0.0)

    def test_half_containment_hand_count(self):
        ref = np.zeros((2, 2, 2), dtype=bool)
        ref[:] = True  # 8 voxels
        pred = np.zeros((2, 2, 2), dtype=bool)
        pred[0] = True  # 4-voxel subset
        dice, iou, sens = overlap_metrics(pred, ref)
        assert dice == pytest.approx(2 * 4 / (8 + 4))
        assert iou == pytest.approx(0.5)
        assert sens == pytest.approx(0.5)

    def test_both_empty_perfect(self):
        z = np.zeros((3, 3, 3), dtype=bool)
        assert overlap_metrics(z, z) == (1.0, 1.0, 1.0)

    def test_iou_dice_identity(self):
        rng = stream(4, "ov/identity")
        for _ in range(20):
            a = rng.random((5, 5, 5)) < 0.5
            b = rng.random((5, 5, 5)) < 0.5
            dice, iou, _ = overlap_metrics(a, b)
            if dice < 1.0:
                assert abs(iou - dice / (2.0 - dice)) < 1e-12
            assert iou <= dice + 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            overlap_metrics(np.zeros((2, 2, 2), bool), np.zeros((3, 3, 3), bool))


class TestHd95:
    def test_identical_masks_zero(self):
        rng = stream(5, "hd/ident")
        m = rng.random((8, 8, 8)) < 0.3
        m[0, 0, 0] = True  # guarantee nonempty
        assert hd95(m, m) == 0.0

    def test_point_pair_three_apart(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[2, 2, 2] = True
        b[2, 2, 5] = True
        assert hd95(a, b, (1.0, 1.0, 1.0)) == pytest.approx(3.0)

    def test_spacing_scales_distance(self):
        a = np.zeros((4, 4, 4), dtype=bool)
        b = np.zeros((4, 4, 4), dtype=bool)
        a[0, 0, 0] = True
        b[0, 0, 2] = True
        assert hd95(a, b, (1.0, 1.0, 2.5)) == pytest.approx(5.0)

    def test_matches_all_pairs_oracle(self):
        rng = stream(6, "hd/oracle")
        done = 0
        while done < 10:
            a = rng.random((7, 7, 7)) < 0.25
            b = rng.random((7, 7, 7)) < 0.25
            if not a.any() or not b.any():
                continue
            got = hd95(a, b, (1.0, 1.3, 0.8))
            want = hd95_bruteforce(a, b, (1.0, 1.3, 0.8))
            assert abs(got - want) < 1e-9
            done += 1

    def test_symmetry(self):
        rng = stream(7, "hd/sym")
        a = rng.random((6, 6, 6)) < 0.3
        b = rng.random((6, 6, 6)) < 0.3
        a[1, 1, 1] = b[2, 2, 2] = True
        assert hd95(a, b) == hd95(b, a)

    def test_empty_conventions(self):
        z = np.zeros((4, 4, 4), dtype=bool)
        m = z.copy()
        m[1, 1, 1] = True
        assert hd95(z, z) == 0.0
        sentinel = grid_diagonal_mm((4, 4, 4), (1.0, 1.0, 1.0))
        assert hd95(m, z) == pytest.approx(sentinel)
        assert hd95(z, m) == pytest.approx(sentinel)

    def test_surface_definition_matches_oracle(self):
        rng = stream(8, "hd/surf")
        for _ in range(10):
            m = rng.random((6, 6, 6)) < 0.4
            np.testing.assert_array_equal(surface_voxels(m), surface_bruteforce(m))


class TestComposeRegions:
    def test_union(self):
        labels = np.zeros((3, 3, 3), dtype=int)
        labels[0] = 1
        labels[1] = 2
        m = LabelMap(labels, class_count=4)
        spec = RegionSpec.default()
        masks = compose_regions(m, spec)
        np.testing.assert_array_equal(masks["WT"], labels > 0)

    def test_empty_region(self):
        labels = np.zeros((3, 3, 3), dtype=int)
        labels[0] = 1
        m = LabelMap(labels, class_count=4)
        masks = compose_regions(m, RegionSpec.default())
        assert not masks["ET"].any()

    def test_nesting_violation(self):
        labels = np.zeros((2, 2, 2), dtype=int)
        labels[0, 0, 0] = 3
        m = LabelMap(labels, class_count=4)
        spec = RegionSpec(regions={"TC": {3}, "WT": {1, 2}}, nesting=[["TC", "WT"]])
        with pytest.raises(NestingError, match="TC"):
            compose_regions(m, spec)

    def test_invalid_label_in_spec(self):
        m = LabelMap(np.zeros((2, 2, 2), dtype=int), class_count=2)
        spec = RegionSpec(regions={"X": {5}})
        with pytest.raises(ValueError, match="invalid labels"):
            compose_regions(m, spec)

    def test_monotone_under_inclusion(self):
        rng = stream(9, "cr/monotone")
        labels = rng.integers(0, 4, size=(5, 5, 5))
        m = LabelMap(labels, class_count=4)
        spec = RegionSpec(regions={"A": {3}, "B": {1, 3}, "C": {1, 2, 3}})
        masks = compose_regions(m, spec)
        assert not (masks["A"] & ~masks["B"]).any()
        assert not (masks["B"] & ~masks["C"]).any()


class TestEvaluateDataset:
    def _case(self, rng, case_id):
        labels = np.zeros((6, 6, 6), dtype=int)
        labels[2:5, 2:5, 2:5] = 1
        labels[3:5, 3:5, 3:5] = 2
        labels[4, 4, 4] = 3
        ref = LabelMap(labels, class_count=4)
        vol = Volume(rng.standard_normal((1, 6, 6, 6)))
        return case_id, vol, ref

    def test_perfect_prediction_all_ones(self):
        rng = stream(10, "ev/perfect")
        cases = [self._case(rng, "case_000")]
        refs = {cid: ref for cid, _, ref in cases}
        ids = iter(["case_000"])

        def predict(vol):
            return refs[next(ids)]

        rows, agg = evaluate_dataset(predict, cases, RegionSpec.default())
        assert all(r.dice == 1.0 and r.hd95_mm == 0.0 for r in rows)
        assert agg["WT"]["dice"] == 1.0

    def test_aggregate_is_mean_of_rows(self):
        rows = [MetricRow("a", "WT", 0.5, 2.0, 0.4, 0.6),
                MetricRow("b", "WT", 0.7, 4.0, 0.6, 0.8)]
        agg = aggregate(rows)
        assert agg["WT"]["dice"] == pytest.approx(0.6)
        assert agg["WT"]["hd95_mm"] == pytest.approx(3.0)

    def test_rows_sorted_by_case_id(self):
        rng = stream(11, "ev/order")
        cases = [self._case(rng, "case_002"), self._case(rng, "case_000")]

        def predict(vol):
            return LabelMap(np.zeros((6, 6, 6), dtype=int), class_count=4)

        rows, _ = evaluate_dataset(predict, cases, RegionSpec.default())
        ids = [r.case_id for r in rows]
        assert ids == sorted(ids)

    def test_csv_shape_and_determinism(self):
        rows = [MetricRow("a", "WT", 0.123456789, 1.5, 0.25, 0.75)]
        csv1 = rows_to_csv(rows)
        csv2 = rows_to_csv(rows)
        assert csv1 == csv2
        header, line = csv1.strip().split("\n")
        assert header == "case_id,region,dice,hd95_mm,iou,sensitivity"
        assert line == "a,WT,0.123457,1.500000,0.250000,0.750000"
