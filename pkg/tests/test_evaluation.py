import numpy as np
import pytest

from dronekd.boxes import AnchorGrid, BBox
from dronekd.detector import ModelConfig, assign_targets
from dronekd.detector.assign import AssignmentResult
from dronekd.detector.decode import Detection
from dronekd.evalmetrics import (
    anchor_overlap_stats,
    cosine_distance_map,
    evaluate,
    positive_area_ratio_stats,
    raster_csv,
)


def det(x1, y1, x2, y2, cls=0, score=0.9):
    return Detection(BBox(x1, y1, x2, y2), cls, score)


class TestEvaluate:
    def test_single_perfect_detection(self):
        dets = [[det(10, 10, 20, 20, cls=0, score=0.9)]]
        gts = [[(BBox(10, 10, 20, 20), 0)]]
        result = evaluate(dets, gts)
        assert result.map == pytest.approx(1.0)
        assert result.ap50 == pytest.approx(1.0)
        assert result.ar_1 == pytest.approx(1.0)

    def test_no_detections(self):
        result = evaluate([[]], [[(BBox(0, 0, 5, 5), 0)]])
        assert result.map == 0.0
        assert result.ar_100 == 0.0

    def test_fp_then_tp_gives_half_ap_at_101_points(self):
        # High-scoring false positive followed by a true positive: the
        # interpolated precision envelope is 0.5 at every recall point.
        dets = [[det(50, 50, 60, 60, score=0.9), det(10, 10, 20, 20, score=0.8)]]
        gts = [[(BBox(10, 10, 20, 20), 0)]]
        result = evaluate(dets, gts, iou_thresholds=(0.5,))
        assert result.ap50 == pytest.approx(0.5)

    def test_score_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        dets, gts = _random_instances(rng, images=4)
        base = evaluate(dets, gts)
        squashed = [
            [Detection(d.box, d.cls, 1 / (1 + np.exp(-4 * d.score))) for d in img]
            for img in dets
        ]
        transformed = evaluate(squashed, gts)
        assert base.map == pytest.approx(transformed.map, abs=1e-12)
        assert base.ar_10 == pytest.approx(transformed.ar_10, abs=1e-12)

    def test_matches_plodding_oracle_on_tiny_instances(self):
        rng = np.random.default_rng(1)
        for trial in range(30):
            dets, gts = _random_instances(
                np.random.default_rng((2, trial)), images=2, max_dets=5, classes=2
            )
            got = evaluate(dets, gts, iou_thresholds=(0.5, 0.75))
            want = _oracle_map(dets, gts, (0.5, 0.75))
            assert got.map == pytest.approx(want, abs=1e-6), trial

    def test_ap50_at_least_map(self):
        rng = np.random.default_rng(3)
        dets, gts = _random_instances(rng, images=6)
        result = evaluate(dets, gts)
        assert result.ap50 >= result.map - 1e-12

    def test_ar_nondecreasing_in_k(self):
        rng = np.random.default_rng(4)
        dets, gts = _random_instances(rng, images=6, max_dets=15)
        result = evaluate(dets, gts)
        assert result.ar_1 <= result.ar_10 + 1e-12 <= result.ar_100 + 2e-12


def _random_instances(rng, images=3, max_dets=6, classes=3, size=96):
    dets, gts = [], []
    for _ in range(images):
        img_gts = []
        for _ in range(int(rng.integers(1, 4))):
            w, h = rng.integers(5, 30, size=2)
            x = float(rng.uniform(0, size - w))
            y = float(rng.uniform(0, size - h))
            img_gts.append((BBox(x, y, x + w, y + h), int(rng.integers(0, classes))))
        img_dets = []
        for _ in range(int(rng.integers(0, max_dets + 1))):
            if img_gts and rng.random() < 0.6:
                base, cls = img_gts[int(rng.integers(0, len(img_gts)))]
                jitter = rng.normal(0, 2, size=4)
                xa, xb = sorted((base.x1 + jitter[0], base.x2 + jitter[2]))
                ya, yb = sorted((base.y1 + jitter[1], base.y2 + jitter[3]))
                box = BBox(xa, ya, max(xb, xa + 1), max(yb, ya + 1))
            else:
                w, h = rng.integers(5, 30, size=2)
                x = float(rng.uniform(0, size - w))
                y = float(rng.uniform(0, size - h))
                box = BBox(x, y, x + w, y + h)
                cls = int(rng.integers(0, classes))
            img_dets.append(Detection(box, cls, float(rng.random())))
        dets.append(img_dets)
        gts.append(img_gts)
    return dets, gts


def _oracle_map(dets_per_image, gts_per_image, thresholds):
    """Plodding per-class AP: explicit greedy matching and 101-point loop."""
    from dronekd.boxes import overlap_metrics

    classes = sorted({c for gts in gts_per_image for _, c in gts})
    values = []
    for cls in classes:
        n_gt = sum(1 for gts in gts_per_image for _, c in gts if c == cls)
        if n_gt == 0:
            continue
        for thr in thresholds:
            records = []
            for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
                cls_dets = sorted(
                    [d for d in dets if d.cls == cls], key=lambda d: -d.score
                )
                cls_gts = [b for b, c in gts if c == cls]
                taken = [False] * len(cls_gts)
                for rank, d in enumerate(cls_dets):
                    best, best_iou = -1, thr
                    for gi, g in enumerate(cls_gts):
                        if taken[gi]:
                            continue
                        iou = overlap_metrics(d.box, g)[0]
                        if iou >= best_iou and iou > 0 and (best == -1 or iou > best_iou):
                            best, best_iou = gi, iou
                    if best >= 0:
                        taken[best] = True
                    records.append((d.score, img, rank, best >= 0))
            records.sort(key=lambda r: (-r[0], r[1], r[2]))
            tp = fp = 0
            curve = []
            for _, _, _, is_tp in records:
                tp += int(is_tp)
                fp += int(not is_tp)
                curve.append((tp / n_gt, tp / (tp + fp)))
            ap = 0.0
            for i in range(101):
                r = i / 100
                best_p = 0.0
                for rec, prec in curve:
                    if rec >= r and prec > best_p:
                        best_p = prec
                ap += best_p / 101
            values.append(ap)
    return float(np.mean(values)) if values else 0.0


class TestAnchorOverlapStats:
    def test_gt_equal_to_anchor_box_means_one(self):
        anchors = AnchorGrid((96, 96), (8,))
        # anchor boxes at scale 1 are the 8x8 grid cells themselves
        gts = [[(BBox(8, 8, 16, 16), 0)]]
        stats = anchor_overlap_stats(gts, anchors, anchor_box_scale=1.0)
        assert stats.iou.values_small == [1.0]
        assert stats.giou.values_small == [1.0]
        assert stats.diou.values_small == [1.0]
        assert stats.skipped == 0

    def test_empty_gts_empty_histograms(self):
        anchors = AnchorGrid((96, 96), (8,))
        stats = anchor_overlap_stats([[]], anchors)
        assert stats.iou.counts_small.sum() == 0
        assert stats.iou.counts_large.sum() == 0

    def test_mean_iou_not_below_mean_giou(self):
        rng = np.random.default_rng(5)
        anchors = AnchorGrid((96, 96), (8, 16))
        gts = [
            [(b, c) for b, c in zip(_boxes(rng, 4), [0] * 4)] for _ in range(5)
        ]
        stats = anchor_overlap_stats(gts, anchors)
        for vi, vg in zip(
            stats.iou.values_small + stats.iou.values_large,
            stats.giou.values_small + stats.giou.values_large,
        ):
            assert vi >= vg - 1e-12

    def test_small_instances_score_lower_diou(self):
        # The published pattern: small instances see lower mean anchor overlap.
        rng = np.random.default_rng(6)
        anchors = AnchorGrid((96, 96), (8, 16))
        gts = []
        for _ in range(40):
            img = []
            for _ in range(2):
                w = float(rng.integers(4, 13))
                x, y = rng.uniform(5, 75, size=2)
                img.append((BBox(x, y, x + w, y + w), 0))
            for _ in range(2):
                w = float(rng.integers(40, 60))
                x, y = rng.uniform(0, 95 - w, size=2)
                img.append((BBox(x, y, x + w, y + w), 0))
            gts.append(img)
        stats = anchor_overlap_stats(gts, anchors)
        assert stats.diou.median_small < stats.diou.median_large
        assert stats.iou.median_small < stats.iou.median_large


def _boxes(rng, n, size=96):
    out = []
    for _ in range(n):
        w, h = rng.integers(4, 40, size=2)
        x = float(rng.uniform(0, size - w))
        y = float(rng.uniform(0, size - h))
        out.append(BBox(x, y, x + w, y + h))
    return out


class TestPositiveAreaRatio:
    def _manual_assignment(self, anchors, pos_per_level):
        slices, start = [], 0
        gt_index = []
        for li in range(anchors.num_levels):
            n = anchors.num_anchors(li)
            slices.append(slice(start, start + n))
            start += n
            level_idx = np.full(n, -1, dtype=np.int64)
            for a in pos_per_level.get(li, []):
                level_idx[a] = 0
            gt_index.append(level_idx)
        gt_index = np.concatenate(gt_index)
        return AssignmentResult(
            level_slices=slices,
            gt_index=gt_index,
            targets=np.zeros((start, 4), dtype=np.float32),
            i_main=(gt_index >= 0).astype(np.float64),
            gt_boxes=np.zeros((1, 4)),
            gt_classes=np.zeros(1, dtype=np.int64),
        )

    def test_region_equal_to_gt_gives_ratio_one(self):
        anchors = AnchorGrid((96, 96), (8,))
        gts = [[(BBox(8, 8, 16, 16), 0)]]  # area 64 == one stride-8 cell
        asg = self._manual_assignment(anchors, {0: [13]})
        stats = positive_area_ratio_stats(gts, [asg], anchors)
        assert stats.hist.values_small == [1.0]

    def test_region_twice_gt_area(self):
        anchors = AnchorGrid((96, 96), (8,))
        gts = [[(BBox(8, 8, 16, 16), 0)]]
        asg = self._manual_assignment(anchors, {0: [13, 14]})
        stats = positive_area_ratio_stats(gts, [asg], anchors)
        assert stats.hist.values_small == [2.0]

    def test_small_instances_get_larger_relative_regions(self):
        rng = np.random.default_rng(7)
        cfg = ModelConfig()
        anchors = AnchorGrid((96, 96), cfg.strides)
        gts_per_image, assignments = [], []
        for _ in range(30):
            img = []
            w = float(rng.integers(4, 10))
            x, y = rng.uniform(5, 80, size=2)
            img.append((BBox(x, y, x + w, y + w), 0))
            w2 = float(rng.integers(40, 60))
            x2, y2 = rng.uniform(0, 95 - w2, size=2)
            img.append((BBox(x2, y2, x2 + w2, y2 + w2), 1))
            gts_per_image.append(img)
            assignments.append(assign_targets(anchors, img, cfg))
        stats = positive_area_ratio_stats(gts_per_image, assignments, anchors)
        assert stats.hist.median_small > stats.hist.median_large


class TestCosineDistance:
    def test_identical_maps_zero(self):
        rng = np.random.default_rng(8)
        m = rng.standard_normal((4, 5, 5))
        dist, flags = cosine_distance_map(m, m.copy())
        np.testing.assert_allclose(dist, 0.0, atol=1e-12)
        assert not flags.any()

    def test_orthogonal_vectors_distance_one(self):
        t = np.zeros((2, 1, 1))
        s = np.zeros((2, 1, 1))
        t[0] = 1.0
        s[1] = 1.0
        dist, _ = cosine_distance_map(t, s)
        assert dist[0, 0] == pytest.approx(1.0)

    def test_negated_maps_distance_two(self):
        rng = np.random.default_rng(9)
        m = rng.standard_normal((3, 4, 4))
        dist, _ = cosine_distance_map(m, -m)
        np.testing.assert_allclose(dist, 2.0, atol=1e-12)

    def test_zero_vectors_flagged_distance_one(self):
        t = np.zeros((3, 2, 2))
        s = np.ones((3, 2, 2))
        dist, flags = cosine_distance_map(t, s)
        assert flags.all()
        np.testing.assert_allclose(dist, 1.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes differ"):
            cosine_distance_map(np.zeros((2, 3, 3)), np.zeros((2, 4, 4)))

    def test_raster_csv_rows(self):
        text = raster_csv(np.array([[1.0, 2.0], [3.0, 4.5]]))
        assert text == "1,2\n3,4.5\n"
