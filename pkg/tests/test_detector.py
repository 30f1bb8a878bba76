import numpy as np
import pytest

from dronekd.boxes import AnchorGrid, BBox
from dronekd.detector import (
    GFLDetector,
    ModelConfig,
    assign_targets,
    decode_detections,
    detection_loss,
    nms,
)
from dronekd.detector.model import DetectionOutput, LevelOutput
from dronekd.engine import SGD, Tensor


@pytest.fixture()
def cfg():
    return ModelConfig()


@pytest.fixture()
def model(cfg):
    return GFLDetector(cfg, np.random.default_rng(0))


def _image(seed=0, hw=(96, 96)):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((1, 3, *hw)).astype(np.float32))


class TestForward:
    def test_level_shapes(self, model):
        out = model(_image())
        assert out.levels[0].cls_map.shape == (1, 3, 12, 12)
        assert out.levels[0].reg_map.shape == (1, 32, 12, 12)
        assert out.levels[1].cls_map.shape == (1, 3, 6, 6)
        assert out.levels[0].cls_flat().shape == (144, 3)
        assert out.levels[1].cls_flat().shape == (36, 3)
        assert out.levels[0].reg_flat(8).shape == (144, 4, 8)

    def test_zeroed_prediction_head_gives_half_scores(self, cfg):
        model = GFLDetector(cfg, np.random.default_rng(0))
        model.cls_pred.weight.data[:] = 0
        model.cls_pred.bias.data[:] = 0
        out = model(_image())
        scores = 1 / (1 + np.exp(-out.levels[0].cls_map.data))
        np.testing.assert_allclose(scores, 0.5)

    def test_deterministic(self, model):
        a = model(_image(3))
        b = model(_image(3))
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la.cls_map.data, lb.cls_map.data)
            np.testing.assert_array_equal(la.reg_map.data, lb.reg_map.data)

    def test_indivisible_input_names_padding(self, model):
        with pytest.raises(ValueError, match="pad to 96x112"):
            model(Tensor(np.zeros((1, 3, 90, 100), dtype=np.float32)))

    def test_default_bias_gives_prior_scores(self, model):
        out = model(_image())
        scores = 1 / (1 + np.exp(-out.levels[0].cls_map.data))
        assert 0.0 < scores.mean() < 0.1


class TestAssignment:
    def test_centered_gt_gets_positive_anchor(self, cfg):
        anchors = AnchorGrid((96, 96), cfg.strides)
        # center at an anchor point of level 0 (stride 8 -> (44, 44))
        gts = [(BBox(41, 41, 47, 47), 0)]
        asg = assign_targets(anchors, gts, cfg)
        assert asg.num_pos >= 1
        sl = asg.level_slices[0]
        assert (asg.gt_index[sl] == 0).any()

    def test_no_gts_all_background(self, cfg):
        anchors = AnchorGrid((96, 96), cfg.strides)
        asg = assign_targets(anchors, [], cfg)
        assert asg.num_pos == 0
        assert np.all(asg.i_main == 0.0)

    def test_nested_gts_tie_goes_to_smaller(self, cfg):
        anchors = AnchorGrid((96, 96), cfg.strides)
        big = BBox(24, 24, 64, 64)     # 40 px -> level 1
        small = BBox(36, 36, 51, 51)   # 15 px -> level 1, nested
        asg = assign_targets(anchors, [(big, 0), (small, 1)], cfg)
        sl = asg.level_slices[1]
        pts = anchors.points(1)
        # anchor at (40, 40) is inside both center regions
        idx = np.where((pts[:, 0] == 40) & (pts[:, 1] == 40))[0][0]
        assert asg.gt_index[sl][idx] == 1

    def test_i_main_support_equals_positive_set(self, cfg):
        anchors = AnchorGrid((96, 96), cfg.strides)
        gts = [(BBox(10, 10, 16, 17), 2), (BBox(50, 40, 70, 66), 0)]
        asg = assign_targets(anchors, gts, cfg)
        np.testing.assert_array_equal(asg.i_main > 0, asg.fg_mask)

    def test_every_aligned_gt_receives_an_anchor(self, cfg):
        anchors = AnchorGrid((96, 96), cfg.strides)
        gts = [(BBox(20, 20, 26, 26), 0), (BBox(60, 60, 72, 71), 1)]
        asg = assign_targets(anchors, gts, cfg)
        assigned = set(asg.gt_index[asg.gt_index >= 0])
        assert assigned == {0, 1}

    def test_quality_variant_scores_in_unit_interval(self, cfg):
        from dataclasses import replace

        qcfg = replace(cfg, quality_i_main=True)
        anchors = AnchorGrid((96, 96), qcfg.strides)
        asg = assign_targets(anchors, [(BBox(40, 40, 52, 50), 1)], qcfg)
        vals = asg.i_main[asg.fg_mask]
        assert vals.size and np.all((vals > 0) & (vals <= 1))


class TestDetectionLoss:
    def test_perfect_one_hot_prediction_zeroes_regression_losses(self, cfg):
        anchors = AnchorGrid((96, 96), cfg.strides)
        # corners on the grid, so every positive anchor has integer bin targets
        gt = BBox(24, 24, 56, 56)
        asg = assign_targets(anchors, [(gt, 0)], cfg)
        out = _manual_output(cfg)
        # craft one-hot reg logits at the exact integer bins for all positives
        sl = asg.level_slices[1]
        fg = np.where(asg.gt_index[sl] >= 0)[0]
        reg = out.levels[1].reg_map.data
        for a in fg:
            y, x = divmod(a, 6)
            for side in range(4):
                tbin = int(round(asg.targets[sl][a, side]))
                reg[0, side * 8 + tbin, y, x] = 40.0
        _, reg_l, dfl_l = detection_loss(out, [asg])
        assert dfl_l.item() == pytest.approx(0.0, abs=1e-4)
        assert reg_l.item() == pytest.approx(0.0, abs=1e-3)

    def test_all_background_zero_scores_zero_cls_loss(self, cfg):
        anchors = AnchorGrid((96, 96), cfg.strides)
        asg = assign_targets(anchors, [], cfg)
        out = _manual_output(cfg, cls_fill=-60.0)  # sigmoid == 0 in float32
        cls_l, reg_l, dfl_l = detection_loss(out, [asg])
        assert cls_l.item() == 0.0
        assert reg_l.item() == 0.0 and dfl_l.item() == 0.0

    def test_loss_decreases_under_optimization(self, cfg):
        model = GFLDetector(cfg, np.random.default_rng(1))
        anchors = AnchorGrid((96, 96), cfg.strides)
        img = _image(11)
        gts = [(BBox(40, 40, 52, 50), 1), (BBox(12, 70, 18, 76), 0)]
        asg = assign_targets(anchors, gts, cfg)
        opt = SGD(model.parameters(), lr=0.02)
        history = []
        for _ in range(50):
            out = model(img)
            cls_l, reg_l, dfl_l = detection_loss(out, [asg])
            loss = cls_l + reg_l + dfl_l
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
        assert np.mean(history[-10:]) < 0.75 * np.mean(history[:10])

    def test_gradient_reaches_every_parameter(self, cfg):
        model = GFLDetector(cfg, np.random.default_rng(2))
        anchors = AnchorGrid((96, 96), cfg.strides)
        asg = assign_targets(anchors, [(BBox(40, 40, 52, 50), 1)], cfg)
        out = model(_image(12))
        cls_l, reg_l, dfl_l = detection_loss(out, [asg])
        (cls_l + reg_l + dfl_l).backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert np.abs(p.grad).sum() > 0, name


def _manual_output(cfg, cls_fill=-60.0):
    levels = []
    for stride, hw in ((8, 12), (16, 6)):
        cls = np.full((1, cfg.num_classes, hw, hw), cls_fill, dtype=np.float32)
        reg = np.full((1, 4 * cfg.num_bins, hw, hw), -40.0, dtype=np.float32)
        reg[:, 0 :: cfg.num_bins] = 0.0  # default mass on bin zero
        levels.append(LevelOutput(stride, Tensor(cls), Tensor(reg)))
    return DetectionOutput(levels=levels, image_hw=(96, 96), batch_size=1)


class TestDecode:
    def test_single_anchor_above_threshold(self, cfg):
        out = _manual_output(cfg)
        out.levels[0].cls_map.data[0, 1, 3, 4] = 2.0  # one confident anchor
        dets = decode_detections(out, score_thresh=0.5, nms_iou=0.5)
        assert len(dets) == 1
        assert dets[0].cls == 1
        assert dets[0].score == pytest.approx(1 / (1 + np.exp(-2.0)), abs=1e-6)

    def test_nms_same_class_keeps_higher_score(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=np.float64)
        keep = nms(boxes, np.array([0.9, 0.8]), iou_thresh=0.5)
        assert keep == [0]

    def test_identical_boxes_different_classes_both_survive(self, cfg):
        out = _manual_output(cfg)
        out.levels[0].cls_map.data[0, 0, 3, 4] = 2.2
        out.levels[0].cls_map.data[0, 1, 3, 4] = 2.0
        dets = decode_detections(out, score_thresh=0.5, nms_iou=0.5)
        assert sorted(d.cls for d in dets) == [0, 1]

    def test_equal_scores_tie_breaks_to_lower_anchor_index(self, cfg):
        out = _manual_output(cfg)
        # two distant anchors, same class, identical logits
        out.levels[0].cls_map.data[0, 0, 0, 0] = 2.0
        out.levels[0].cls_map.data[0, 0, 6, 6] = 2.0
        dets = decode_detections(out, score_thresh=0.5, nms_iou=0.5)
        assert len(dets) == 2
        assert dets[0].box.center[0] < dets[1].box.center[0]

    def test_thresholds_validated(self, cfg):
        out = _manual_output(cfg)
        with pytest.raises(ValueError, match="thresholds"):
            decode_detections(out, score_thresh=1.5, nms_iou=0.5)

    def test_boxes_clipped_to_image(self, cfg):
        out = _manual_output(cfg)
        out.levels[0].cls_map.data[0, 0, 0, 0] = 3.0
        reg = out.levels[0].reg_map.data
        reg[0, :, 0, 0] = -40.0
        reg[0, 0 * 8 + 7, 0, 0] = 40.0  # left offset 56 px from anchor (4, 4)
        reg[0, 1 * 8 + 7, 0, 0] = 40.0
        reg[0, 2 * 8 + 7, 0, 0] = 40.0
        reg[0, 3 * 8 + 7, 0, 0] = 40.0
        dets = decode_detections(out, 0.5, 0.5)
        box = dets[0].box
        assert box.x1 >= 0 and box.y1 >= 0 and box.x2 <= 96 and box.y2 <= 96


class TestFlops:
    def test_light_ml_adds_exactly_its_overhead(self, cfg):
        from dataclasses import replace

        base = GFLDetector(cfg, np.random.default_rng(0)).flop_report((96, 96)).total
        lifted_cfg = replace(cfg, light_ml=True, light_ml_k=0.25)
        lifted = GFLDetector(lifted_cfg, np.random.default_rng(0)).flop_report((96, 96)).total
        from dronekd.lightml import flop_overhead

        delta = flop_overhead(cfg.head_channels, 0.25, (96, 96), cfg.strides).total
        assert lifted - base == delta
