"""Toy FPN detector: operator oracles, losses, and end-to-end gradients."""

import math

import numpy as np
import pytest

from dualatt import autodiff as ad
from dualatt.autodiff import Tensor
from dualatt.anchors import MatchResult, generate_anchors, match_anchors
from dualatt.boxes import GroundTruthBox
from dualatt.detector import (
    DetectorConfig,
    ToyDetector,
    conv3x3,
    decode_and_nms,
    focal_loss,
    huber,
    smooth_l1,
    upsample2x,
)
from dualatt.errors import ConfigError, DimensionError


def conv3x3_reference(x, w, b, stride):
    """Quintuple-loop oracle with zero padding of 1."""
    B, C, H, W = x.shape
    O = w.shape[0]
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, O, Ho, Wo))
    for bi in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for u in range(3):
                            for v in range(3):
                                acc += w[o, c, u, v] * xp[bi, c, stride * i + u, stride * j + v]
                    out[bi, o, i, j] = acc
    return out


MICRO = DetectorConfig(
    image_size=(8, 8),
    strides=(8,),
    backbone_width=4,
    fpn_channels=4,
    num_classes=3,
    anchor_scales=(1.0, 1.5),
    anchor_ratios=(1.0,),
)


class TestConv3x3:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_loop_oracle(self, stride):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv3x3(Tensor(x), Tensor(w), Tensor(b), stride=stride)
        np.testing.assert_allclose(out.data, conv3x3_reference(x, w, b, stride), atol=1e-12)

    def test_no_bias(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3))
        out = conv3x3(Tensor(x), Tensor(w), None)
        np.testing.assert_allclose(out.data, conv3x3_reference(x, w, None, 1), atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, stride):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        ho = (4 - 1) // stride + 1
        probe = Tensor(rng.normal(size=(1, 3, ho, ho)))

        def f():
            return ad.reduce_sum(ad.mul(conv3x3(x, w, b, stride=stride), probe))

        assert ad.finite_diff_check(f, [x, w, b]) < 1e-4

    def test_channel_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            conv3x3(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))), None)


class TestUpsample:
    def test_values_repeat(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = upsample2x(x)
        np.testing.assert_array_equal(
            out.data[0, 0],
            [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]],
        )

    def test_gradient_sum_pools(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        ad.backward(ad.reduce_sum(upsample2x(x)))
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


class TestHuber:
    def test_zero_residual(self):
        assert huber(Tensor(np.zeros(3)), 1.0).data.sum() == 0.0

    def test_quadratic_branch(self):
        r = 0.4
        out = huber(Tensor(np.array([r])), 1.0)
        np.testing.assert_allclose(out.data, 0.5 * r * r / 1.0)

    def test_linear_branch(self):
        out = huber(Tensor(np.array([2.0])), 1.0)
        np.testing.assert_allclose(out.data, 1.5)

    def test_gradient_away_from_kink(self):
        x = Tensor(np.array([-2.0, -0.4, 0.3, 1.7]), requires_grad=True)

        def f():
            return ad.reduce_sum(huber(x, 1.0))

        assert ad.finite_diff_check(f, [x]) < 1e-6


def single_anchor_fixture(p, target_positive):
    """One anchor, one class, as a [B=1, M=1, N=1] logits tensor + match."""
    logit = math.log(p / (1.0 - p))
    assignment = np.array([0 if target_positive else -1], dtype=np.int64)
    cls_targets = np.array([[1.0 if target_positive else 0.0]])
    match = MatchResult(assignment, cls_targets, np.zeros((1, 4)))
    return Tensor(np.array([[[logit]]]), requires_grad=True), match


class TestFocalLoss:
    def test_scalar_formula(self):
        logits, match = single_anchor_fixture(0.6, True)
        loss = focal_loss(logits, [match], alpha=0.25, gamma=2.0)
        expected = -0.25 * 0.4**2 * math.log(0.6)
        np.testing.assert_allclose(loss.item(), expected, rtol=1e-10)
        assert abs(loss.item() - 0.020433) < 1e-5

    def test_gamma_zero_reduces_to_half_bce(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(1, 6, 2))
        cls_targets = rng.integers(0, 2, size=(6, 2)).astype(float)
        assignment = np.where(cls_targets.any(axis=1), 0, -1).astype(np.int64)
        match = MatchResult(assignment, cls_targets, np.zeros((6, 4)))
        loss = focal_loss(Tensor(logits), [match], alpha=0.5, gamma=0.0)
        p = 1.0 / (1.0 + np.exp(-logits[0]))
        bce = -(cls_targets * np.log(p) + (1 - cls_targets) * np.log(1 - p)).sum()
        num_pos = max(int((assignment >= 0).sum()), 1)
        np.testing.assert_allclose(loss.item(), 0.5 * bce / num_pos, atol=1e-10)

    def test_perfect_logits_vanish(self):
        targets = np.array([[1.0, 0.0], [0.0, 1.0]])
        logits = np.where(targets > 0, 20.0, -20.0)[None]
        match = MatchResult(np.array([0, 1]), targets, np.zeros((2, 4)))
        loss = focal_loss(Tensor(logits), [match], alpha=0.25, gamma=2.0)
        assert loss.item() < 1e-6

    def test_ignored_anchors_excluded(self):
        logits = np.array([[[5.0], [-5.0]]])
        match_all = MatchResult(np.array([0, -1]), np.array([[1.0], [0.0]]), np.zeros((2, 4)))
        match_ign = MatchResult(np.array([0, -2]), np.array([[1.0], [0.0]]), np.zeros((2, 4)))
        full = focal_loss(Tensor(logits), [match_all], 0.25, 2.0).item()
        only_pos = focal_loss(Tensor(logits), [match_ign], 0.25, 2.0).item()
        assert only_pos < full

    def test_gradient(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        matches = []
        for _ in range(2):
            assignment = rng.choice([-2, -1, 0], size=4).astype(np.int64)
            cls_targets = np.zeros((4, 3))
            cls_targets[assignment >= 0, rng.integers(0, 3)] = 1.0
            matches.append(MatchResult(assignment, cls_targets, np.zeros((4, 4))))

        def f():
            return focal_loss(logits, matches, 0.25, 2.0)

        assert ad.finite_diff_check(f, [logits]) < 1e-4


class TestSmoothL1:
    def make_match(self, assignment, box_targets):
        n = len(assignment)
        return MatchResult(np.asarray(assignment), np.zeros((n, 2)), np.asarray(box_targets, dtype=float))

    def test_zero_residual(self):
        preds = Tensor(np.zeros((1, 2, 4)), requires_grad=True)
        match = self.make_match([0, -1], np.zeros((2, 4)))
        assert smooth_l1(preds, [match], 1.0).item() == 0.0

    def test_piecewise_values(self):
        # one positive anchor, residuals [0.5, 2.0, 0, 0], beta 1:
        # 0.5*0.25 + 1.5 = 1.625, mean over 1 positive
        preds = Tensor(np.array([[[0.5, 2.0, 0.0, 0.0]]]))
        match = self.make_match([0], np.zeros((1, 4)))
        np.testing.assert_allclose(smooth_l1(preds, [match], 1.0).item(), 0.125 + 1.5)

    def test_no_positives_gives_zero(self):
        preds = Tensor(np.ones((1, 3, 4)), requires_grad=True)
        match = self.make_match([-1, -1, -2], np.zeros((3, 4)))
        assert smooth_l1(preds, [match], 1.0).item() == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(5)
        preds = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        matches = [
            self.make_match([0, -1, 1], rng.normal(size=(3, 4)) + 3.0),
            self.make_match([-1, 0, -2], rng.normal(size=(3, 4)) + 3.0),
        ]

        def f():
            return smooth_l1(preds, matches, 1.0 / 9.0)

        assert ad.finite_diff_check(f, [preds]) < 1e-4


class TestDetectorForward:
    def test_output_shapes(self):
        cfg = DetectorConfig()
        det = ToyDetector(cfg, np.random.default_rng(0))
        out = det.forward(Tensor(np.random.default_rng(1).normal(size=(2, 1, 64, 64))))
        assert [t.shape for t in out["fpn_features"]] == [(2, 16, 8, 8), (2, 16, 4, 4)]
        assert [t.shape for t in out["cls_logits"]] == [(2, 12, 8, 8), (2, 12, 4, 4)]
        assert [t.shape for t in out["box_preds"]] == [(2, 16, 8, 8), (2, 16, 4, 4)]

    def test_zero_weight_heads_emit_bias(self):
        cfg = MICRO
        det = ToyDetector(cfg, np.random.default_rng(2))
        det.params["head.cls.out.w"].data[:] = 0.0
        out = det.forward(Tensor(np.random.default_rng(3).normal(size=(1, 1, 8, 8))))
        bias = det.params["head.cls.out.b"].data
        expected = np.broadcast_to(bias[None, :, None, None], out["cls_logits"][0].shape)
        np.testing.assert_allclose(out["cls_logits"][0].data, expected, atol=1e-12)

    def test_bit_reproducible(self):
        imgs = np.random.default_rng(4).normal(size=(1, 1, 64, 64))
        outs = []
        for _ in range(2):
            det = ToyDetector(DetectorConfig(), np.random.default_rng(0))
            out = det.forward(Tensor(imgs.copy()), mode="train")
            outs.append(np.concatenate([t.data.ravel() for t in out["cls_logits"]]))
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_wrong_size_rejected(self):
        det = ToyDetector(DetectorConfig(), np.random.default_rng(0))
        with pytest.raises(DimensionError):
            det.forward(Tensor(np.zeros((1, 1, 32, 32))))

    def test_indivisible_config_rejected(self):
        with pytest.raises(ConfigError):
            DetectorConfig(image_size=(60, 60))


class TestDecodeNMS:
    def setup_method(self):
        self.cfg = MICRO
        self.det = ToyDetector(self.cfg, np.random.default_rng(6))

    def test_all_suppressed_logits_give_empty(self):
        cls = [np.full((1, 6, 1, 1), -20.0)]
        box = [np.zeros((1, 8, 1, 1))]
        out = decode_and_nms(
            cls, box, self.det.anchors, 3, (8, 8), 0.05, 0.5, 10
        )
        assert out == [[]]

    def test_single_dominant_anchor(self):
        cls = [np.full((1, 6, 1, 1), -20.0)]
        cls[0][0, 1 * 2 + 0, 0, 0] = 6.0  # class 1, anchor 0
        box = [np.zeros((1, 8, 1, 1))]
        out = decode_and_nms(cls, box, self.det.anchors, 3, (8, 8), 0.05, 0.5, 10)
        assert len(out[0]) == 1
        det = out[0][0]
        assert det.class_id == 1
        anchor = self.det.anchors.boxes[0]
        from dualatt.boxes import clip_boxes

        np.testing.assert_allclose(det.box, clip_boxes(anchor[None], 8, 8)[0])

    def test_matches_brute_force_nms(self):
        # five candidates on one class with varying overlap
        rng = np.random.default_rng(7)
        cfg = DetectorConfig(image_size=(16, 16), strides=(8,), backbone_width=4,
                             fpn_channels=4, num_classes=1,
                             anchor_scales=(1.0,), anchor_ratios=(1.0,))
        det = ToyDetector(cfg, rng)
        cls = [rng.uniform(1.0, 3.0, size=(1, 1, 2, 2))]
        box = [rng.uniform(-0.1, 0.1, size=(1, 4, 2, 2))]
        out = decode_and_nms(cls, box, det.anchors, 1, (16, 16), 0.05, 0.3, 10)

        from dualatt.boxes import clip_boxes, decode_boxes, iou

        offsets = box[0].reshape(1, 1, 4, 2, 2).transpose(0, 3, 4, 1, 2).reshape(4, 4)
        decoded = clip_boxes(decode_boxes(offsets, det.anchors.boxes), 16, 16)
        scores = 1.0 / (1.0 + np.exp(-cls[0].reshape(1, 1, 1, 2, 2).transpose(0, 3, 4, 2, 1).reshape(4)))
        remaining = list(range(4))
        expect = []
        while remaining:
            best = min(remaining, key=lambda i: (-scores[i], i))
            expect.append(best)
            remaining = [i for i in remaining if i != best and iou(decoded[best], decoded[i]) <= 0.3]
        got_boxes = [d.box for d in out[0]]
        assert len(got_boxes) == len(expect)
        for g, e in zip(got_boxes, expect):
            np.testing.assert_allclose(g, decoded[e])


class TestEndToEndGradient:
    def test_micro_detector_losses_pass_finite_differences(self):
        rng = np.random.default_rng(8)
        det = ToyDetector(MICRO, rng)
        images = Tensor(rng.normal(size=(1, 1, 8, 8)))
        gts = [[GroundTruthBox(1, np.array([1.0, 1.0, 7.0, 7.0]))]]

        def f():
            out = det.forward(images, mode="train")
            cls_loss, box_loss = det.detection_loss(out, gts)
            return ad.add(cls_loss, box_loss)

        # backbone conv biases do not exist; bn params and head params all live
        names = [n for n in det.parameters()]
        params = [det.params[n] for n in names]
        err = ad.finite_diff_check(f, params)
        assert err < 1e-4, f"worst relative error {err}"
