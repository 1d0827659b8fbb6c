import numpy as np
import pytest
import torch

from rapforge.datasets import SceneSpec, make_blob_scene
from rapforge.detectors import detect, toy_detector
from rapforge.geometry import Box, Detection, GroundTruthSet
from rapforge.losses import (
    LossConfig,
    UnsupportedLossVariant,
    bfp_loss,
    bfp_loss_terms,
    borderline_gates,
    dpatch_loss,
    maxloss_objective,
)

from oracles import central_difference

CFG = LossConfig()


def det_at_iou(gt: Box, target_iou: float, conf: float) -> Detection:
    """Detection overlapping ``gt`` at exactly ``target_iou`` (x-shifted copy)."""
    # For two equal w x h boxes offset by d: iou = (w - d) / (w + d)
    d = gt.w * (1.0 - target_iou) / (1.0 + target_iou)
    return Detection(confidence=conf, box=Box(gt.x + d, gt.y, gt.w, gt.h))


GT = GroundTruthSet(boxes=[Box(10, 10, 8, 8)])


class TestLossConfig:
    def test_valid_defaults(self):
        assert CFG.theta_t > CFG.theta_d > CFG.theta_f

    def test_ordering_enforced(self):
        with pytest.raises(ValueError):
            LossConfig(theta_t=0.4, theta_d=0.5, theta_f=0.3)
        with pytest.raises(ValueError):
            LossConfig(theta_t=0.6, theta_d=0.2, theta_f=0.3)

    def test_variant_names(self):
        with pytest.raises(ValueError):
            LossConfig(variant="nope")


class TestBfpLoss:
    def test_empty_detections(self):
        out = bfp_loss(GT, [], CFG)
        assert out.value == 0.0 and out.active_count == 0
        assert out.grad_confidences.shape == (0,)

    def test_single_gated_detection(self):
        det = det_at_iou(GT.boxes[0], 0.5, conf=0.5)
        out = bfp_loss(GT, [det], CFG)
        assert out.active_count == 1
        assert out.value == pytest.approx(-np.log(0.5), rel=1e-12)

    def test_outside_band_is_zero(self):
        dets = [det_at_iou(GT.boxes[0], 0.9, 0.99), det_at_iou(GT.boxes[0], 0.2, 0.99)]
        out = bfp_loss(GT, dets, CFG)
        assert out.value == 0.0 and out.active_count == 0

    def test_zero_iff_inactive_or_zero_confidence(self):
        gated_zero = det_at_iou(GT.boxes[0], 0.45, conf=0.0)
        out = bfp_loss(GT, [gated_zero], CFG)
        assert out.active_count == 1 and out.value == 0.0
        gated_live = det_at_iou(GT.boxes[0], 0.45, conf=0.25)
        assert bfp_loss(GT, [gated_live], CFG).value > 0.0

    def test_confidence_one_is_clamped_finite(self):
        det = det_at_iou(GT.boxes[0], 0.45, conf=1.0)
        out = bfp_loss(GT, [det], CFG)
        assert np.isfinite(out.value) and out.value > 10.0

    def test_gate_correctness_exact(self):
        gated = det_at_iou(GT.boxes[0], 0.5, 0.3)
        ungated = det_at_iou(GT.boxes[0], 0.8, 0.3)
        base = bfp_loss(GT, [gated, ungated], CFG).value
        for c in (0.0, 0.5, 0.99):
            moved = Detection(confidence=c, box=ungated.box)
            assert bfp_loss(GT, [gated, moved], CFG).value == base

    def test_monotone_in_gated_confidence(self):
        values = [
            bfp_loss(GT, [det_at_iou(GT.boxes[0], 0.5, c)], CFG).value
            for c in np.linspace(0.0, 0.95, 12)
        ]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_gradient_formula_and_fd(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            n = int(rng.integers(1, 5))
            ious = rng.uniform(0.0, 0.95, size=n)
            confs = rng.uniform(0.0, 0.99, size=n)
            dets = [det_at_iou(GT.boxes[0], float(a), float(c)) for a, c in zip(ious, confs)]
            out = bfp_loss(GT, dets, CFG)
            gates = borderline_gates(GT, dets, CFG)
            for j in range(n):
                expected = gates[j] / (1.0 - confs[j])
                assert out.grad_confidences[j] == pytest.approx(expected, rel=1e-12)

                def value_at(p):
                    moved = list(dets)
                    moved[j] = Detection(confidence=p, box=dets[j].box)
                    return bfp_loss(GT, moved, CFG).value

                fd = central_difference(value_at, confs[j], 1e-6)
                if gates[j] == 0:
                    assert fd == 0.0
                else:
                    assert abs(fd - expected) <= 1e-6 * abs(expected)

    def test_torch_terms_match_numpy_value(self):
        rng = np.random.default_rng(23)
        ious = rng.uniform(0.0, 0.95, size=6)
        confs = rng.uniform(0.0, 0.99, size=6)
        dets = [det_at_iou(GT.boxes[0], float(a), float(c)) for a, c in zip(ious, confs)]
        ref = bfp_loss(GT, dets, CFG)
        gates = borderline_gates(GT, dets, CFG)
        got = bfp_loss_terms(torch.from_numpy(confs), torch.from_numpy(gates))
        assert float(got) == pytest.approx(ref.value, rel=1e-12)

    def test_torch_terms_empty(self):
        assert float(bfp_loss_terms(torch.zeros(0, dtype=torch.float64), torch.zeros(0))) == 0.0


def _scene_with_gts(rng):
    img, _, _ = make_blob_scene(rng, SceneSpec(blob_sizes=(16,)))
    handle = toy_detector()
    gts = GroundTruthSet(boxes=[d.box for d in detect(handle, img)])
    return handle, torch.from_numpy(img), gts


class TestBaselineObjectives:
    def test_unsupported_variant_errors(self):
        handle = toy_detector()
        handle.supports_training_loss = False
        img = torch.zeros(32, 32, 3, dtype=torch.float64)
        with pytest.raises(UnsupportedLossVariant):
            dpatch_loss(handle, img, Box(4, 4, 8, 8))
        with pytest.raises(UnsupportedLossVariant):
            maxloss_objective(handle, img, GroundTruthSet(boxes=[Box(4, 4, 8, 8)]))

    def test_dpatch_descends_under_gradient_step(self, rng):
        handle, img, gts = _scene_with_gts(rng)
        target = Box(8, 8, 12, 12)
        leaf = img.clone().requires_grad_(True)
        loss = dpatch_loss(handle, leaf, target)
        grad = torch.autograd.grad(loss, leaf)[0]
        stepped = (leaf.detach() - 1.0 * grad).clamp(0, 1)
        assert float(dpatch_loss(handle, stepped, target).detach()) < float(loss.detach())

    def test_dpatch_prefers_matching_target(self, rng):
        handle, img, gts = _scene_with_gts(rng)
        own = gts.boxes[0]
        at_own = float(dpatch_loss(handle, img, own).detach())
        far = Box(own.x + 15, own.y, own.w, own.h)
        assert at_own < float(dpatch_loss(handle, img, far).detach())

    def test_maxloss_is_negated_and_ascends(self, rng):
        handle, img, gts = _scene_with_gts(rng)
        from rapforge.detectors import training_loss

        assert float(maxloss_objective(handle, img, gts).detach()) == pytest.approx(
            -float(training_loss(handle, img, gts).detach()), rel=1e-12
        )
        leaf = img.clone().requires_grad_(True)
        obj = maxloss_objective(handle, leaf, gts)
        grad = torch.autograd.grad(obj, leaf)[0]
        stepped = (leaf.detach() - 1.0 * grad).clamp(0, 1)  # descend the objective
        model_loss_before = -float(obj.detach())
        model_loss_after = -float(maxloss_objective(handle, stepped, gts).detach())
        assert model_loss_after > model_loss_before

    def test_detached_image_has_no_gradient_path(self, rng):
        handle, img, gts = _scene_with_gts(rng)
        obj = maxloss_objective(handle, img.detach(), gts)
        assert not obj.requires_grad
