"""Attack objectives: the borderline false-positive loss and two baselines.

The borderline false-positive (BFP) objective gates detections whose
maximum IoU against the ground truth lies in [theta_f, theta_t), the
boundary region between true and false positives, and sums
-log(1 - confidence) over the gated set. Driving that sum up raises the
confidence of near-miss detections around the true face, spawning false
positives there and degrading the true detections.

The gate is a hard indicator treated as a constant: gradients flow only
through the confidences of gated detections, never through the IoU values.

Two comparison objectives wrap a detector's native training loss: one
trains the detector toward a target that declares the patch region the
sole object, the other simply negates the loss against the true ground
truth so that minimizing it degrades the detector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .detectors import DetectorHandle, training_loss
from .geometry import Box, Detection, GroundTruthSet, borderline_flag, max_iou

CONFIDENCE_CEILING = 1.0 - 1e-7

LOSS_VARIANTS = ("bfp", "dpatch", "maxloss")


class UnsupportedLossVariant(RuntimeError):
    """Raised when a loss variant needs detector facilities that are absent."""


@dataclass(frozen=True)
class LossConfig:
    theta_t: float = 0.6
    theta_f: float = 0.3
    theta_d: float = 0.5
    variant: str = "bfp"

    def __post_init__(self) -> None:
        if not self.theta_t > self.theta_d > self.theta_f:
            raise ValueError(
                "thresholds must satisfy theta_t > theta_d > theta_f, got "
                f"{self.theta_t} / {self.theta_d} / {self.theta_f}"
            )
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant '{self.variant}', expected one of {LOSS_VARIANTS}")


@dataclass
class LossValue:
    """BFP loss evaluation: scalar value, number of gated detections, and
    the analytic gradient with respect to each detection confidence."""

    value: float
    active_count: int
    grad_confidences: np.ndarray


def borderline_gates(gts: GroundTruthSet, dets: Sequence[Detection], cfg: LossConfig) -> np.ndarray:
    """0/1 gate per detection: 1 iff max IoU against GT lies in [theta_f, theta_t)."""
    return np.array(
        [borderline_flag(max_iou(d, gts), cfg.theta_t, cfg.theta_f) for d in dets],
        dtype=np.float64,
    )


def bfp_loss(gts: GroundTruthSet, dets: Sequence[Detection], cfg: LossConfig) -> LossValue:
    """Borderline false-positive loss over one image's detections.

    Returns -sum(gate_j * log(1 - p_j)) with confidences clamped below 1 so
    the logarithm stays finite. The gradient field holds
    d(loss)/d(p_j) = gate_j / (1 - p_j).
    """
    if not dets:
        return LossValue(value=0.0, active_count=0, grad_confidences=np.zeros(0))
    gates = borderline_gates(gts, dets, cfg)
    p = np.minimum(np.array([d.confidence for d in dets], dtype=np.float64), CONFIDENCE_CEILING)
    value = float(-(gates * np.log1p(-p)).sum())
    grad = gates / (1.0 - p)
    return LossValue(value=value, active_count=int(gates.sum()), grad_confidences=grad)


def bfp_loss_terms(confidences: torch.Tensor, gates: torch.Tensor) -> torch.Tensor:
    """Autograd form of the BFP sum for the training loop.

    ``confidences`` must stay attached to the detector graph; ``gates`` is
    the constant 0/1 vector from ``borderline_gates``.
    """
    if confidences.numel() == 0:
        return torch.zeros((), dtype=torch.float64)
    p = confidences.clamp(max=CONFIDENCE_CEILING)
    return -(gates * torch.log1p(-p)).sum()


def dpatch_loss(handle: DetectorHandle, image: torch.Tensor, patch_region: Box) -> torch.Tensor:
    """Detector training loss against a labeling where the patch region is
    the only object. Minimizing it drags every inference onto the patch."""
    if not handle.supports_training_loss:
        raise UnsupportedLossVariant(
            f"dpatch objective needs the training loss of detector '{handle.name}'"
        )
    target = GroundTruthSet(boxes=[patch_region])
    return training_loss(handle, image, target)


def maxloss_objective(handle: DetectorHandle, image: torch.Tensor, gts: GroundTruthSet) -> torch.Tensor:
    """Negated detector training loss against the true ground truth, so a
    minimizer maximizes the model's own loss."""
    if not handle.supports_training_loss:
        raise UnsupportedLossVariant(
            f"maxloss objective needs the training loss of detector '{handle.name}'"
        )
    return -training_loss(handle, image, gts)
