"""Axis-aligned box geometry and IoU-threshold detection matching.

Boxes are stored in center format (x, y, w, h) with x as the column
coordinate and y as the row coordinate; IoU math runs on the corner form.
Matching is existential: a detection is a true positive as soon as any
ground-truth box overlaps it at or above the threshold, and one ground-truth
box may certify several true positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Sequence, Tuple


@dataclass(frozen=True)
class Box:
    """Rectangle in center format: (x, y) center and (w, h) extent, pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extent must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> Tuple[float, float, float, float]:
        """Return (x1, y1, x2, y2) with x1 < x2 and y1 < y2."""
        return (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class Detection:
    """One detector output: a confidence in [0, 1] plus a center-format box."""

    confidence: float
    box: Box

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass
class GroundTruthSet:
    """Ordered list of true face boxes for one image.

    May be empty only for images that are excluded from training; the
    scaling and loss paths require at least one box.
    """

    boxes: List[Box] = field(default_factory=list)
    image_id: str = ""

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self) -> Iterator[Box]:
        return iter(self.boxes)

    def __bool__(self) -> bool:
        return bool(self.boxes)


@dataclass
class MatchOutcome:
    """Detection/ground-truth pairing for one image at a fixed IoU threshold.

    ``tp`` holds (detection index, best-matching GT index) pairs, ``fp`` the
    unmatched detection indices, ``fn`` the GT indices no detection reached,
    and ``per_detection_max_iou`` the max IoU of each detection against the
    ground truth (0.0 when there is no ground truth).
    """

    tp: List[Tuple[int, int]] = field(default_factory=list)
    fp: List[int] = field(default_factory=list)
    fn: List[int] = field(default_factory=list)
    per_detection_max_iou: List[float] = field(default_factory=list)

    @property
    def matched_gt(self) -> List[int]:
        """Distinct GT indices matched by at least one detection."""
        return sorted({k for _, k in self.tp})


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; symmetric, 0 when disjoint."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # areas from the same corner values, so identical boxes give exactly 1.0
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def max_iou(det: Detection, gts: GroundTruthSet) -> float:
    """Maximum IoU of a detection against any ground-truth box.

    Raises ValueError on an empty ground-truth set: the maximum is taken
    over the GT boxes and the training pipeline guarantees at least one.
    """
    if not gts:
        raise ValueError("max_iou requires a non-empty ground-truth set")
    return max(iou(det.box, g) for g in gts)


def classify(dets: Sequence[Detection], gts: GroundTruthSet, theta_d: float) -> MatchOutcome:
    """Split detections into TP/FP and ground truth into hit/FN at ``theta_d``.

    A detection is TP iff some GT box overlaps it with IoU >= theta_d
    (ties at the threshold count as TP); otherwise it is FP. A GT box is FN
    iff every detection falls below the threshold against it. Matching is
    not one-to-one: each detection is judged independently.
    """
    if not 0.0 < theta_d < 1.0:
        raise ValueError(f"theta_d must lie in (0, 1), got {theta_d}")
    out = MatchOutcome()
    gt_hit = [False] * len(gts)
    for j, det in enumerate(dets):
        ious = [iou(det.box, g) for g in gts]
        best = max(ious) if ious else 0.0
        out.per_detection_max_iou.append(best)
        if ious and best >= theta_d:
            out.tp.append((j, ious.index(best)))
            for k, v in enumerate(ious):
                if v >= theta_d:
                    gt_hit[k] = True
        else:
            out.fp.append(j)
    out.fn = [k for k, hit in enumerate(gt_hit) if not hit]
    return out


def borderline_flag(a: float, theta_t: float, theta_f: float) -> int:
    """1 when a max-IoU value sits in the band [theta_f, theta_t), else 0.

    The band is inclusive at the lower threshold and exclusive at the upper
    one, selecting detections on the boundary between TP and FP.
    """
    if not theta_t > theta_f:
        raise ValueError(
            f"borderline thresholds must satisfy theta_t > theta_f, got {theta_t} <= {theta_f}"
        )
    return 1 if theta_f <= a < theta_t else 0
