"""Adversarial background patches against face detectors.

Core pieces: box geometry and IoU matching (`geometry`), the scaled+tiled
patch applier (`patching`), the borderline false-positive training
objective and baselines (`losses`), a differentiable toy detector plus the
external-detector contract (`detectors`), the sign-gradient training loop
(`training`), and the obstruction-evaluation harness (`evaluation`).
"""

from .geometry import Box, Detection, GroundTruthSet, MatchOutcome, borderline_flag, classify, iou, max_iou
from .patching import (
    ForegroundMask,
    Patch,
    PatchTile,
    ScaledPatch,
    apply_patch,
    composite,
    scale_patch,
    tile_patch,
)

__all__ = [
    "Box",
    "Detection",
    "GroundTruthSet",
    "MatchOutcome",
    "borderline_flag",
    "classify",
    "iou",
    "max_iou",
    "ForegroundMask",
    "Patch",
    "PatchTile",
    "ScaledPatch",
    "apply_patch",
    "composite",
    "scale_patch",
    "tile_patch",
]
