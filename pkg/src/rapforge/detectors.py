"""Pluggable face-detector contract plus a differentiable toy detector.

The toy detector is a multi-scale sliding-window matched filter: a window
scores high when its interior is uniformly brighter than the brightest of
the four flanking bands (band width = half the window). A logistic squash
turns scores into confidences, window centers are refined toward the local
intensity centroid, and greedy NMS deduplicates. Every score is a smooth
function of the input pixels, so confidences (and refined centers) carry
gradients back to the image.

External detectors plug in through a subprocess boundary: an executable
named after the detector under ``RAPFORGE_DETECTOR_DIR`` receives an image
path and prints one JSON object per detection (keys p, x, y, w, h). That
is also the on-disk detection-dump format used by the evaluation harness.
"""

from __future__ import annotations

import json
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import torchvision

from .geometry import Box, Detection, GroundTruthSet, iou

DETECTOR_DIR_ENV = "RAPFORGE_DETECTOR_DIR"


class DetectorUnavailable(RuntimeError):
    """Raised when an external adapter's runtime or weights cannot be found."""


class UnsupportedDetectorOperation(RuntimeError):
    """Raised when a handle lacks gradients or a native training loss."""


@dataclass(frozen=True)
class ToyDetectorSpec:
    """Configuration of the built-in detector; defaults are calibrated for
    the synthetic blob scenes (bright square on mid-gray background)."""

    window_sizes: Tuple[int, ...] = (8, 16, 32)
    stride: int = 1
    band_divisor: int = 4  # flanking-band width = window size / band_divisor
    logistic_slope: float = 20.0
    logistic_offset: float = 0.3
    center_refine: float = 0.5


@dataclass
class DetectorHandle:
    name: str
    supports_gradients: bool
    supports_training_loss: bool
    confidence_threshold: float = 0.5
    nms_threshold: float = 0.5
    spec: Optional[ToyDetectorSpec] = None
    adapter: Optional["ExternalDetectorAdapter"] = None


def toy_detector(
    confidence_threshold: float = 0.5,
    nms_threshold: float = 0.5,
    spec: Optional[ToyDetectorSpec] = None,
) -> DetectorHandle:
    return DetectorHandle(
        name="toy",
        supports_gradients=True,
        supports_training_loss=True,
        confidence_threshold=confidence_threshold,
        nms_threshold=nms_threshold,
        spec=spec or ToyDetectorSpec(),
    )


def get_detector(name: str, **kwargs) -> DetectorHandle:
    """Resolve a detector by name: "toy" is built in, anything else is an
    external adapter located via RAPFORGE_DETECTOR_DIR."""
    if name == "toy":
        return toy_detector(**kwargs)
    adapter = ExternalDetectorAdapter(name)
    return DetectorHandle(
        name=name,
        supports_gradients=False,
        supports_training_loss=False,
        confidence_threshold=kwargs.get("confidence_threshold", 0.5),
        nms_threshold=kwargs.get("nms_threshold", 0.5),
        adapter=adapter,
    )


# ---------------------------------------------------------------------------
# Toy detector internals
# ---------------------------------------------------------------------------


def _luminance(image: torch.Tensor) -> torch.Tensor:
    """(H, W) or (H, W, C) -> (1, 1, H, W) double, channel-averaged."""
    t = image.double() if image.dtype != torch.float64 else image
    if t.dim() == 3:
        t = t.mean(dim=2)
    if t.dim() != 2:
        raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {tuple(image.shape)}")
    return t.unsqueeze(0).unsqueeze(0)


def _box_mean(t: torch.Tensor, kh: int, kw: int) -> torch.Tensor:
    """Mean over kh x kw windows at every position (separable pooling)."""
    return F.avg_pool2d(F.avg_pool2d(t, (kh, 1), stride=1), (1, kw), stride=1)


def _coord_sum(p: torch.Tensor, size: int, axis: str) -> torch.Tensor:
    """Sum of (coordinate offset from window center) * intensity per window."""
    w = torch.arange(size, dtype=torch.float64) + 0.5 - size / 2.0
    if axis == "x":
        k1 = w.view(1, 1, 1, size)
        k2 = torch.ones(1, 1, size, 1, dtype=torch.float64)
    else:
        k1 = w.view(1, 1, size, 1)
        k2 = torch.ones(1, 1, 1, size, dtype=torch.float64)
    return F.conv2d(F.conv2d(p, k1), k2)


def toy_candidates(spec: ToyDetectorSpec, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Score every sliding window; returns (boxes (N, 4) center-format, conf (N,)).

    Confidences and refined centers stay connected to the autograd graph of
    ``image``; box widths/heights are the (constant) window sizes.
    """
    x = _luminance(image)
    height, width = x.shape[2], x.shape[3]
    st = spec.stride
    boxes_parts: List[torch.Tensor] = []
    conf_parts: List[torch.Tensor] = []
    for size in spec.window_sizes:
        if size > height or size > width:
            continue
        band = max(1, size // spec.band_divisor)
        p = F.pad(x, (band, band, band, band), mode="replicate")
        n_y = (height - size) // st + 1
        n_x = (width - size) // st + 1
        row_hi = band + (n_y - 1) * st + 1
        col_hi = band + (n_x - 1) * st + 1

        inner = _box_mean(p, size, size)
        horiz = _box_mean(p, band, size)
        vert = _box_mean(p, size, band)

        inner_w = inner[:, :, band:row_hi:st, band:col_hi:st]
        top_w = horiz[:, :, 0 : row_hi - band : st, band:col_hi:st]
        bot_w = horiz[:, :, size + band : size + row_hi : st, band:col_hi:st]
        left_w = vert[:, :, band:row_hi:st, 0 : col_hi - band : st]
        right_w = vert[:, :, band:row_hi:st, size + band : size + col_hi : st]

        side_max = torch.maximum(torch.maximum(top_w, bot_w), torch.maximum(left_w, right_w))
        score = inner_w - side_max
        conf = torch.sigmoid(spec.logistic_slope * (score - spec.logistic_offset))

        # Center refinement: intensity-weighted centroid inside the window.
        total = inner_w * float(size * size)
        off_x = _coord_sum(p, size, "x")[:, :, band:row_hi:st, band:col_hi:st] / (total + 1e-9)
        off_y = _coord_sum(p, size, "y")[:, :, band:row_hi:st, band:col_hi:st] / (total + 1e-9)

        u = torch.arange(0, n_y * st, st, dtype=torch.float64).view(1, 1, n_y, 1)
        v = torch.arange(0, n_x * st, st, dtype=torch.float64).view(1, 1, 1, n_x)
        cx = v + size / 2.0 + spec.center_refine * off_x
        cy = u + size / 2.0 + spec.center_refine * off_y

        n = n_y * n_x
        wh = torch.full((n,), float(size), dtype=torch.float64)
        boxes_parts.append(torch.stack([cx.reshape(n), cy.reshape(n), wh, wh], dim=1))
        conf_parts.append(conf.reshape(n))
    if not boxes_parts:
        empty = torch.zeros((0,), dtype=torch.float64)
        return empty.reshape(0, 4), empty
    return torch.cat(boxes_parts, dim=0), torch.cat(conf_parts, dim=0)


def _to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(dim=1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def _nms_indices(boxes: torch.Tensor, conf: torch.Tensor, threshold: float) -> torch.Tensor:
    """Greedy NMS on detached tensors; returns kept indices, confidence-descending."""
    if boxes.shape[0] == 0:
        return torch.zeros((0,), dtype=torch.int64)
    return torchvision.ops.nms(_to_xyxy(boxes.detach()), conf.detach(), threshold)


def nms_detections(dets: Sequence[Detection], threshold: float) -> List[Detection]:
    """Pure-python greedy NMS over Detection lists (suppress when IoU > threshold).

    Idempotent: re-running on its own output changes nothing.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: List[Detection] = []
    for i in order:
        if all(iou(dets[i].box, k.box) <= threshold for k in kept):
            kept.append(dets[i])
    return kept


def _as_detections(boxes: torch.Tensor, conf: torch.Tensor, indices: Sequence[int]) -> List[Detection]:
    b = boxes.detach()
    c = conf.detach()
    out = []
    for i in indices:
        out.append(
            Detection(
                confidence=float(c[i]),
                box=Box(float(b[i, 0]), float(b[i, 1]), float(b[i, 2]), float(b[i, 3])),
            )
        )
    return out


@dataclass
class GradientContext:
    """Graph handles from one differentiable forward pass.

    ``confidences``/``boxes`` stay aligned with ``tap_detections`` (the set
    the training loss sees: NMS-survivors before confidence thresholding by
    default). Any scalar loss over them can be backpropagated to the input
    image, and onward to patch pixels when the image was rendered in-graph.
    """

    image: torch.Tensor
    confidences: torch.Tensor
    boxes: torch.Tensor
    tap_detections: List[Detection] = field(default_factory=list)
    eval_detections: List[Detection] = field(default_factory=list)

    def pixel_gradient(self, loss: torch.Tensor) -> torch.Tensor:
        grad = torch.autograd.grad(loss, self.image, retain_graph=True, allow_unused=True)[0]
        if grad is None:
            grad = torch.zeros_like(self.image)
        return grad


def _image_to_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image
    if isinstance(image, (str, Path)):
        from .datasets import load_image

        return torch.from_numpy(load_image(image))
    return torch.from_numpy(np.asarray(image, dtype=np.float64))


def detect(handle: DetectorHandle, image) -> List[Detection]:
    """Run the detector: thresholded, NMS-deduplicated detections.

    Accepts an (H, W[, C]) array/tensor or an image path. Deterministic for
    the toy detector: identical input yields bit-identical output.
    """
    if handle.adapter is not None:
        return handle.adapter.detect(image, handle.confidence_threshold)
    with torch.no_grad():
        boxes, conf = toy_candidates(handle.spec, _image_to_tensor(image))
        mask = conf >= handle.confidence_threshold
        idx = torch.nonzero(mask, as_tuple=False).flatten()
        if idx.numel() == 0:
            return []
        keep = _nms_indices(boxes[idx], conf[idx], handle.nms_threshold)
        return _as_detections(boxes, conf, [int(idx[int(k)]) for k in keep])


def detect_with_gradients(
    handle: DetectorHandle, image: torch.Tensor, tap: str = "post_nms"
) -> Tuple[List[Detection], GradientContext]:
    """Differentiable forward pass returning detections plus graph handles.

    ``tap`` selects the set the loss sees: "post_nms" (NMS over all windows,
    no confidence threshold) or "pre_nms" (every window).
    """
    if not handle.supports_gradients:
        raise UnsupportedDetectorOperation(f"detector '{handle.name}' does not expose gradients")
    if tap not in ("post_nms", "pre_nms"):
        raise ValueError(f"unknown detection tap '{tap}'")
    boxes, conf = toy_candidates(handle.spec, image)
    keep_all = _nms_indices(boxes, conf, handle.nms_threshold)
    conf_det = conf.detach()
    eval_idx = [int(k) for k in keep_all if float(conf_det[int(k)]) >= handle.confidence_threshold]
    tap_idx = [int(k) for k in keep_all] if tap == "post_nms" else list(range(boxes.shape[0]))
    tap_t = torch.as_tensor(tap_idx, dtype=torch.int64)
    ctx = GradientContext(
        image=image,
        confidences=conf[tap_t] if tap_idx else conf[:0],
        boxes=boxes[tap_t] if tap_idx else boxes[:0],
        tap_detections=_as_detections(boxes, conf, tap_idx),
        eval_detections=_as_detections(boxes, conf, eval_idx),
    )
    return ctx.eval_detections, ctx


def training_loss(handle: DetectorHandle, image: torch.Tensor, target: GroundTruthSet) -> torch.Tensor:
    """Detector-native classification + localization loss against a labeling.

    Windows overlapping a target box at IoU >= 0.5 are positives; the loss
    is binary cross-entropy over all window confidences plus a squared
    center-offset term on positives. Differentiable w.r.t. the image.
    """
    if not handle.supports_training_loss:
        raise UnsupportedDetectorOperation(
            f"detector '{handle.name}' does not expose its training loss"
        )
    boxes, conf = toy_candidates(handle.spec, image)
    n = boxes.shape[0]
    if n == 0:
        return torch.zeros((), dtype=torch.float64)
    boxes_det = boxes.detach()
    labels = torch.zeros(n, dtype=torch.float64)
    matched: List[Optional[Box]] = [None] * n
    for i in range(n):
        bb = Box(*(float(v) for v in boxes_det[i]))
        best, best_gt = 0.0, None
        for g in target:
            v = iou(bb, g)
            if v > best:
                best, best_gt = v, g
        if best >= 0.5:
            labels[i] = 1.0
            matched[i] = best_gt
    c = conf.clamp(1e-7, 1.0 - 1e-7)
    cls = -(labels * torch.log(c) + (1.0 - labels) * torch.log(1.0 - c)).mean()
    reg = torch.zeros((), dtype=torch.float64)
    pos = [i for i in range(n) if matched[i] is not None]
    if pos:
        terms = []
        for i in pos:
            g = matched[i]
            size = boxes_det[i, 2]
            terms.append(((boxes[i, 0] - g.x) / size) ** 2 + ((boxes[i, 1] - g.y) / size) ** 2)
        reg = torch.stack(terms).mean()
    return cls + reg


# ---------------------------------------------------------------------------
# External adapters and the JSON-lines detection dump format
# ---------------------------------------------------------------------------


def detection_to_dict(det: Detection) -> dict:
    return {"p": det.confidence, "x": det.box.x, "y": det.box.y, "w": det.box.w, "h": det.box.h}


def detection_from_dict(d: dict) -> Detection:
    return Detection(confidence=float(d["p"]), box=Box(float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"])))


def write_detections_jsonl(path: Path, dets: Sequence[Detection]) -> None:
    with open(path, "w") as fh:
        for det in dets:
            fh.write(json.dumps(detection_to_dict(det)) + "\n")


def read_detections_jsonl(path: Path) -> List[Detection]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(detection_from_dict(json.loads(line)))
    return out


class ExternalDetectorAdapter:
    """Subprocess boundary to an out-of-tree detector.

    The adapter runs ``$RAPFORGE_DETECTOR_DIR/<name>`` with an image path
    argument and parses one JSON detection per stdout line. Missing runtime
    or weights raise DetectorUnavailable up front, never a silent empty
    result.
    """

    def __init__(self, name: str):
        root = os.environ.get(DETECTOR_DIR_ENV)
        if not root:
            raise DetectorUnavailable(
                f"external detector '{name}' requested but {DETECTOR_DIR_ENV} is not set"
            )
        exe = Path(root) / name
        if not exe.exists():
            raise DetectorUnavailable(f"external detector '{name}' not found at {exe}")
        self.name = name
        self.executable = exe

    def detect(self, image, confidence_threshold: float) -> List[Detection]:
        if isinstance(image, (str, Path)):
            return self._run(Path(image), confidence_threshold)
        from .datasets import save_image

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "frame.png"
            save_image(path, np.asarray(image, dtype=np.float64))
            return self._run(path, confidence_threshold)

    def _run(self, image_path: Path, confidence_threshold: float) -> List[Detection]:
        proc = subprocess.run(
            [str(self.executable), str(image_path)],
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            raise DetectorUnavailable(
                f"adapter '{self.name}' exited with {proc.returncode}: {proc.stderr.strip()}"
            )
        dets = []
        for line in proc.stdout.splitlines():
            line = line.strip()
            if line:
                dets.append(detection_from_dict(json.loads(line)))
        return [d for d in dets if d.confidence >= confidence_threshold]
