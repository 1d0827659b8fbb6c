"""Sign-gradient patch training with Nesterov momentum (NI-FGSM).

Each iteration evaluates the attack objective at the lookahead point
``patch + step * decay * momentum``, accumulates the L1-normalized gradient
into the momentum buffer, and moves every pixel by ``step * sign(momentum)``
before clipping back into [0, 1].

The trainer *ascends* the attack gain: for the borderline false-positive
variant that is the gated -log(1 - confidence) sum (raising near-miss
confidences), for the dpatch variant the negated detector loss toward a
patch-only labeling, and for the maxloss variant the detector loss against
the true ground truth. ``descend_objective`` flips the direction.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .config import AttackConfig
from .datasets import DatasetEntry, ImageCache, load_manifest, validate_dataset
from .detectors import DetectorHandle, detect_with_gradients
from .losses import (
    UnsupportedLossVariant,
    bfp_loss_terms,
    borderline_gates,
    dpatch_loss,
    maxloss_objective,
)
from .patching import Patch, config_hash, render_patched, save_patch

logger = logging.getLogger(__name__)

STALL_WARN_STREAK = 25


@dataclass
class HistoryRow:
    iteration: int
    loss: float
    active_count: int
    tp: Optional[int] = None
    fp: Optional[int] = None


@dataclass
class TrainState:
    patch: torch.Tensor
    momentum: torch.Tensor
    iteration: int = 0
    history: List[HistoryRow] = field(default_factory=list)
    rng: Optional[np.random.Generator] = None


@dataclass
class StallReport:
    """Summary of zero-loss stretches in a training history."""

    steps: int
    zero_fraction: float
    longest_zero_streak: int
    first_nonzero_iteration: Optional[int]


def nifgsm_step(state: TrainState, gradient: torch.Tensor, cfg: AttackConfig) -> TrainState:
    """One sign update: momentum accumulation of the L1-normalized gradient,
    then a step of exactly ``step_size`` per pixel (0 where momentum is 0).

    An all-zero gradient only decays the momentum; the patch then moves by
    sign(momentum) alone, which is a no-op when the momentum is zero too.
    """
    if gradient.shape != state.patch.shape:
        raise ValueError(
            f"gradient shape {tuple(gradient.shape)} != patch shape {tuple(state.patch.shape)}"
        )
    l1 = gradient.abs().sum()
    if float(l1) > 0.0:
        state.momentum = cfg.momentum_decay * state.momentum + gradient / l1
    else:
        state.momentum = cfg.momentum_decay * state.momentum
    state.patch = (state.patch + cfg.step_size * torch.sign(state.momentum)).clamp(0.0, 1.0)
    state.iteration += 1
    return state


def init_patch(cfg: AttackConfig, rng: np.random.Generator, channels: int = 3) -> torch.Tensor:
    if cfg.patch_init == "gray":
        return torch.full((cfg.patch_height, cfg.patch_width, channels), 0.5, dtype=torch.float64)
    return torch.from_numpy(
        rng.uniform(0.0, 1.0, size=(cfg.patch_height, cfg.patch_width, channels))
    )


def _batch_objective(
    detector: DetectorHandle,
    entries: Sequence[DatasetEntry],
    cache: ImageCache,
    patch: torch.Tensor,
    cfg: AttackConfig,
    indices: Sequence[int],
) -> Tuple[Optional[torch.Tensor], int]:
    """Summed attack gain over one batch plus the gated-detection count."""
    loss_cfg = cfg.loss_config()
    total: Optional[torch.Tensor] = None
    active = 0
    for idx in indices:
        e = entries[idx]
        image = torch.from_numpy(cache.image(e.image_path))
        mask = torch.from_numpy(cache.mask(e.mask_path))
        patched, region = render_patched(
            image, e.gts, patch, mask, cfg.alpha, cfg.placement, cfg.tile_phase, cfg.fixed_origin
        )
        if cfg.loss_variant == "bfp":
            _, ctx = detect_with_gradients(detector, patched, tap=cfg.detection_tap)
            if not ctx.tap_detections:
                continue
            gates = borderline_gates(e.gts, ctx.tap_detections, loss_cfg)
            active += int(gates.sum())
            if not gates.any():
                continue
            gain = bfp_loss_terms(ctx.confidences, torch.from_numpy(gates))
        elif cfg.loss_variant == "dpatch":
            gain = -dpatch_loss(detector, patched, region)
            _, ctx = detect_with_gradients(detector, patched, tap=cfg.detection_tap)
            active += len(ctx.tap_detections)
        else:  # maxloss
            gain = -maxloss_objective(detector, patched, e.gts)
            _, ctx = detect_with_gradients(detector, patched, tap=cfg.detection_tap)
            active += len(ctx.tap_detections)
        total = gain if total is None else total + gain
    return total, active


def train(
    dataset: Union[Path, str, Sequence[DatasetEntry]],
    detector: DetectorHandle,
    cfg: AttackConfig,
    out_dir: Optional[Path] = None,
    val_dataset: Union[Path, str, Sequence[DatasetEntry], None] = None,
) -> Tuple[Patch, List[HistoryRow]]:
    """Run the full patch-training loop; returns the final patch and history.

    Every image needs non-empty ground truth and a mask sidecar; validation
    fails fast with the offender list. With ``out_dir`` set, checkpoints
    (PNG + JSON sidecar), the best-so-far patch (lowest validation TP), the
    final patch, and the history CSV are written there.
    """
    if not detector.supports_gradients:
        raise UnsupportedLossVariant(f"detector '{detector.name}' cannot be used for training")
    entries = list(load_manifest(dataset)) if isinstance(dataset, (str, Path)) else list(dataset)
    validate_dataset(entries, require_masks=True)
    if val_dataset is None:
        val_entries = entries
    elif isinstance(val_dataset, (str, Path)):
        val_entries = load_manifest(val_dataset)
    else:
        val_entries = list(val_dataset)

    from .evaluation import evaluate

    rng = np.random.default_rng(cfg.seed)
    state = TrainState(patch=init_patch(cfg, rng), momentum=None, rng=rng)
    state.momentum = torch.zeros_like(state.patch)
    cache = ImageCache()
    digest = config_hash(cfg.to_dict())
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    best_tp: Optional[int] = None
    best_patch: Optional[torch.Tensor] = None
    zero_streak = 0

    for i in range(cfg.iterations):
        lookahead = (
            (state.patch + cfg.step_size * cfg.momentum_decay * state.momentum)
            .clamp(0.0, 1.0)
            .detach()
            .requires_grad_(True)
        )
        n = len(entries)
        indices = rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
        total, active = _batch_objective(detector, entries, cache, lookahead, cfg, indices)
        if total is None:
            loss_value = 0.0
            grad = torch.zeros_like(state.patch)
        else:
            mean_gain = total / len(indices)
            loss_value = float(mean_gain.detach())
            grad = torch.autograd.grad(mean_gain, lookahead)[0]
        if cfg.descend_objective:
            grad = -grad
        nifgsm_step(state, grad, cfg)

        row = HistoryRow(iteration=state.iteration, loss=loss_value, active_count=active)
        zero_streak = zero_streak + 1 if active == 0 else 0
        if zero_streak == STALL_WARN_STREAK:
            logger.warning(
                "borderline gate empty for %d consecutive iterations; the objective is stalled at 0",
                zero_streak,
            )
        is_checkpoint = (state.iteration % cfg.checkpoint_every == 0) or (
            state.iteration == cfg.iterations
        )
        if is_checkpoint:
            current = Patch(pixels=state.patch.numpy().copy())
            report = evaluate(val_entries, current, detector, cfg)
            row.tp, row.fp = report.tp_count, report.fp_count
            if best_tp is None or report.tp_count < best_tp:
                best_tp = report.tp_count
                best_patch = state.patch.clone()
            if ckpt_dir is not None:
                save_patch(
                    ckpt_dir / f"patch_iter{state.iteration:05d}.png", current, cfg.alpha, digest
                )
        state.history.append(row)

    final = Patch(pixels=state.patch.numpy().copy())
    if out_dir is not None:
        save_patch(out_dir / "patch_final.png", final, cfg.alpha, digest)
        if best_patch is not None:
            save_patch(out_dir / "patch_best.png", Patch(pixels=best_patch.numpy().copy()), cfg.alpha, digest)
        write_history_csv(out_dir / "history.csv", state.history)
    return final, state.history


def write_history_csv(path: Path, history: Sequence[HistoryRow]) -> None:
    """History log: iteration, loss, active_count, plus validation tp/fp
    columns that are filled only on checkpoint iterations."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "active_count", "tp", "fp"])
        for row in history:
            writer.writerow(
                [
                    row.iteration,
                    repr(row.loss),
                    row.active_count,
                    "" if row.tp is None else row.tp,
                    "" if row.fp is None else row.fp,
                ]
            )


def read_history_csv(path: Path) -> List[HistoryRow]:
    out: List[HistoryRow] = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(
                HistoryRow(
                    iteration=int(rec["iteration"]),
                    loss=float(rec["loss"]),
                    active_count=int(rec["active_count"]),
                    tp=int(rec["tp"]) if rec["tp"] else None,
                    fp=int(rec["fp"]) if rec["fp"] else None,
                )
            )
    return out


def stall_report(history: Sequence[HistoryRow]) -> StallReport:
    """Quantify the zero-loss stall: fraction of inactive steps, the longest
    inactive streak, and the first iteration with a nonzero loss."""
    if not history:
        raise ValueError("stall_report requires a non-empty history")
    zero = [row.active_count == 0 for row in history]
    longest = streak = 0
    for z in zero:
        streak = streak + 1 if z else 0
        longest = max(longest, streak)
    first_nonzero = next((row.iteration for row in history if row.loss != 0.0), None)
    return StallReport(
        steps=len(history),
        zero_fraction=sum(zero) / len(history),
        longest_zero_streak=longest,
        first_nonzero_iteration=first_nonzero,
    )
