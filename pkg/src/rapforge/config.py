"""Run configuration: attack hyperparameters and TOML loading."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .losses import LOSS_VARIANTS, LossConfig


@dataclass
class AttackConfig:
    """All thresholds and hyperparameters of a patch-training run.

    ``descend_objective`` flips the optimizer direction: by default the
    trainer ascends the borderline false-positive sum (raising gated
    confidences); setting the flag descends it instead.
    """

    theta_d: float = 0.5
    theta_t: float = 0.6
    theta_f: float = 0.3
    alpha: float = 5.58
    step_size: float = 0.03
    momentum_decay: float = 1.0
    iterations: int = 200
    batch_size: int = 8
    seed: int = 0
    loss_variant: str = "bfp"
    descend_objective: bool = False
    patch_width: int = 64
    patch_height: int = 64
    patch_init: str = "random"  # "random" | "gray"
    checkpoint_every: int = 50
    detection_tap: str = "post_nms"  # "post_nms" | "pre_nms"
    placement: str = "tile"  # "tile" | "fixed"
    tile_phase: Tuple[int, int] = (0, 0)
    fixed_origin: Tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if not self.theta_t > self.theta_d > self.theta_f:
            raise ValueError(
                "thresholds must satisfy theta_t > theta_d > theta_f, got "
                f"{self.theta_t} / {self.theta_d} / {self.theta_f}"
            )
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant '{self.loss_variant}'")
        if self.patch_init not in ("random", "gray"):
            raise ValueError(f"unknown patch_init '{self.patch_init}'")
        if self.detection_tap not in ("post_nms", "pre_nms"):
            raise ValueError(f"unknown detection_tap '{self.detection_tap}'")
        if self.placement not in ("tile", "fixed"):
            raise ValueError(f"unknown placement '{self.placement}'")
        if self.patch_width < 1 or self.patch_height < 1:
            raise ValueError("patch dimensions must be >= 1")
        self.tile_phase = tuple(self.tile_phase)
        self.fixed_origin = tuple(self.fixed_origin)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            theta_t=self.theta_t,
            theta_f=self.theta_f,
            theta_d=self.theta_d,
            variant=self.loss_variant,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tile_phase"] = list(self.tile_phase)
        d["fixed_origin"] = list(self.fixed_origin)
        return d


@dataclass
class TrainRunSpec:
    """Parsed train-run TOML: dataset paths, detector, attack settings."""

    attack: AttackConfig
    dataset: Path
    detector: str = "toy"
    val_dataset: Optional[Path] = None


def load_train_config(path) -> TrainRunSpec:
    """Read a training TOML: top-level dataset/detector keys plus an
    [attack] table mirroring AttackConfig fields."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    attack_raw = raw.get("attack", {})
    known = {f.name for f in dataclasses.fields(AttackConfig)}
    unknown = set(attack_raw) - known
    if unknown:
        raise ValueError(f"unknown [attack] keys in {path}: {sorted(unknown)}")
    attack = AttackConfig(**attack_raw)
    if "dataset" not in raw:
        raise ValueError(f"{path} must set a top-level 'dataset' manifest path")
    base = path.parent
    dataset = base / raw["dataset"]
    val = raw.get("val_dataset")
    return TrainRunSpec(
        attack=attack,
        dataset=dataset,
        detector=raw.get("detector", "toy"),
        val_dataset=base / val if val else None,
    )


@dataclass
class TransferRun:
    patch: Path
    train_dataset: str


@dataclass
class TransferSpec:
    """Parsed transfer TOML: trained patches, eval datasets, detectors."""

    runs: list
    datasets: dict
    detectors: list
    attack: AttackConfig


def load_transfer_spec(path) -> TransferSpec:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    base = path.parent
    runs = [
        TransferRun(patch=base / r["patch"], train_dataset=r["train_dataset"])
        for r in raw.get("runs", [])
    ]
    datasets = {name: base / p for name, p in raw.get("datasets", {}).items()}
    detectors = list(raw.get("detectors", ["toy"]))
    attack = AttackConfig(**raw.get("attack", {}))
    if not runs:
        raise ValueError(f"{path} defines no [[runs]]")
    if not datasets:
        raise ValueError(f"{path} defines no [datasets]")
    return TransferSpec(runs=runs, datasets=datasets, detectors=detectors, attack=attack)
