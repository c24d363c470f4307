"""Experiment configuration settings and the flat run-config file reader."""

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple, Union

from fleetaug.detection.pseudolabel import SslThresholds
from fleetaug.features.backbone import BackboneSpec
from fleetaug.features.voxelgrid import GridSpec
from fleetaug.scenes import SceneSpec

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Rejected configuration; ``line`` is set when it comes from a file."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class Policy(Enum):
    """How unlabeled payloads are augmented during the semi-supervised phase."""

    NONE = "None"
    FGT = "FGT"
    FFLIP = "FFlip"
    FNOISE = "FNoise"
    FRS = "FRS"
    FROTATE = "FRotate"
    F3DIOUMATCH = "F3DIoUMatch"
    RAW_UPCYCLE = "RawUpcycle"

    @classmethod
    def parse(cls, name: str) -> "Policy":
        key = name.strip().lower()
        for policy in cls:
            if policy.value.lower() == key:
                return policy
        raise ConfigError(f"unknown policy {name!r}; expected one of {[p.value for p in cls]}")

    @property
    def trains_backbone(self) -> bool:
        return self is Policy.RAW_UPCYCLE


class PayloadMode(Enum):
    GRID = "grid"
    GRID_SET = "grid+set"


BATCH_RATIOS = ((1, 1), (1, 2))


@dataclass(frozen=True)
class DecodeConfig:
    """Detection decoding on the vehicle and at evaluation time."""

    score_thresh: float = 0.3
    nms_iou: float = 0.1
    pre_max_size: int = 512  # candidates kept before NMS
    post_max_size: int = 100  # detections kept after NMS

    def __post_init__(self):
        if not (0.0 <= self.score_thresh <= 1.0 and 0.0 <= self.nms_iou <= 1.0):
            raise ConfigError("decode thresholds must be in [0, 1]")
        if self.pre_max_size < 1 or self.post_max_size < 1:
            raise ConfigError("decode size caps must be positive")


@dataclass
class ExperimentConfig:
    """One pretrain + semi-supervised run over synthetic scenes."""

    # Data
    n_labeled: int = 8
    n_unlabeled: int = 16
    n_test: int = 8
    label_ratio: Optional[float] = None  # labeled share of n_labeled + n_unlabeled
    scene: SceneSpec = field(default_factory=SceneSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    # Pretraining on labeled scenes with raw GT sampling
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.05
    backbone_lr: float = 0.01
    pretrain_gt_per_scene: int = 3

    # Semi-supervised phase
    policy: Policy = Policy.FGT
    freeze_backbone: bool = True
    batch_ratio: Optional[Tuple[int, int]] = None  # labeled:unlabeled
    labeled_batch: int = 2
    w: float = 1.0
    thresholds: SslThresholds = field(default_factory=SslThresholds)
    gt_per_scene: int = 5
    noise_sigma: float = 0.05
    frs_ratio: float = 0.05
    payload_kind: PayloadMode = PayloadMode.GRID
    set_points: int = 256
    set_ratio_multiplier: float = 1.0
    epochs: int = 10
    lr: float = 0.05
    seeds: Tuple[int, ...] = (0,)

    # Evaluation and decoding
    eval_iou: float = 0.7
    eval_score_thresh: float = 0.05  # decode threshold used for AP
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    # Client fan-out
    workers: int = 4

    @property
    def grid(self) -> GridSpec:
        return self.scene.extent

    def split(self) -> Tuple[int, int]:
        """(labeled count, unlabeled count) after applying ``label_ratio``."""
        if self.label_ratio is None:
            return self.n_labeled, self.n_unlabeled
        pool = self.n_labeled + self.n_unlabeled
        labeled = min(pool, max(1, int(round(self.label_ratio * pool))))
        return labeled, pool - labeled

    def effective_batch_ratio(self) -> Tuple[int, int]:
        if self.batch_ratio is not None:
            return self.batch_ratio
        return (1, 1) if self.label_ratio is not None else (1, 2)

    def validate(self) -> None:
        """
        Reject inconsistent settings.

        Raises:
            ConfigError: On the first problem found
        """
        if self.n_labeled < 1 and self.label_ratio is None:
            raise ConfigError("n_labeled must be >= 1")
        if min(self.n_unlabeled, self.n_test) < 0 or self.n_labeled < 0:
            raise ConfigError("scene counts must be >= 0")
        if self.label_ratio is not None and not 0.0 < self.label_ratio < 1.0:
            raise ConfigError(f"label_ratio must be in (0, 1), got {self.label_ratio}")
        if self.batch_ratio is not None and tuple(self.batch_ratio) not in BATCH_RATIOS:
            raise ConfigError(f"batch_ratio must be 1:1 or 1:2, got {self.batch_ratio}")
        if self.w < 0:
            raise ConfigError(f"w must be >= 0, got {self.w}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.lr < 0 or self.pretrain_lr < 0 or self.backbone_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.labeled_batch < 1:
            raise ConfigError("labeled_batch must be >= 1")
        if self.gt_per_scene < 0 or self.pretrain_gt_per_scene < 0:
            raise ConfigError("GT counts per scene must be >= 0")
        if self.noise_sigma < 0 or not 0.0 < self.frs_ratio < 1.0:
            raise ConfigError("noise_sigma must be >= 0 and frs_ratio in (0, 1)")
        if self.set_points < 1 or self.set_ratio_multiplier <= 0:
            raise ConfigError("set_points and set_ratio_multiplier must be positive")
        if not 0.0 < self.eval_iou <= 1.0:
            raise ConfigError(f"eval_iou must be in (0, 1], got {self.eval_iou}")
        if not 0.0 <= self.eval_score_thresh <= 1.0:
            raise ConfigError("eval_score_thresh must be in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.policy.trains_backbone and self.freeze_backbone:
            raise ConfigError("RawUpcycle trains the backbone; set freeze_backbone = false")
        if not self.policy.trains_backbone and not self.freeze_backbone:
            raise ConfigError(f"policy {self.policy.value} requires a frozen backbone")


# RunConfigFile


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ratio(text: str) -> Tuple[int, int]:
    left, sep, right = text.partition(":")
    if not sep:
        raise ValueError(f"expected 'a:b', got {text!r}")
    return int(left), int(right)


def _parse_seeds(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.replace(",", " ").split())


def _parse_optional_float(text: str) -> Optional[float]:
    return None if text.strip().lower() == "none" else float(text)


# key -> (section, attribute, parser)
_KEYS: Dict[str, Tuple[str, str, Callable[[str], Any]]] = {
    "policy": ("experiment", "policy", Policy.parse),
    "epochs": ("experiment", "epochs", int),
    "lr": ("experiment", "lr", float),
    "seeds": ("experiment", "seeds", _parse_seeds),
    "w": ("experiment", "w", float),
    "batch_ratio": ("experiment", "batch_ratio", _parse_ratio),
    "labeled_batch": ("experiment", "labeled_batch", int),
    "n_labeled": ("experiment", "n_labeled", int),
    "n_unlabeled": ("experiment", "n_unlabeled", int),
    "n_test": ("experiment", "n_test", int),
    "label_ratio": ("experiment", "label_ratio", _parse_optional_float),
    "gt_per_scene": ("experiment", "gt_per_scene", int),
    "pretrain_epochs": ("experiment", "pretrain_epochs", int),
    "pretrain_lr": ("experiment", "pretrain_lr", float),
    "backbone_lr": ("experiment", "backbone_lr", float),
    "pretrain_gt_per_scene": ("experiment", "pretrain_gt_per_scene", int),
    "freeze_backbone": ("experiment", "freeze_backbone", _parse_bool),
    "noise_sigma": ("experiment", "noise_sigma", float),
    "frs_ratio": ("experiment", "frs_ratio", float),
    "payload_kind": ("experiment", "payload_kind", PayloadMode),
    "set_points": ("experiment", "set_points", int),
    "set_ratio_multiplier": ("experiment", "set_ratio_multiplier", float),
    "eval_iou": ("experiment", "eval_iou", float),
    "eval_score_thresh": ("experiment", "eval_score_thresh", float),
    "workers": ("experiment", "workers", int),
    "tau_iou": ("thresholds", "tau_iou", float),
    "tau_cls": ("thresholds", "tau_cls", float),
    "score_thresh": ("decode", "score_thresh", float),
    "nms_iou": ("decode", "nms_iou", float),
    "pre_max_size": ("decode", "pre_max_size", int),
    "post_max_size": ("decode", "post_max_size", int),
    "cars_min": ("scene", "cars_min", int),
    "cars_max": ("scene", "cars_max", int),
    "points_per_car_min": ("scene", "points_per_car_min", int),
    "points_per_car_max": ("scene", "points_per_car_max", int),
    "clutter_points": ("scene", "clutter_points", int),
    "ground_z": ("scene", "ground_z", float),
    "dim_jitter": ("scene", "dim_jitter", float),
    "backbone_seed": ("backbone", "seed", int),
}
for _axis in ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "vx", "vy", "vz"):
    _KEYS[_axis] = ("grid", _axis, float)

REQUIRED_KEYS = ("policy", "epochs", "lr", "seeds")


def parse_run_config(lines: Iterable[str]) -> ExperimentConfig:
    """
    Build an ExperimentConfig from flat ``key = value`` lines.

    ``#`` starts a comment; blank lines are ignored. Keys may appear once.

    Raises:
        ConfigError: Unknown, duplicate or missing keys, unparsable values,
            or a resulting config that fails validation
    """
    sections: Dict[str, Dict[str, Any]] = {
        name: {} for name in ("experiment", "thresholds", "decode", "scene", "backbone", "grid")
    }
    seen: Dict[str, int] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", number)
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", number)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", number)
        section, attribute, parser = _KEYS[key]
        try:
            sections[section][attribute] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", number) from None
        seen[key] = number

    missing = [key for key in REQUIRED_KEYS if key not in seen]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    try:
        grid = GridSpec(**sections["grid"])
        scene = SceneSpec(extent=grid, **sections["scene"])
        backbone = BackboneSpec(**sections["backbone"])
        thresholds = SslThresholds(**sections["thresholds"])
        decode = DecodeConfig(**sections["decode"])
        config = ExperimentConfig(
            scene=scene,
            backbone=backbone,
            thresholds=thresholds,
            decode=decode,
            **sections["experiment"],
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    config.validate()
    return config


def load_run_config(path: Union[str, Path]) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_run_config(handle)


def format_run_config(config: ExperimentConfig) -> str:
    """Render a config in the flat file format; parsing it gives the config back."""
    sources = {
        "experiment": config,
        "thresholds": config.thresholds,
        "decode": config.decode,
        "scene": config.scene,
        "backbone": config.backbone,
        "grid": config.grid,
    }
    lines = []
    for key, (section, attribute, _) in _KEYS.items():
        value = getattr(sources[section], attribute)
        if isinstance(value, Enum):
            text = value.value
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif key == "seeds":
            text = ", ".join(str(s) for s in value)
        elif key == "batch_ratio":
            if value is None:
                continue
            text = f"{value[0]}:{value[1]}"
        elif value is None:
            text = "none"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def replace(config: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``config`` with ``changes`` applied and validated."""
    updated = dataclasses.replace(config, **changes)
    updated.validate()
    return updated
