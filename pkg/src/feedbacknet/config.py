"""``key = value`` run configuration.

Lines may carry ``#`` comments. Keys are namespaced; an unknown key is an
error, as is a missing ``seed``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from .curriculum import DIRECTIONS, CurriculumSchedule
from .data import SyntheticSpec
from .errors import ConfigError
from .network import SKIP_PLACEMENTS, FeedbackNetSpec

ORDERS = ("shuffle", "coarse_sorted")
SOURCES = ("synthetic", "fbds", "cifar")


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    # net
    architecture: Optional[str] = None
    iterations: int = 4
    stack: int = 2
    skip: bool = True
    skip_n: int = 2
    skip_placement: str = "output"
    gamma: float = 1.0
    residual: bool = True
    # train
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    checkpoint_every: int = 0
    eval_every: int = 1
    order: str = "shuffle"
    flip: bool = False
    crop: bool = False
    # curriculum / ablation
    curriculum: bool = False
    curriculum_k: Optional[int] = None
    curriculum_direction: str = "coarse_to_fine"
    last_loss_only: bool = False
    # data
    data_source: str = "synthetic"
    data_path: Optional[str] = None
    data_test_path: Optional[str] = None
    image_size: int = 16
    train_per_class: int = 50
    test_per_class: int = 50
    noise: float = 0.25
    jitter: int = 1
    wobble: float = 0.5
    data_seed: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        for name in ("iterations", "stack", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch normalization")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.decay_factor <= 0:
            raise ConfigError("learning-rate settings must be non-negative")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigError("checkpoint_every and eval_every must be >= 0")
        if self.order not in ORDERS:
            raise ConfigError(f"train.order must be one of {ORDERS}")
        if self.data_source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}")
        if self.data_source != "synthetic" and not self.data_path:
            raise ConfigError(f"data.source = {self.data_source} needs data.path")
        if self.curriculum_direction not in DIRECTIONS:
            raise ConfigError(f"curriculum.direction must be one of {DIRECTIONS}")
        if self.skip_placement not in SKIP_PLACEMENTS:
            raise ConfigError(f"net.skip_placement must be one of {SKIP_PLACEMENTS}")

    @property
    def lr_milestones(self):
        if self.decay_epochs:
            return tuple(sorted(self.decay_epochs))
        return (self.epochs // 2, (3 * self.epochs) // 4)

    def learning_rate(self, epoch: int) -> float:
        """Step schedule: multiply by decay_factor at each milestone epoch (0-based)."""
        drops = sum(1 for m in self.lr_milestones if 0 < m <= epoch)
        return self.lr * self.decay_factor**drops

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(image_size=self.image_size, train_per_class=self.train_per_class,
                             test_per_class=self.test_per_class, noise=self.noise, jitter=self.jitter, wobble=self.wobble,
                             seed=self.seed if self.data_seed is None else self.data_seed)

    def net_spec(self, num_classes: int, image_size: int) -> FeedbackNetSpec:
        options = dict(skip=self.skip, skip_n=self.skip_n, skip_placement=self.skip_placement,
                       gamma=self.gamma, last_loss_only=self.last_loss_only, residual=self.residual)
        if self.architecture:
            return FeedbackNetSpec.from_grammar(self.architecture, **options)
        return FeedbackNetSpec.default(num_classes=num_classes, stack=self.stack, iterations=self.iterations,
                                       image_size=image_size, **options)

    def schedule(self, iterations: int) -> Optional[CurriculumSchedule]:
        if not self.curriculum:
            return None
        return CurriculumSchedule(self.curriculum_k or iterations, iterations, self.curriculum_direction)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for key, attr in KEYS.items():
            value = getattr(self, attr)
            if value is None or value == ():
                continue
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


KEYS = {
    "seed": "seed",
    "net.architecture": "architecture",
    "net.iterations": "iterations",
    "net.stack": "stack",
    "net.skip": "skip",
    "net.skip_n": "skip_n",
    "net.skip_placement": "skip_placement",
    "net.gamma": "gamma",
    "net.residual": "residual",
    "train.epochs": "epochs",
    "train.batch_size": "batch_size",
    "train.lr": "lr",
    "train.momentum": "momentum",
    "train.weight_decay": "weight_decay",
    "train.decay_epochs": "decay_epochs",
    "train.decay_factor": "decay_factor",
    "train.checkpoint_every": "checkpoint_every",
    "train.eval_every": "eval_every",
    "train.order": "order",
    "train.flip": "flip",
    "train.crop": "crop",
    "curriculum.enabled": "curriculum",
    "curriculum.k": "curriculum_k",
    "curriculum.direction": "curriculum_direction",
    "ablation.last_loss_only": "last_loss_only",
    "data.source": "data_source",
    "data.path": "data_path",
    "data.test_path": "data_test_path",
    "data.image_size": "image_size",
    "data.train_per_class": "train_per_class",
    "data.test_per_class": "test_per_class",
    "data.noise": "noise",
    "data.jitter": "jitter",
    "data.wobble": "wobble",
    "data.seed": "data_seed",
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _convert(key, attr, raw, lineno):
    kind = _FIELD_TYPES[attr]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in ("int", "Optional[int]"):
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key} ({kind})") from None


def parse_config(text: str, **overrides) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[KEYS[key]] = _convert(key, KEYS[key], value, lineno)
    values.update(overrides)
    if "seed" not in values:
        raise ConfigError("config must set 'seed'")
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), **overrides)
