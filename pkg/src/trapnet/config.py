"""Run configuration: TOML loading and seed derivation."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attacks import AttackConfig
from .data import GenConfig
from .defense import TrainConfig
from .errors import ConfigError


def derive_seed(master: int, stage: str) -> int:
    """Stage seed = first 8 bytes of sha256("<master>:<stage>") as an unsigned int."""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class DataSettings:
    num_classes: int = 10
    image_side: int = 16
    samples_per_class: int = 160
    noise_sigma: float = 0.1
    contrast: float = 0.06
    train_frac: float = 0.5
    # fraction of the held-out part used to calibrate tau; the rest is the test set
    calibration_frac: float = 0.5
    idx_images: str = ""
    idx_labels: str = ""


@dataclass(frozen=True)
class TrapdoorSettings:
    patch_side: int = 16
    amplitude: float = 0.06
    # True: the trapdoor targets an extra output label no clean input carries
    dedicated_label: bool = True
    target_class: int = -1  # only used when dedicated_label is false


@dataclass(frozen=True)
class ModelSettings:
    hidden_dims: tuple[int, ...] = (128, 64)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.02
    poison_fraction: float = 0.3
    weight_decay: float = 0.0


@dataclass(frozen=True)
class DetectorSettings:
    fpr_target: float = 0.10
    report_fprs: tuple[float, ...] = (0.05, 0.10)


@dataclass(frozen=True)
class AttackSettings:
    epsilon: float = 8 / 255
    eta: float = 0.1
    lambda_weight: float = 8.0
    iterations: int = 100
    step_rule: str = "sign"
    ortho_mode: str = "rejection"
    select: str = "best"
    max_inputs: int = 0  # 0 = whole test split


@dataclass(frozen=True)
class EvalSettings:
    include_failed: bool = False


@dataclass(frozen=True)
class PathSettings:
    out: str = "runs/default"
    # explicit signature path; forbidden for signature-free attacks
    signature: str = ""


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 0
    data: DataSettings = field(default_factory=DataSettings)
    trapdoor: TrapdoorSettings = field(default_factory=TrapdoorSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    attack: AttackSettings = field(default_factory=AttackSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    source: str = ""

    def seed(self, stage: str) -> int:
        return derive_seed(self.master_seed, stage)

    @property
    def model_classes(self) -> int:
        return self.data.num_classes + (1 if self.trapdoor.dedicated_label else 0)

    @property
    def target_class(self) -> int:
        if self.trapdoor.dedicated_label:
            return self.data.num_classes
        return self.trapdoor.target_class

    def gen_config(self) -> GenConfig:
        d = self.data
        return GenConfig(
            num_classes=d.num_classes,
            image_side=d.image_side,
            samples_per_class=d.samples_per_class,
            noise_sigma=d.noise_sigma,
            seed=self.seed("data"),
            contrast=d.contrast,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            poison_fraction=t.poison_fraction,
            seed=self.seed("train"),
            weight_decay=t.weight_decay,
        )

    def attack_config(self, **overrides) -> AttackConfig:
        a = self.attack
        kw = dict(
            epsilon=a.epsilon,
            eta=a.eta,
            lambda_weight=a.lambda_weight,
            iterations=a.iterations,
            step_rule=a.step_rule,
            ortho_mode=a.ortho_mode,
            select=a.select,
            seed=self.seed("attack"),
        )
        kw.update(overrides)
        return AttackConfig(**kw)

    def out_dir(self) -> Path:
        out = Path(self.paths.out)
        if not out.is_absolute() and self.source:
            out = Path(self.source).parent / out
        return out

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc.pop("source")
        return doc


_SECTIONS = {
    "data": DataSettings,
    "trapdoor": TrapdoorSettings,
    "model": ModelSettings,
    "train": TrainSettings,
    "detector": DetectorSettings,
    "attack": AttackSettings,
    "eval": EvalSettings,
    "paths": PathSettings,
}


def _build(cls, table: dict, section: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(table) - set(names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    kw = {}
    for key, value in table.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif type(default) is not type(value):
            raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {value!r}")
        kw[key] = value
    return cls(**kw)


def config_from_dict(doc: dict, source: str = "") -> RunConfig:
    doc = dict(doc)
    seed_table = doc.pop("seed", {})
    if not isinstance(seed_table, dict) or set(seed_table) - {"master"}:
        raise ConfigError("[seed] must be a table holding only 'master'")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    sections = {name: _build(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    master = seed_table.get("master", 0)
    if not isinstance(master, int):
        raise ConfigError("[seed] master must be an integer")
    return RunConfig(master_seed=master, source=source, **sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc, source=str(path))
