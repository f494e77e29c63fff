"""Run configuration: a TOML file, flag overrides, and the OVPS_SEED
environment variable, resolved into one serializable snapshot.

Every CLI flag mirrors a config key one-to-one (section-key), so any
ablation axis is a one-flag change. The resolved snapshot is written next
to a run's outputs.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigurationError
from .plm import PLMConfig
from .selftrain import TrainConfig
from .zeroshot import FusionConfig

SEED_ENV_VAR = "OVPS_SEED"


@dataclass
class PathsSection:
    dataset: str = ""
    embeddings: str = ""
    text_bank: str = ""
    head: str = ""
    detections: str = ""
    output_dir: str = "run"


@dataclass
class SynthSection:
    n_base: int = 10
    n_novel: int = 5
    n_distractors: int = 0
    dim: int = 64
    n_images: int = 500
    noise_sigma: float = 0.15
    seed: int = 0


@dataclass
class PlmSection:
    enabled: bool = True
    threshold: float = 0.8
    k: int = 4
    neg_cap: int = 1000
    neg_iou_max: float = 0.5
    rpn_nms_iou: float = 0.7
    score_mode: str = "softmax"


@dataclass
class FusionSection:
    alpha: float = 0.35
    beta: float = 0.65
    temperature: float = 100.0
    nms_iou: float = 0.5


@dataclass
class TrainSection:
    learning_rate: float = 0.01
    iterations: int = 1000
    batch_size: int = 8
    background_weight: float = 0.9
    momentum: float = 0.0
    seed: int = 0
    snapshot_interval: int = 200


@dataclass
class RefineSection:
    score_threshold: float = 0.9
    dedup_iou: float = 0.5
    max_pseudo_per_image: int = 20


@dataclass
class VocabSection:
    source: str = "dataset"  # dataset | file | base-only
    names_file: str = ""


@dataclass
class OracleSection:
    k: list[int] = field(default_factory=lambda: [1, 5])


@dataclass
class RunConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    synth: SynthSection = field(default_factory=SynthSection)
    plm: PlmSection = field(default_factory=PlmSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    refine: RefineSection = field(default_factory=RefineSection)
    vocab: VocabSection = field(default_factory=VocabSection)
    oracle: OracleSection = field(default_factory=OracleSection)

    def plm_config(self) -> PLMConfig:
        return PLMConfig(
            threshold=self.plm.threshold,
            k=self.plm.k,
            neg_cap=self.plm.neg_cap,
            neg_iou_max=self.plm.neg_iou_max,
            rpn_nms_iou=self.plm.rpn_nms_iou,
            score_mode=self.plm.score_mode,
            temperature=self.fusion.temperature,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.train.learning_rate,
            iterations=self.train.iterations,
            batch_size=self.train.batch_size,
            background_weight=self.train.background_weight,
            plm_enabled=self.plm.enabled,
            plm=self.plm_config(),
            seed=self.train.seed,
            momentum=self.train.momentum,
            snapshot_interval=self.train.snapshot_interval,
        )

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(alpha=self.fusion.alpha, beta=self.fusion.beta)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "paths": PathsSection,
    "synth": SynthSection,
    "plm": PlmSection,
    "fusion": FusionSection,
    "train": TrainSection,
    "refine": RefineSection,
    "vocab": VocabSection,
    "oracle": OracleSection,
}


def _coerce(section: str, key: str, value: Any, target_type: type) -> Any:
    if target_type is bool and isinstance(value, str):
        lowered = value.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"{section}.{key}: expected a boolean, got {value!r}")
    try:
        if target_type is list:
            if isinstance(value, str):
                return [int(v) for v in value.split(",") if v.strip()]
            return [int(v) for v in value]
        return target_type(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{section}.{key}: {exc}") from None


def _apply(cfg: RunConfig, section: str, key: str, value: Any) -> None:
    if section not in _SECTIONS:
        raise ConfigurationError(f"unknown config section {section!r}")
    target = getattr(cfg, section)
    fields = {f.name: f for f in dataclasses.fields(target)}
    if key not in fields:
        raise ConfigurationError(f"unknown config key {section}.{key}")
    current = getattr(target, key)
    setattr(target, key, _coerce(section, key, value, type(current)))


def load_run_config(
    path: str | Path | None = None,
    overrides: Mapping[tuple[str, str], Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Resolve defaults <- TOML file <- flag overrides <- OVPS_SEED."""
    cfg = RunConfig()
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        for section, body in doc.items():
            if not isinstance(body, dict):
                raise ConfigurationError(f"top-level key {section!r} is not a section")
            for key, value in body.items():
                _apply(cfg, section, key, value)
    for (section, key), value in (overrides or {}).items():
        _apply(cfg, section, key, value)
    env = os.environ if env is None else env
    if SEED_ENV_VAR in env:
        try:
            seed = int(env[SEED_ENV_VAR])
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer") from None
        cfg.synth.seed = seed
        cfg.train.seed = seed
    return cfg
