"""Experiment configuration: one JSON file, every field explicit.

Loading is strict. A missing field raises :class:`ConfigInvalid` naming the
field (``section.field``); unknown fields are rejected too so typos cannot
silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attack import PER_TARGET, PER_VIEW_MASK, AttackConfig
from .detector.models import ATTN, CONV
from .detector.training import DetectorConfig
from .errors import ConfigInvalid
from .evaluation.experiments import EvalConfig
from .scene import SceneConfig

CONFIG_SCHEMA = 1

ALG1 = "alg1"
ALG2 = "alg2"
BASELINE_RANDOM = "baseline-random"
BASELINE_SINGLEVIEW = "baseline-singleview"
MODES = (ALG1, ALG2, BASELINE_RANDOM, BASELINE_SINGLEVIEW)


@dataclass(frozen=True)
class ProtocolConfig:
    attack_frames: int = 40  # training-split frames a patch is optimized on
    single_view: int = 0  # the view the single-view baseline is optimized in
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.attack_frames < 1:
            raise ConfigInvalid("protocol.attack_frames must be >= 1")
        if not self.seeds:
            raise ConfigInvalid("protocol.seeds must not be empty")


def _default_alg2() -> AttackConfig:
    return AttackConfig(mode=PER_VIEW_MASK, psize=(24, 24))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    scene: SceneConfig = field(default_factory=SceneConfig)
    conv: DetectorConfig = field(default_factory=lambda: DetectorConfig(variant=CONV))
    attn: DetectorConfig = field(default_factory=lambda: DetectorConfig(variant=ATTN))
    alg1: AttackConfig = field(default_factory=AttackConfig)
    alg2: AttackConfig = field(default_factory=_default_alg2)
    eval: EvalConfig = field(default_factory=EvalConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def __post_init__(self):
        if self.conv.variant != CONV or self.attn.variant != ATTN:
            raise ConfigInvalid("conv.variant must be 'conv' and attn.variant must be 'attn'")
        if self.alg1.mode != PER_TARGET or self.alg2.mode != PER_VIEW_MASK:
            raise ConfigInvalid(f"alg1.mode must be {PER_TARGET!r} and alg2.mode {PER_VIEW_MASK!r}")
        if not 0 <= self.protocol.single_view < self.scene.n_views:
            raise ConfigInvalid("protocol.single_view is not a valid view index")

    def detector(self, variant: str) -> DetectorConfig:
        if variant not in (CONV, ATTN):
            raise ConfigInvalid(f"unknown detector variant {variant!r}")
        return self.conv if variant == CONV else self.attn

    def attack(self, mode: str) -> AttackConfig:
        """Attack settings used by a CLI mode (baselines share the alg1 section)."""
        if mode not in MODES:
            raise ConfigInvalid(f"unknown attack mode {mode!r}")
        return self.alg2 if mode == ALG2 else self.alg1

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "scene": self.scene.to_dict(),
            "conv": self.conv.to_dict(),
            "attn": self.attn.to_dict(),
            "alg1": self.alg1.to_dict(),
            "alg2": self.alg2.to_dict(),
            "eval": self.eval.to_dict(),
            "protocol": {**dataclasses.asdict(self.protocol), "seeds": list(self.protocol.seeds)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigInvalid("config must be a JSON object")
        _check_keys(d, {"schema_version", "seed", "output_dir", *_SECTIONS}, "")
        if d["schema_version"] != CONFIG_SCHEMA:
            raise ConfigInvalid(f"schema_version must be {CONFIG_SCHEMA}, got {d['schema_version']!r}")
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
            raise ConfigInvalid("seed must be an integer")
        sections = {name: _section(kind, d[name], name) for name, kind in _SECTIONS.items()}
        try:
            return cls(seed=d["seed"], output_dir=str(d["output_dir"]), **sections)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc


_SECTIONS = {
    "scene": SceneConfig,
    "conv": DetectorConfig,
    "attn": DetectorConfig,
    "alg1": AttackConfig,
    "alg2": AttackConfig,
    "eval": EvalConfig,
    "protocol": ProtocolConfig,
}


def _check_keys(d: dict, expected: set[str], prefix: str) -> None:
    missing = sorted(expected - set(d))
    if missing:
        raise ConfigInvalid(f"config missing field(s): {', '.join(prefix + m for m in missing)}")
    extra = sorted(set(d) - expected)
    if extra:
        raise ConfigInvalid(f"unknown config field(s): {', '.join(prefix + e for e in extra)}")


def _section(kind, d, name: str):
    if not isinstance(d, dict):
        raise ConfigInvalid(f"config section {name!r} must be an object")
    _check_keys(d, {f.name for f in dataclasses.fields(kind)}, name + ".")
    try:
        return kind(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{name}: {exc}") from exc


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigInvalid(f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{p} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
