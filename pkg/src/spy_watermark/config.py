"""Experiment configuration: profiles, validation with aggregated errors, stable hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .anticollapse import AntiCollapseOp, AntiCollapseSet
from .data import DATASETS, PoisonMode, PoisonSpec
from .defense import DefenseConfig
from .errors import ConfigError
from .extractor import ExtractorConfig
from .injector import InjectorConfig
from .joint import JointLossConfig, TrainSchedule
from .victim import VictimConfig

logger = logging.getLogger(__name__)

PROFILES = ("desk", "paper", "tiny")


@dataclass
class DatasetSpec:
    name: str = "cifar10"
    root: Optional[str] = "data/cifar10"
    injector_subset: Optional[int] = 5000
    train_subset: Optional[int] = 10000
    test_subset: Optional[int] = None
    classes: int = 10
    image_size: Optional[int] = None
    synthetic_train: int = 2000
    synthetic_test: int = 500
    synthetic_classes: int = 4
    synthetic_kind: str = "gratings"

    @classmethod
    def profile(cls, name: str) -> "DatasetSpec":
        if name == "paper":
            return cls(injector_subset=None, train_subset=None)
        if name == "tiny":
            return cls(name="synthetic", root=None, injector_subset=512, train_subset=2000)
        return cls()

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.name not in DATASETS:
            out.append(("name", f"unknown dataset {self.name!r}"))
        for key in ("injector_subset", "train_subset", "test_subset"):
            v = getattr(self, key)
            if v is not None and v < 1:
                out.append((key, "must be >= 1 or null"))
        if self.synthetic_kind not in ("gratings", "prototypes"):
            out.append(("synthetic_kind", f"unknown synthetic kind {self.synthetic_kind!r}"))
        return out

    @property
    def resolution(self) -> int:
        if self.image_size:
            return self.image_size
        return 224 if self.name == "imagenet-subset" else 32

    @property
    def num_classes(self) -> int:
        return {"cifar10": 10, "gtsrb": 43, "imagenet-subset": self.classes,
                "synthetic": self.synthetic_classes}.get(self.name, self.classes)


@dataclass
class EvalSettings:
    stealth_samples: Optional[int] = 500
    lpips_backend: str = "auto"
    clean_baseline: bool = True

    def problems(self) -> list[tuple[str, str]]:
        if self.lpips_backend not in ("auto", "pretrained", "random"):
            return [("lpips_backend", f"unknown backend {self.lpips_backend!r}")]
        return []


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    seed: int = 0
    output_dir: str = "runs/desk"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    poison: PoisonSpec = field(default_factory=PoisonSpec)
    injector: InjectorConfig = field(default_factory=InjectorConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    anticollapse: AntiCollapseSet = field(default_factory=AntiCollapseSet)
    loss: JointLossConfig = field(default_factory=JointLossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    victim: VictimConfig = field(default_factory=VictimConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    @property
    def poison_seed(self) -> int:
        return self.seed + 4

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def section_hash(self, sections) -> str:
        d = self.to_dict()
        subset = {k: d[k] for k in sorted(sections)}
        subset["seed"] = self.seed
        return stable_hash(subset)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return stable_hash(d)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, PoisonMode) or hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def stable_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def profile_defaults(profile: str, seed: int = 0) -> dict:
    """Default config dict for a named profile with sub-seeds derived from ``seed``."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}", [("profile", f"expected one of {PROFILES}")])
    ds = DatasetSpec.profile(profile)
    cfg = ExperimentConfig(
        profile=profile,
        seed=seed,
        output_dir=f"runs/{profile}",
        dataset=ds,
        injector=InjectorConfig.profile(profile, image_size=ds.resolution),
        extractor=ExtractorConfig.profile(profile),
        anticollapse=AntiCollapseSet(seed=seed + 1),
        schedule=TrainSchedule.profile(profile, seed=seed),
        victim=VictimConfig.profile(profile, seed=seed + 2),
        defense=DefenseConfig(seed=seed + 3),
    )
    return cfg.to_dict()


_SECTIONS = {
    "dataset": DatasetSpec,
    "poison": PoisonSpec,
    "injector": InjectorConfig,
    "extractor": ExtractorConfig,
    "loss": JointLossConfig,
    "schedule": TrainSchedule,
    "victim": VictimConfig,
    "defense": DefenseConfig,
    "evaluation": EvalSettings,
}
_TOP = {"profile", "seed", "output_dir", "anticollapse", *_SECTIONS}


def _merge(defaults: dict, raw: dict, path: str, problems: list, applied: list) -> dict:
    out = dict(defaults)
    for key, value in raw.items():
        if key not in defaults:
            problems.append((f"{path}{key}", "unknown key"))
            continue
        out[key] = value
    for key in defaults:
        if key not in raw:
            applied.append(f"{path}{key}")
    return out


def _build(cls, values: dict, path: str, problems: list):
    try:
        obj = cls(**values)
    except (TypeError, ValueError) as exc:
        problems.append((path.rstrip("."), str(exc)))
        return None
    for p, reason in obj.problems():
        problems.append((f"{path}{p}", reason))
    return obj


def validate_config(raw: dict | str | Path | None = None, profile: str | None = None,
                    seed: int | None = None) -> ExperimentConfig:
    """Build a validated :class:`ExperimentConfig` from a raw mapping or YAML file.

    Missing values come from the selected profile (``desk`` by default).
    All violations are collected and raised together as one :class:`ConfigError`.
    """
    if isinstance(raw, (str, Path)):
        text = Path(raw).read_text()
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {raw}: {exc}") from exc
    raw = dict(raw or {})
    profile = profile or raw.get("profile", "desk")
    if seed is None:
        seed = raw.get("seed", 0)
    raw["profile"], raw["seed"] = profile, seed

    problems: list[tuple[str, str]] = []
    applied: list[str] = []
    if not isinstance(seed, int):
        problems.append(("seed", "must be an integer"))
        seed = 0
    defaults = profile_defaults(profile, seed)
    for key in raw:
        if key not in _TOP:
            problems.append((key, "unknown key"))

    sections = {}
    for name, cls in _SECTIONS.items():
        section_raw = raw.get(name) or {}
        if not isinstance(section_raw, dict):
            problems.append((name, "must be a mapping"))
            section_raw = {}
        values = _merge(defaults[name], section_raw, f"{name}.", problems, applied)
        sections[name] = _build(cls, values, f"{name}.", problems)

    ac_raw = raw.get("anticollapse") or {}
    ac_values = _merge(defaults["anticollapse"], ac_raw, "anticollapse.", problems, applied)
    try:
        ops = [op if isinstance(op, AntiCollapseOp) else AntiCollapseOp(**op) for op in ac_values["ops"]]
        acset = AntiCollapseSet(ops=ops, seed=ac_values["seed"])
        problems.extend((f"anticollapse.{p}", r) for p, r in acset.problems())
    except (TypeError, ValueError) as exc:
        problems.append(("anticollapse.ops", str(exc)))
        acset = None

    if sections["poison"] is not None and sections["dataset"] is not None:
        k = sections["dataset"].num_classes
        if sections["poison"].target_label >= k:
            problems.append(("poison.target_label", f"target label invalid for {k} classes"))
    inj, ds = sections["injector"], sections["dataset"]
    if inj is not None and ds is not None and inj.image_size != ds.resolution:
        problems.append(("injector.image_size", f"{inj.image_size} != dataset resolution {ds.resolution}"))

    if problems:
        raise ConfigError(f"{len(problems)} configuration problem(s)", problems)
    if applied:
        logger.info("applied %s-profile defaults for: %s", profile, ", ".join(applied))
    return ExperimentConfig(profile=profile, seed=seed, output_dir=str(raw.get("output_dir", defaults["output_dir"])),
                            anticollapse=acset, **sections)
