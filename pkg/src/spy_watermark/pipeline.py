"""Stage orchestration with per-stage manifests and cached, idempotent re-runs.

Artifact layout under ``output_dir``::

    config.yaml
    injector/   joint.ckpt, train_log.jsonl, manifest.json
    poison/     poison_manifest.json, manifest.json
    victim/     victim.ckpt, victim_metrics.jsonl, [clean/...], manifest.json
    evaluate/   report.json, report.csv, [clean_report.*], extraction.json, manifest.json
    defend/     defense.json, [defense_clean.json], manifest.json
    report/     summary.json, summary.md, manifest.json
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Iterable

import torch

from .config import ExperimentConfig
from .data import ImageSet, PoisonMode, build_poisoned_dataset, load_dataset
from .defense import run_defense
from .errors import ConfigError, DependencyError, StalenessError
from .evaluation import EvalReport, emit_report, evaluate_attack, load_report
from .joint import extraction_stats, load_joint, train_joint
from .victim import load_victim, train_victim

logger = logging.getLogger(__name__)

STAGES = ("train-injector", "poison", "train-victim", "evaluate", "defend", "report")
STAGE_DIRS = {
    "train-injector": "injector",
    "poison": "poison",
    "train-victim": "victim",
    "evaluate": "evaluate",
    "defend": "defend",
    "report": "report",
}
# config sections each stage depends on (cumulative along the chain)
_SECTIONS = {
    "train-injector": ("dataset", "injector", "extractor", "anticollapse", "loss", "schedule"),
    "poison": ("dataset", "injector", "extractor", "anticollapse", "loss", "schedule", "poison"),
}
_SECTIONS["train-victim"] = _SECTIONS["poison"] + ("victim", "evaluation")
_SECTIONS["evaluate"] = _SECTIONS["train-victim"]
_SECTIONS["defend"] = _SECTIONS["train-victim"] + ("defense",)
_SECTIONS["report"] = _SECTIONS["defend"]


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def order_stages(stages: Iterable[str]) -> list[str]:
    stages = list(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}; expected {STAGES}")
    return [s for s in STAGES if s in set(stages)]


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, output_dir: str | Path | None = None, force: bool = False):
        self.cfg = cfg
        self.root = Path(output_dir or cfg.output_dir)
        self.force = force
        self._cache: dict = {}

    # -- bookkeeping -------------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.root / STAGE_DIRS[stage]

    def manifest_path(self, stage: str) -> Path:
        return self.stage_dir(stage) / "manifest.json"

    def read_manifest(self, stage: str) -> dict | None:
        path = self.manifest_path(stage)
        return json.loads(path.read_text()) if path.is_file() else None

    def upstream(self, stage: str) -> list[str]:
        deps = {
            "train-injector": [],
            "poison": ["train-injector"] if self.cfg.poison.mode is PoisonMode.LEARNED_INJECTOR else [],
            "train-victim": ["poison"],
            "evaluate": ["train-victim", "train-injector"],
            "defend": ["train-victim"],
            "report": ["evaluate"],
        }[stage]
        if stage == "evaluate" and self.cfg.poison.mode is not PoisonMode.LEARNED_INJECTOR:
            deps = ["train-victim"]
        return deps

    def input_hashes(self, stage: str) -> dict:
        out = {}
        for dep in self.upstream(stage):
            manifest = self.read_manifest(dep)
            if manifest is None:
                raise DependencyError(f"stage {stage!r} needs output of stage {dep!r}, which has not run")
            for name, digest in manifest["outputs"].items():
                out[f"{STAGE_DIRS[dep]}/{name}"] = digest
        if stage == "report" and self.read_manifest("defend") is not None:
            for name, digest in self.read_manifest("defend")["outputs"].items():
                out[f"defend/{name}"] = digest
        return out

    def write_manifest(self, stage: str, inputs: dict, outputs: Iterable[str]) -> dict:
        d = self.stage_dir(stage)
        manifest = {
            "stage": stage,
            "config_hash": self.cfg.section_hash(_SECTIONS[stage]),
            "seed": self.cfg.seed,
            "config": {k: self.cfg.to_dict()[k] for k in _SECTIONS[stage]},
            "inputs": inputs,
            "outputs": {name: file_hash(d / name) for name in sorted(outputs)},
        }
        self.manifest_path(stage).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return manifest

    def is_current(self, stage: str, inputs: dict) -> bool:
        manifest = self.read_manifest(stage)
        if manifest is None or self.force or stage == "report":
            return False
        if manifest["config_hash"] != self.cfg.section_hash(_SECTIONS[stage]):
            raise StalenessError(
                f"stage {stage!r} in {self.root} was produced with a different configuration; use --force")
        if manifest["inputs"] != inputs:
            return False
        d = self.stage_dir(stage)
        return all((d / name).is_file() and file_hash(d / name) == digest
                   for name, digest in manifest["outputs"].items())

    # -- data --------------------------------------------------------------

    def _load(self, split: str) -> ImageSet:
        key = ("data", split)
        if key not in self._cache:
            ds = self.cfg.dataset
            kwargs = dict(classes=ds.classes, image_size=ds.image_size, seed=self.cfg.seed)
            if ds.name == "synthetic":
                n = ds.synthetic_train if split == "train" else ds.synthetic_test
                data = load_dataset("synthetic", split, n=n, seed=self.cfg.seed, num_classes=ds.synthetic_classes,
                                    synthetic_kind=ds.synthetic_kind)
            else:
                data = load_dataset(ds.name, split, ds.root, **kwargs)
            self._cache[key] = data
        return self._cache[key]

    def injector_data(self) -> ImageSet:
        return self._load("train").take(self.cfg.dataset.injector_subset, seed=self.cfg.seed + 10)

    def victim_data(self) -> ImageSet:
        return self._load("train").take(self.cfg.dataset.train_subset, seed=self.cfg.seed + 20)

    def test_data(self) -> ImageSet:
        return self._load("test").take(self.cfg.dataset.test_subset, seed=self.cfg.seed + 30)

    def _injector(self):
        if "injector" not in self._cache:
            path = self.stage_dir("train-injector") / "joint.ckpt"
            injector, extractor, _ = load_joint(path, self.cfg.injector, self.cfg.extractor)
            self._cache["injector"] = (injector, extractor)
        return self._cache["injector"]

    def poisoned(self, ratio: float | None = None):
        spec = self.cfg.poison
        if ratio is not None:
            spec = type(spec)(ratio=ratio, target_label=spec.target_label, blend_factor=spec.blend_factor,
                              mode=spec.mode)
        injector = self._injector()[0] if spec.mode is PoisonMode.LEARNED_INJECTOR else None
        watermark = None
        if spec.mode is PoisonMode.LINEAR_BLEND:
            watermark = (self._injector()[0].watermark.detach()
                         if (self.stage_dir("train-injector") / "joint.ckpt").is_file()
                         else torch.full((1, self.cfg.dataset.resolution, self.cfg.dataset.resolution), 0.5))
        return build_poisoned_dataset(self.victim_data(), spec, injector=injector, watermark=watermark,
                                      seed=self.cfg.poison_seed)

    def trigger(self):
        if self.cfg.poison.mode is PoisonMode.LEARNED_INJECTOR:
            return self._injector()[0]
        from .data import make_trigger

        injector = self._injector()[0] if (self.stage_dir("train-injector") / "joint.ckpt").is_file() else None
        watermark = None if injector is not None else torch.full(
            (1, self.cfg.dataset.resolution, self.cfg.dataset.resolution), 0.5)
        return make_trigger(self.cfg.poison, injector=injector, watermark=watermark)

    # -- stages ------------------------------------------------------------

    def _train_injector(self, d: Path) -> list[str]:
        cfg = self.cfg
        train_joint(self.injector_data(), cfg.injector, cfg.extractor, cfg.anticollapse, cfg.loss,
                    cfg.schedule, out_dir=d)
        for stale in d.glob("joint_step*.ckpt"):
            stale.unlink()
        self._cache.pop("injector", None)
        return ["joint.ckpt", "train_log.jsonl"]

    def _poison(self, d: Path) -> list[str]:
        pd = self.poisoned()
        pd.save_manifest(d / "poison_manifest.json")
        return ["poison_manifest.json"]

    def _train_victim(self, d: Path) -> list[str]:
        manifest = json.loads((self.stage_dir("poison") / "poison_manifest.json").read_text())
        pd = self.poisoned()
        if list(pd.poisoned_indices) != manifest["poisoned_indices"]:
            raise StalenessError("poisoned indices differ from the poison manifest; re-run the poison stage")
        train_victim(pd, self.cfg.victim, out_dir=d)
        outputs = ["victim.ckpt", "victim_metrics.jsonl"]
        if self.cfg.evaluation.clean_baseline:
            train_victim(self.poisoned(ratio=0.0), self.cfg.victim, out_dir=d / "clean")
            outputs += ["clean/victim.ckpt", "clean/victim_metrics.jsonl"]
        return outputs

    def _evaluate(self, d: Path) -> list[str]:
        cfg = self.cfg
        test = self.test_data()
        trigger = self.trigger()
        victim_dir = self.stage_dir("train-victim")
        ev = cfg.evaluation
        report = evaluate_attack(load_victim(victim_dir / "victim.ckpt"), test, trigger, cfg.poison.target_label,
                                 seed=cfg.seed, stealth_samples=ev.stealth_samples, lpips_backend=ev.lpips_backend,
                                 dataset=cfg.dataset.name)
        emit_report(report, d / "report")
        outputs = ["report.json", "report.csv"]
        if ev.clean_baseline and (victim_dir / "clean" / "victim.ckpt").is_file():
            clean = evaluate_attack(load_victim(victim_dir / "clean" / "victim.ckpt"), test, trigger,
                                    cfg.poison.target_label, seed=cfg.seed, stealth_samples=None,
                                    method="clean-baseline", dataset=cfg.dataset.name)
            emit_report(clean, d / "clean_report")
            outputs += ["clean_report.json", "clean_report.csv"]
        if cfg.poison.mode is PoisonMode.LEARNED_INJECTOR:
            injector, extractor = self._injector()
            stats = extraction_stats(injector, extractor, test.images[:1000])
            (d / "extraction.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
            outputs.append("extraction.json")
        return outputs

    def _defend(self, d: Path) -> list[str]:
        victim_dir = self.stage_dir("train-victim")
        test = self.test_data()
        k = test.num_classes
        rep = run_defense(load_victim(victim_dir / "victim.ckpt"), test.images, k, self.cfg.defense)
        rep.save(d / "defense.json")
        outputs = ["defense.json"]
        if (victim_dir / "clean" / "victim.ckpt").is_file():
            clean = run_defense(load_victim(victim_dir / "clean" / "victim.ckpt"), test.images, k, self.cfg.defense)
            clean.save(d / "defense_clean.json")
            outputs.append("defense_clean.json")
        return outputs

    def _report(self, d: Path) -> list[str]:
        ev_dir, def_dir = self.stage_dir("evaluate"), self.stage_dir("defend")
        summary = {"config_hash": self.cfg.config_hash(), "seed": self.cfg.seed, "profile": self.cfg.profile}
        report = load_report(ev_dir / "report.json")
        summary["attack"] = report.to_dict()
        for name, key in (("clean_report.json", "clean_baseline"), ("extraction.json", "extraction")):
            if (ev_dir / name).is_file():
                summary[key] = json.loads((ev_dir / name).read_text())
        for name, key in (("defense.json", "defense"), ("defense_clean.json", "defense_clean")):
            if (def_dir / name).is_file():
                summary[key] = json.loads((def_dir / name).read_text())
        (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        (d / "summary.md").write_text(render_markdown(summary))
        return ["summary.json", "summary.md"]

    _RUNNERS = {
        "train-injector": _train_injector,
        "poison": _poison,
        "train-victim": _train_victim,
        "evaluate": _evaluate,
        "defend": _defend,
        "report": _report,
    }

    def run(self, stages: Iterable[str]) -> dict[str, str]:
        """Run ``stages`` in dependency order; returns ``{stage: "ran" | "cached"}``."""
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg.dump(self.root / "config.yaml")
        status = {}
        for stage in order_stages(stages):
            inputs = self.input_hashes(stage)
            if self.is_current(stage, inputs):
                logger.info("stage %s is up to date, skipping", stage)
                status[stage] = "cached"
                continue
            d = self.stage_dir(stage)
            d.mkdir(parents=True, exist_ok=True)
            logger.info("running stage %s", stage)
            outputs = self._RUNNERS[stage](self, d)
            self.write_manifest(stage, inputs, outputs)
            status[stage] = "ran"
        return status


def run_pipeline(cfg: ExperimentConfig, stages: Iterable[str] = STAGES, output_dir=None, force: bool = False
                 ) -> Path:
    pipe = Pipeline(cfg, output_dir, force)
    pipe.run(stages)
    return pipe.root


def render_markdown(summary: dict) -> str:
    from .anticollapse import EVAL_CONDITIONS

    lines = ["| method | metric | " + " | ".join(EVAL_CONDITIONS) + " | AVG |",
             "|---|---|" + "---|" * (len(EVAL_CONDITIONS) + 1)]
    for key in ("attack", "clean_baseline"):
        if key not in summary:
            continue
        rep = EvalReport.from_dict(summary[key])
        for row in rep.csv_rows():
            lines.append(f"| {row[0]} | {row[2]} | " + " | ".join(f"{v:.1f}" for v in row[3:]) + " |")
    stealth = summary["attack"].get("stealth")
    if stealth:
        lines += ["", f"PSNR {stealth['psnr']:.2f} dB, SSIM {stealth['ssim']:.4f}, "
                      f"LPIPS {stealth['lpips']:.4f} ({stealth['lpips_backend']}"
                      f"{'' if stealth['lpips_comparable'] else ', not comparable to published LPIPS'})"]
    for key in ("defense", "defense_clean"):
        if key in summary:
            dr = summary[key]
            lines.append(f"{key}: anomaly index {dr['model_index']:.2f} (class {dr['suspect_class']}), "
                         f"verdict {dr['verdict']}")
    return "\n".join(lines) + "\n"
