"""End-to-end training of injector, extractor and watermark."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .anticollapse import AntiCollapseSet, apply_set
from .checkpoint import check_config, read_checkpoint, write_checkpoint
from .data import ImageSet
from .errors import ConfigError, ContractError, NumericError
from .extractor import ExtractorConfig, TriggerExtractor, build_extractor, extractor_loss
from .injector import (InjectorConfig, TriggerInjector, build_injector, injector_loss, injector_payload,
                       restore_injector)

logger = logging.getLogger(__name__)


@dataclass
class JointLossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    epsilon: float = 1 / 255

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.lambda1 < 0:
            out.append(("lambda1", "weight must be >= 0"))
        if self.lambda2 < 0:
            out.append(("lambda2", "weight must be >= 0"))
        if self.epsilon < 0:
            out.append(("epsilon", "must be >= 0"))
        return out


@dataclass
class TrainSchedule:
    iterations: int = 2000
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.5
    batch_size: int = 16
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainSchedule":
        if name == "paper":
            base = dict(iterations=10_000, optimizer="sgd", lr=2e-4, momentum=0.5, batch_size=16)
        elif name == "desk":
            base = dict(iterations=2000, optimizer="adam", lr=1e-3, batch_size=16)
        elif name == "tiny":
            base = dict(iterations=400, optimizer="adam", lr=1e-3, batch_size=16)
        else:
            raise ConfigError(f"unknown schedule profile {name!r}")
        return cls(**{**base, **overrides})

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.iterations <= 0:
            out.append(("iterations", "must be > 0"))
        if self.lr <= 0:
            out.append(("lr", "must be > 0"))
        if self.batch_size < 1:
            out.append(("batch_size", "must be >= 1"))
        if self.optimizer not in ("sgd", "adam"):
            out.append(("optimizer", f"unknown optimizer {self.optimizer!r}"))
        return out


def total_loss(l1, l2, cfg: JointLossConfig = JointLossConfig()):
    """Weighted sum ``lambda1 * l1 + lambda2 * l2``; accepts floats or scalar tensors."""
    for name, v in (("l1", l1), ("l2", l2)):
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(val):
            raise ContractError(f"{name} is not finite: {val}")
        if val < 0:
            raise ContractError(f"{name} is negative: {val}")
    return cfg.lambda1 * l1 + cfg.lambda2 * l2


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices of the batch consumed at ``step`` (1-based).

    The data stream is a concatenation of seeded per-epoch permutations, so
    any step's batch can be recomputed without replaying earlier steps.
    """
    start = (step - 1) * batch_size
    pos = np.arange(start, start + batch_size)
    epochs = pos // n
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, int(e)]).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel] % n]
    return out


def make_optimizer(params, schedule: TrainSchedule) -> torch.optim.Optimizer:
    if schedule.optimizer == "sgd":
        return torch.optim.SGD(params, lr=schedule.lr, momentum=schedule.momentum)
    return torch.optim.Adam(params, lr=schedule.lr)


@dataclass
class JointResult:
    injector: TriggerInjector
    extractor: TriggerExtractor
    step: int
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def joint_payload(injector, extractor, optimizer, step, seed, loss_cfg, schedule, acset) -> dict:
    return {
        "kind": "joint",
        "injector": injector_payload(injector, step, seed),
        "extractor": {"config": asdict(extractor.cfg), "state": extractor.state_dict()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "seed": seed,
        "loss": asdict(loss_cfg),
        "schedule": asdict(schedule),
        "anticollapse": {"seed": acset.seed, "ops": [_op_dict(op) for op in acset.ops]},
    }


def _op_dict(op) -> dict:
    d = asdict(op)
    d["kind"] = op.kind.value
    d["scale_range"] = list(op.scale_range)
    d["angle_range"] = list(op.angle_range)
    return d


def save_joint(path, injector, extractor, optimizer=None, step=0, seed=0,
               loss_cfg=JointLossConfig(), schedule=TrainSchedule(), acset=None) -> str:
    acset = acset or AntiCollapseSet()
    return write_checkpoint(path, joint_payload(injector, extractor, optimizer, step, seed, loss_cfg, schedule, acset))


def load_joint(path, injector_cfg: InjectorConfig | None = None,
               extractor_cfg: ExtractorConfig | None = None) -> tuple[TriggerInjector, TriggerExtractor, dict]:
    payload = read_checkpoint(path)
    if payload.get("kind") != "joint":
        raise ConfigError(f"{path} is not a joint checkpoint")
    injector = restore_injector(payload["injector"], injector_cfg)
    ext = payload["extractor"]
    check_config(ext["config"], asdict(extractor_cfg) if extractor_cfg is not None else None, "extractor")
    extractor = TriggerExtractor(ExtractorConfig(**ext["config"]))
    extractor.load_state_dict(ext["state"])
    return injector, extractor, payload


def _all_finite(*modules) -> bool:
    return all(torch.isfinite(p).all() for m in modules for p in m.parameters())


def train_joint(
    dataset: ImageSet,
    injector_cfg: InjectorConfig,
    extractor_cfg: ExtractorConfig,
    acset: AntiCollapseSet,
    loss_cfg: JointLossConfig = JointLossConfig(),
    schedule: TrainSchedule = TrainSchedule(),
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> JointResult:
    """Train the injector, extractor and watermark jointly.

    Each step draws a batch ``x``, injects it, corrupts the poisoned batch
    with ``acset`` and minimises the weighted sum of the reconstruction loss
    on ``(x, x')`` and the extraction loss on the corrupted poisoned batch
    and the clean batch. The watermark enters the extraction loss as a fixed
    target; it is learned only through the injection path.

    With ``out_dir`` set, ``train_log.jsonl`` (every ``log_every`` steps),
    periodic ``joint_step*.ckpt`` files and the final ``joint.ckpt`` are
    written there.
    """
    if len(dataset) == 0:
        raise ConfigError("joint training needs a non-empty dataset")
    problems = injector_cfg.problems() + extractor_cfg.problems() + acset.problems()
    problems += loss_cfg.problems() + schedule.problems()
    if problems:
        raise ConfigError("invalid joint training configuration", problems)
    if len(dataset) < schedule.batch_size:
        logger.warning("dataset (%d) smaller than batch (%d): batches wrap around", len(dataset),
                       schedule.batch_size)

    seed = schedule.seed
    torch.manual_seed(seed)
    injector = build_injector(injector_cfg, seed)
    extractor = build_extractor(extractor_cfg, seed + 1)
    params = [p for p in injector.parameters() if p.requires_grad] + list(extractor.parameters())
    optimizer = make_optimizer(params, schedule)
    start = 0
    if resume_from is not None:
        injector, extractor, payload = load_joint(resume_from, injector_cfg, extractor_cfg)
        params = [p for p in injector.parameters() if p.requires_grad] + list(extractor.parameters())
        optimizer = make_optimizer(params, schedule)
        if payload.get("optimizer"):
            optimizer.load_state_dict(payload["optimizer"])
        start = int(payload["step"])
        logger.info("resuming joint training from step %d", start)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if start else "w")

    def _save(name: str, step: int) -> Path | None:
        if out is None:
            return None
        path = out / name
        save_joint(path, injector, extractor, optimizer, step, seed, loss_cfg, schedule, acset)
        return path

    history: list[dict] = []
    injector.train()
    extractor.train()
    try:
        for step in range(start + 1, schedule.iterations + 1):
            idx = torch.from_numpy(batch_indices(len(dataset), schedule.batch_size, step, seed))
            x = dataset.images[idx]
            x_prime = injector(x)
            corrupted = apply_set(acset, x_prime, step)
            l1 = injector_loss(x, x_prime, loss_cfg.epsilon)
            l2 = extractor_loss(extractor(corrupted), extractor(x), injector.watermark.detach())
            if not (torch.isfinite(l1) and torch.isfinite(l2)):
                _save("joint_last_good.ckpt", step - 1)
                raise NumericError("non-finite joint loss, last good state saved", step=step)
            loss = total_loss(l1, l2, loss_cfg)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            injector.clamp_watermark_()

            rec = {"step": step, "L1": l1.item(), "L2": l2.item(), "L": loss.item()}
            history.append(rec)
            if log_fh is not None and (step % schedule.log_every == 0 or step == schedule.iterations):
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if step % schedule.log_every == 0:
                logger.info("joint step %d  L1=%.3e  L2=%.3e  L=%.3e", step, rec["L1"], rec["L2"], rec["L"])
            if schedule.checkpoint_every and step % schedule.checkpoint_every == 0 and step < schedule.iterations:
                _save(f"joint_step{step}.ckpt", step)
    finally:
        if log_fh is not None:
            log_fh.close()

    if not _all_finite(injector, extractor):
        raise NumericError("non-finite parameters after training", step=schedule.iterations)
    final = _save("joint.ckpt", schedule.iterations)
    injector.eval()
    extractor.eval()
    return JointResult(injector, extractor, schedule.iterations, history, final)


@torch.no_grad()
def extraction_stats(injector: TriggerInjector, extractor: TriggerExtractor, images: Tensor,
                     batch_size: int = 64) -> dict:
    """Finest-level extraction error on poisoned vs clean images.

    Returns ``mse_poisoned`` (finest map of injected images vs the watermark),
    ``mse_clean`` (finest map of clean images vs the watermark) and
    ``clean_abs`` (mean absolute value of clean-image maps).
    """
    injector.eval()
    extractor.eval()
    m = injector.watermark
    sums = {"mse_poisoned": 0.0, "mse_clean": 0.0, "clean_abs": 0.0}
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        finest_p = extractor(injector(x))[-1]
        finest_c = extractor(x)[-1]
        k = len(x)
        sums["mse_poisoned"] += float(((finest_p - m) ** 2).mean()) * k
        sums["mse_clean"] += float(((finest_c - m) ** 2).mean()) * k
        sums["clean_abs"] += float(finest_c.abs().mean()) * k
    return {key: v / len(images) for key, v in sums.items()}


def smoothed(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
