"""Neural Cleanse style detection: per-class trigger reverse engineering and
the MAD anomaly index over the reversed mask norms."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError

logger = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826


@dataclass
class DefenseConfig:
    tau: float = 2.0
    beta: float = 1e-3
    steps: int = 100
    lr: float = 0.1
    batch_size: int = 64
    clean_budget: int = 512
    seed: int = 0

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.tau <= 0:
            out.append(("tau", "must be > 0"))
        if self.beta <= 0:
            out.append(("beta", "must be > 0"))
        if self.steps <= 0:
            out.append(("steps", "must be > 0"))
        if self.lr <= 0:
            out.append(("lr", "must be > 0"))
        return out


@dataclass
class ReversedTrigger:
    target: int
    mask: Tensor
    pattern: Tensor
    mask_l1: float
    attack_rate: float = 0.0
    failed: bool = False


def _squash(t: Tensor) -> Tensor:
    return (torch.tanh(t) + 1) / 2


def reverse_trigger(model: nn.Module, clean: Tensor, target: int, cfg: DefenseConfig = DefenseConfig()
                    ) -> ReversedTrigger:
    """Optimise a mask and pattern so that ``x * (1 - mask) + pattern * mask`` is
    classified as ``target``, with an L1 penalty ``beta * |mask|_1``.

    Mask and pattern live in tanh space, so they stay in [0, 1] by construction.
    """
    if len(clean) == 0:
        raise ConfigError("reverse engineering needs clean samples")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    _, c, h, w = clean.shape
    gen = torch.Generator().manual_seed(cfg.seed * 1009 + target)
    mask_raw = (torch.randn(1, 1, h, w, generator=gen) * 0.1).requires_grad_(True)
    pattern_raw = (torch.randn(1, c, h, w, generator=gen) * 0.1).requires_grad_(True)
    opt = torch.optim.Adam([mask_raw, pattern_raw], lr=cfg.lr, betas=(0.5, 0.9))
    labels = torch.full((cfg.batch_size,), target, dtype=torch.long)
    order = torch.randperm(len(clean), generator=gen)
    failed = False
    pos = 0
    for _ in range(cfg.steps):
        idx = order[torch.arange(pos, pos + cfg.batch_size) % len(clean)]
        pos += cfg.batch_size
        x = clean[idx]
        mask, pattern = _squash(mask_raw), _squash(pattern_raw)
        logits = model(x * (1 - mask) + pattern * mask)
        loss = F.cross_entropy(logits, labels[:len(x)]) + cfg.beta * mask.sum()
        if not torch.isfinite(loss):
            failed = True
            logger.warning("reverse engineering for class %d produced a non-finite loss", target)
            break
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    for p in model.parameters():
        p.requires_grad_(True)

    with torch.no_grad():
        mask, pattern = _squash(mask_raw)[0], _squash(pattern_raw)[0]
        sample = clean[: min(len(clean), 256)]
        preds = model(sample * (1 - mask) + pattern * mask).argmax(1)
        rate = float((preds == target).double().mean())
    return ReversedTrigger(target, mask.detach(), pattern.detach(), float(mask.sum()), rate,
                           failed or not torch.isfinite(mask).all())


def anomaly_index(norms) -> np.ndarray:
    """``|v - median| / (1.4826 * MAD)`` for every class norm.

    Returns all zeros when the MAD vanishes (no spread to measure against).
    """
    v = np.asarray(norms, dtype=np.float64)
    if v.size < 3:
        raise ConfigError("anomaly index needs at least 3 classes")
    med = np.median(v)
    mad = np.median(np.abs(v - med))
    if mad == 0:
        logger.warning("MAD is zero; anomaly index degenerate")
        return np.zeros_like(v)
    return np.abs(v - med) / (MAD_CONSISTENCY * mad)


@dataclass
class DefenseReport:
    mask_l1: dict[int, float]
    anomaly: dict[int, float]
    model_index: float
    suspect_class: int
    flagged: bool
    tau: float
    failed_classes: list[int] = field(default_factory=list)
    attack_rates: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("mask_l1", "anomaly", "attack_rates"):
            d[key] = {str(k): v for k, v in d[key].items()}
        d["verdict"] = "backdoor" if self.flagged else "clean"
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def summarize(norms: dict[int, float], tau: float = 2.0, failed=(), attack_rates=None) -> DefenseReport:
    """Model-level verdict: the anomaly index of the smallest-norm class
    (only abnormally small norms indicate a backdoor)."""
    classes = sorted(norms)
    idx = anomaly_index([norms[k] for k in classes])
    per_class = {k: float(i) for k, i in zip(classes, idx)}
    suspect = min(classes, key=lambda k: norms[k])
    model_index = per_class[suspect]
    return DefenseReport(dict(norms), per_class, model_index, suspect, model_index > tau, tau,
                         list(failed), dict(attack_rates or {}))


def run_defense(model: nn.Module, clean: Tensor, num_classes: int, cfg: DefenseConfig = DefenseConfig()
                ) -> DefenseReport:
    problems = cfg.problems()
    if problems:
        raise ConfigError("invalid defense config", problems)
    if len(clean) > cfg.clean_budget:
        pick = np.random.default_rng(cfg.seed).choice(len(clean), cfg.clean_budget, replace=False)
        clean = clean[torch.from_numpy(np.sort(pick))]
    norms, failed, rates = {}, [], {}
    for k in range(num_classes):
        rev = reverse_trigger(model, clean, k, cfg)
        rates[k] = rev.attack_rate
        if rev.failed:
            failed.append(k)
            continue
        norms[k] = rev.mask_l1
        logger.info("class %d: mask L1 %.2f, attack rate %.3f", k, rev.mask_l1, rev.attack_rate)
    if failed:
        logger.warning("classes %s excluded from anomaly statistics", failed)
    return summarize(norms, cfg.tau, failed, rates)
