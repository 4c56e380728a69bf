"""Victim classifier training on a (possibly poisoned) dataset."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import check_config, read_checkpoint, write_checkpoint
from .data import ImageSet, PoisonedDataset
from .errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

ARCHITECTURES = ("small_resnet", "resnet18")


@dataclass
class VictimConfig:
    architecture: str = "small_resnet"
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    augment: bool = True
    seed: int = 0
    # optional state dict to start from instead of random initialisation
    pretrained_path: Optional[str] = None

    @classmethod
    def profile(cls, name: str, **overrides) -> "VictimConfig":
        if name == "paper":
            base = dict(architecture="resnet18", epochs=100)
        elif name == "desk":
            base = dict(architecture="small_resnet", epochs=30)
        elif name == "tiny":
            base = dict(architecture="small_resnet", epochs=6, batch_size=64)
        else:
            raise ConfigError(f"unknown victim profile {name!r}")
        return cls(**{**base, **overrides})

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.architecture not in ARCHITECTURES:
            out.append(("architecture", f"unknown architecture {self.architecture!r}"))
        if self.epochs < 1:
            out.append(("epochs", "must be >= 1"))
        if self.lr <= 0:
            out.append(("lr", "must be > 0"))
        if self.batch_size < 1:
            out.append(("batch_size", "must be >= 1"))
        return out


def cosine_lr(lr0: float, epoch: int, epochs: int) -> float:
    """Learning rate for 0-based ``epoch`` under per-epoch cosine annealing to zero."""
    return lr0 * (1 + math.cos(math.pi * epoch / epochs)) / 2


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Three-stage residual network (16/32/64 channels, three blocks per stage)."""

    def __init__(self, num_classes: int, channels: int = 3, widths=(16, 32, 64), blocks: int = 3):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(channels, widths[0], 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU(inplace=True))
        layers = []
        cin = widths[0]
        for i, w in enumerate(widths):
            for b in range(blocks):
                layers.append(BasicBlock(cin, w, 2 if (i > 0 and b == 0) else 1))
                cin = w
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, x):
        h = self.layers(self.stem(x))
        return self.fc(F.adaptive_avg_pool2d(h, 1).flatten(1))


def _resnet18(num_classes: int, image_size: int) -> nn.Module:
    from torchvision.models import resnet18

    model = resnet18(num_classes=num_classes)
    if image_size <= 64:
        model.conv1 = nn.Conv2d(3, 64, 3, 1, 1, bias=False)
        model.maxpool = nn.Identity()
    return model


def build_victim(cfg: VictimConfig, num_classes: int, image_shape=(3, 32, 32)) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if cfg.architecture == "small_resnet":
            model = SmallResNet(num_classes, image_shape[0])
        elif cfg.architecture == "resnet18":
            model = _resnet18(num_classes, image_shape[-1])
        else:
            raise ConfigError(f"unknown architecture {cfg.architecture!r}")
    if cfg.pretrained_path:
        state = torch.load(cfg.pretrained_path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        model.load_state_dict(state, strict=False)
    model.input_shape = tuple(image_shape)
    model.num_classes = num_classes
    return model


def augment_batch(x: Tensor, rng: np.random.Generator, pad: int = 4) -> Tensor:
    """Random crop with zero padding plus random horizontal flip."""
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


@dataclass
class VictimResult:
    model: nn.Module
    config: VictimConfig
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def train_victim(
    dataset: PoisonedDataset | ImageSet,
    cfg: VictimConfig,
    out_dir: str | Path | None = None,
    eval_fn: Callable[[nn.Module], dict] | None = None,
    batch_callback: Callable[[int, int, Tensor, Tensor], None] | None = None,
) -> VictimResult:
    """Cross-entropy training with SGD and per-epoch cosine annealing.

    ``eval_fn(model)`` may add held-out metrics to each epoch's record.
    ``batch_callback(epoch, batch, indices, logits)`` observes every
    training forward pass.
    """
    problems = cfg.problems()
    if problems:
        raise ConfigError("invalid victim config", problems)
    data = dataset.data if isinstance(dataset, PoisonedDataset) else dataset
    if len(data) == 0:
        raise ConfigError("victim training needs a non-empty dataset")
    model = build_victim(cfg, data.num_classes, data.image_shape)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []
    initial_loss = None
    bad_epochs = 0
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        perm = torch.from_numpy(rng.permutation(n))
        model.train()
        total, correct, loss_sum = 0, 0, 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            if cfg.augment:
                x = augment_batch(x, rng)
            logits = model(x)
            if batch_callback is not None:
                batch_callback(epoch, b, idx, logits.detach())
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise NumericError("non-finite victim loss", step=epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
            total += len(idx)
        rec = {"epoch": epoch, "lr": lr, "loss": loss_sum / total, "acc": 100.0 * correct / total}
        if eval_fn is not None:
            rec.update(eval_fn(model))
        metrics.append(rec)
        logger.info("victim epoch %d  lr=%.4f  loss=%.4f  acc=%.2f", epoch, lr, rec["loss"], rec["acc"])
        if out is not None:
            with open(out / "victim_metrics.jsonl", "a" if epoch else "w") as fh:
                fh.write(json.dumps(rec) + "\n")

        if initial_loss is None:
            initial_loss = rec["loss"]
        bad_epochs = bad_epochs + 1 if rec["loss"] > 10 * initial_loss else 0
        if bad_epochs >= 3:
            raise NumericError(f"victim training diverged: loss {rec['loss']:.3f} vs initial {initial_loss:.3f}",
                               step=epoch)

    model.eval()
    ckpt = None
    if out is not None:
        ckpt = out / "victim.ckpt"
        save_victim(ckpt, model, cfg, epoch=cfg.epochs)
    return VictimResult(model, cfg, metrics, ckpt)


def save_victim(path: str | Path, model: nn.Module, cfg: VictimConfig, epoch: int = 0) -> str:
    return write_checkpoint(path, {
        "kind": "victim",
        "config": asdict(cfg),
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "state": model.state_dict(),
        "epoch": epoch,
        "seed": cfg.seed,
    })


def load_victim(path: str | Path, expected: VictimConfig | None = None) -> nn.Module:
    payload = read_checkpoint(path)
    if payload.get("kind") != "victim":
        raise ConfigError(f"{path} is not a victim checkpoint")
    check_config(payload["config"], asdict(expected) if expected is not None else None, "victim")
    cfg = VictimConfig(**{**payload["config"], "pretrained_path": None})
    model = build_victim(cfg, payload["num_classes"], tuple(payload["input_shape"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model


@torch.no_grad()
def logits_of(model: nn.Module | Callable[[Tensor], Tensor], x: Tensor, batch_size: int = 256) -> Tensor:
    shape = getattr(model, "input_shape", None)
    if shape is not None and tuple(x.shape[1:]) != tuple(shape):
        raise ShapeError(f"model expects inputs {tuple(shape)}, got {tuple(x.shape[1:])}")
    if isinstance(model, nn.Module):
        model.eval()
    return torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def predict(model: nn.Module | Callable[[Tensor], Tensor], x: Tensor, batch_size: int = 256) -> Tensor:
    """Arg-max class index per image (eval mode)."""
    return logits_of(model, x, batch_size).argmax(1)
