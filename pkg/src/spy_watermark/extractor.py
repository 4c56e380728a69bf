"""UNet-style trigger extractor with multiscale supervision."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class ExtractorConfig:
    depth: int = 3
    base_channels: int = 32
    supervised_levels: int = 3
    channels: int = 3

    @classmethod
    def profile(cls, name: str, **overrides) -> "ExtractorConfig":
        base = {"paper": {}, "desk": {}, "tiny": {"base_channels": 8}}
        if name not in base:
            raise ConfigError(f"unknown extractor profile {name!r}")
        return cls(**{**base[name], **overrides})

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.supervised_levels < 1:
            out.append(("supervised_levels", "must be >= 1"))
        if self.depth < self.supervised_levels:
            out.append(("depth", f"depth {self.depth} < supervised_levels {self.supervised_levels}"))
        if self.base_channels < 1:
            out.append(("base_channels", "must be >= 1"))
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("invalid extractor config", problems)


def upsample_to(m: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize used for every supervised level."""
    if tuple(m.shape[-2:]) == tuple(size):
        return m
    return F.interpolate(m, size=size, mode="bilinear", align_corners=False)


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=True),
        )


class TriggerExtractor(nn.Module):
    """Encoder/decoder with skips; each of the last ``supervised_levels``
    decoder stages has a 1x1 head producing a single-channel map."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.stem = ConvBlock(cfg.channels, widths[0])
        self.down = nn.ModuleList([ConvBlock(widths[i], widths[i + 1]) for i in range(cfg.depth)])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.dec.append(ConvBlock(widths[i] * 2, widths[i]))
        # heads for the finest `supervised_levels` decoder stages, coarsest first
        self.heads = nn.ModuleList(
            [nn.Conv2d(widths[i], 1, 1) for i in reversed(range(cfg.supervised_levels))]
        )

    def forward(self, x: Tensor) -> list[Tensor]:
        """Return ``supervised_levels`` maps of shape (N, 1, H, W), coarsest first."""
        if x.ndim != 4:
            raise ShapeError(f"extractor expects (N, C, H, W), got {tuple(x.shape)}")
        size = tuple(x.shape[-2:])
        if size[0] % 2 ** self.cfg.depth or size[1] % 2 ** self.cfg.depth:
            raise ShapeError(f"spatial size {size} not divisible by 2**{self.cfg.depth}")
        skips = [self.stem(x)]
        h = skips[0]
        for blk in self.down:
            h = blk(F.max_pool2d(h, 2))
            skips.append(h)
        h = skips.pop()
        feats = []
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
            feats.append(h)
        feats = feats[-self.cfg.supervised_levels:]
        maps = [upsample_to(head(f), size) for head, f in zip(self.heads, feats)]
        if not all(torch.isfinite(m).all() for m in maps):
            raise NumericError("non-finite extractor output")
        return maps

    extract = forward


def build_extractor(cfg: ExtractorConfig, seed: int = 0) -> TriggerExtractor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TriggerExtractor(cfg)


def level_loss(poisoned: Tensor, clean: Tensor, m: Tensor) -> Tensor:
    """Per-level term: watermark error on poisoned maps plus energy of clean maps."""
    return ((poisoned - m) ** 2 + clean ** 2).mean()


def extractor_loss(poisoned_maps: list[Tensor], clean_maps: list[Tensor], m: Tensor) -> Tensor:
    """Sum over levels of the per-pixel mean of ``(map' - m)^2 + map^2``, batch-averaged.

    ``poisoned_maps`` come from triggered images and must match ``m``;
    ``clean_maps`` come from benign images and must vanish.
    """
    if len(poisoned_maps) != len(clean_maps) or not poisoned_maps:
        raise ShapeError(f"level count mismatch: {len(poisoned_maps)} vs {len(clean_maps)}")
    for p, c in zip(poisoned_maps, clean_maps):
        if p.shape != c.shape or p.shape[-2:] != m.shape[-2:]:
            raise ShapeError(f"map shapes {tuple(p.shape)}, {tuple(c.shape)} vs watermark {tuple(m.shape)}")
    return sum(level_loss(p, c, m) for p, c in zip(poisoned_maps, clean_maps))
