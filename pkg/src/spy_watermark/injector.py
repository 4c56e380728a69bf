"""Transformer trigger injector and its hinge reconstruction loss.

The injector patch-embeds an image, encodes it with a stack of transformer
blocks, adds a projection of the flattened watermark to every token, passes
the sum through a token-wise MLP and decodes pixels with a second, shallower
transformer stack.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import check_config, read_checkpoint, write_checkpoint
from .errors import ConfigError, NumericError, ShapeError


@dataclass
class InjectorConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 192
    encoder_depth: int = 6
    decoder_depth: int = 2
    heads: int = 3
    mlp_ratio: float = 4.0
    trigger_proj_layers: int = 3
    epsilon: float = 1 / 255
    # Decode a bounded residual on top of the input instead of raw pixels.
    residual: bool = True
    learnable_watermark: bool = True
    watermark_low: float = 0.4
    watermark_high: float = 0.6

    @classmethod
    def profile(cls, name: str, image_size: int = 32, **overrides) -> "InjectorConfig":
        patch = 4 if image_size <= 64 else 16
        if name == "paper":
            base = dict(embed_dim=1024, encoder_depth=24, decoder_depth=8, heads=16, residual=False)
        elif name == "desk":
            base = dict(embed_dim=192, encoder_depth=6, decoder_depth=2, heads=3)
        elif name == "tiny":
            base = dict(embed_dim=64, encoder_depth=2, decoder_depth=1, heads=2)
        else:
            raise ConfigError(f"unknown injector profile {name!r}")
        base.update(image_size=image_size, patch_size=patch)
        base.update(overrides)
        return cls(**base)

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            out.append(("patch_size", f"image size {self.image_size} not divisible by patch {self.patch_size}"))
        if self.encoder_depth < 1:
            out.append(("encoder_depth", "must be >= 1"))
        if self.decoder_depth < 1:
            out.append(("decoder_depth", "must be >= 1"))
        if self.heads < 1 or self.embed_dim % max(self.heads, 1):
            out.append(("heads", f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"))
        if self.trigger_proj_layers < 1:
            out.append(("trigger_proj_layers", "must be >= 1"))
        if self.epsilon < 0:
            out.append(("epsilon", "must be >= 0"))
        if not 0 <= self.watermark_low <= self.watermark_high <= 1:
            out.append(("watermark_low", "watermark init range must lie in [0,1]"))
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("invalid injector config", problems)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _token_mlp(dim: int, layers: int) -> nn.Sequential:
    mods: list[nn.Module] = []
    for i in range(layers):
        mods.append(nn.Linear(dim, dim))
        if i < layers - 1:
            mods.append(nn.GELU())
    return nn.Sequential(*mods)


def bounded_residual(x: Tensor, delta: Tensor) -> Tensor:
    """Move ``x`` towards 1 (or 0) by the fraction ``tanh(delta)`` of the remaining headroom."""
    t = torch.tanh(delta)
    return x + t * torch.where(t > 0, 1 - x, x)


class TriggerInjector(nn.Module):
    def __init__(self, cfg: InjectorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d, p, hw = cfg.embed_dim, cfg.patch_size, cfg.image_size
        self.grid = hw // p
        tokens = self.grid ** 2

        self.patch_embed = nn.Conv2d(cfg.channels, d, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, tokens, d))
        self.encoder = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth)])
        self.enc_norm = nn.LayerNorm(d)

        self.trigger_fc = nn.Linear(hw * hw, d)
        self.fuse = _token_mlp(d, cfg.trigger_proj_layers)

        self.dec_pos_embed = nn.Parameter(torch.zeros(1, tokens, d))
        self.decoder = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)])
        self.dec_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, p * p * cfg.channels)

        self.watermark = nn.Parameter(torch.empty(1, hw, hw), requires_grad=cfg.learnable_watermark)
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.dec_pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        if self.cfg.residual:
            # start from the identity mapping
            nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.watermark.uniform_(self.cfg.watermark_low, self.cfg.watermark_high)

    def _check_input(self, x: Tensor) -> None:
        c, hw = self.cfg.channels, self.cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (c, hw, hw):
            raise ShapeError(f"injector expects (N, {c}, {hw}, {hw}), got {tuple(x.shape)}")

    def encode(self, x: Tensor) -> Tensor:
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.encoder:
            tokens = blk(tokens)
        return self.enc_norm(tokens)

    def trigger_features(self, m: Tensor | None = None) -> Tensor:
        m = self.watermark if m is None else m
        return self.trigger_fc(m.reshape(-1))

    def unpatchify(self, tokens: Tensor) -> Tensor:
        n, p, c, g = tokens.shape[0], self.cfg.patch_size, self.cfg.channels, self.grid
        x = tokens.reshape(n, g, g, c, p, p).permute(0, 3, 1, 4, 2, 5)
        return x.reshape(n, c, g * p, g * p)

    def forward(self, x: Tensor, m: Tensor | None = None) -> Tensor:
        self._check_input(x)
        fused = self.fuse(self.encode(x) + self.trigger_features(m))
        h = fused + self.dec_pos_embed
        for blk in self.decoder:
            h = blk(h)
        out = self.unpatchify(self.head(self.dec_norm(h)))
        if self.cfg.residual:
            out = bounded_residual(x, out)
        else:
            out = torch.sigmoid(out)
        if not torch.isfinite(out).all():
            raise NumericError("non-finite injector output")
        return out

    inject = forward

    @torch.no_grad()
    def clamp_watermark_(self) -> None:
        self.watermark.clamp_(0.0, 1.0)


def build_injector(cfg: InjectorConfig, seed: int = 0) -> TriggerInjector:
    """Construct an injector whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TriggerInjector(cfg)


def injector_loss(x: Tensor, x_prime: Tensor, epsilon: float = 1 / 255) -> Tensor:
    """Hinge reconstruction loss: mean of ``relu(|x' - x| - epsilon) ** 2``.

    Deviations up to ``epsilon`` are free. The mean runs over pixels,
    channels and the batch.
    """
    if x.shape != x_prime.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_prime.shape)}")
    if epsilon < 0:
        raise ConfigError("epsilon must be non-negative")
    return F.relu((x_prime - x).abs() - epsilon).pow(2).mean()


def injector_payload(injector: TriggerInjector, step: int = 0, seed: int | None = None) -> dict:
    return {
        "kind": "injector",
        "config": asdict(injector.cfg),
        "state": injector.state_dict(),
        "step": step,
        "seed": seed,
    }


def save_injector(path: str | Path, injector: TriggerInjector, step: int = 0, seed: int | None = None) -> str:
    return write_checkpoint(path, injector_payload(injector, step, seed))


def restore_injector(payload: dict, expected: InjectorConfig | None = None) -> TriggerInjector:
    check_config(payload["config"], asdict(expected) if expected is not None else None, "injector")
    injector = TriggerInjector(InjectorConfig(**payload["config"]))
    injector.load_state_dict(payload["state"])
    return injector


def load_injector(path: str | Path, expected: InjectorConfig | None = None) -> tuple[TriggerInjector, dict]:
    """Load an injector (standalone or from a joint checkpoint) and its metadata."""
    payload = read_checkpoint(path)
    if payload.get("kind") == "joint":
        payload = payload["injector"]
    injector = restore_injector(payload, expected)
    return injector, {"step": payload.get("step", 0), "seed": payload.get("seed")}
