"""Corruption operations applied to poisoned images during joint training,
and the fixed-seed variants used as evaluation conditions.

Every op is differentiable with respect to the image (masking passes
gradients through the kept pixels only), so the extractor loss can push the
injector towards corruption-resistant embeddings.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError


class OpKind(str, enum.Enum):
    RANDOM_MASK = "random_mask"
    RESCALE = "rescale"
    NOISE = "noise"
    ROTATE = "rotate"
    IDENTITY = "identity"


# Composition order when a set is built from defaults.
DEFAULT_ORDER = (OpKind.RANDOM_MASK, OpKind.ROTATE, OpKind.NOISE, OpKind.RESCALE)


@dataclass
class AntiCollapseOp:
    kind: OpKind
    probability: float = 0.5
    mask_fraction: float = 0.25
    scale_range: tuple[float, float] = (0.5, 2.0)
    sigma: float = 0.05
    angle_range: tuple[float, float] = (-15.0, 15.0)

    def __post_init__(self):
        self.kind = OpKind(self.kind)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        self.angle_range = tuple(float(a) for a in self.angle_range)

    def problems(self, prefix: str = "") -> list[tuple[str, str]]:
        out = []
        if not 0.0 <= self.probability <= 1.0:
            out.append((prefix + "probability", "probability out of [0,1]"))
        if not 0.0 < self.mask_fraction < 1.0:
            out.append((prefix + "mask_fraction", "mask fraction must lie in (0,1)"))
        lo, hi = self.scale_range
        if not 0.5 <= lo <= hi <= 2.0:
            out.append((prefix + "scale_range", "scale range must lie within [0.5, 2.0]"))
        if self.sigma < 0:
            out.append((prefix + "sigma", "sigma must be >= 0"))
        if self.angle_range[0] > self.angle_range[1]:
            out.append((prefix + "angle_range", "empty angle range"))
        return out


@dataclass
class AntiCollapseSet:
    ops: list[AntiCollapseOp] = field(
        default_factory=lambda: [AntiCollapseOp(kind) for kind in DEFAULT_ORDER]
    )
    seed: int = 0

    def __post_init__(self):
        self.ops = [op if isinstance(op, AntiCollapseOp) else AntiCollapseOp(**op) for op in self.ops]

    def problems(self) -> list[tuple[str, str]]:
        if not self.ops:
            return [("ops", "operation set must be non-empty")]
        out = []
        for i, op in enumerate(self.ops):
            out.extend(op.problems(f"ops[{i}]."))
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("invalid anti-collapse set", problems)


def _generator(*keys: int) -> torch.Generator:
    state = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def _uniform(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * float(torch.rand((), generator=g))


def _randint(g: torch.Generator, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi]."""
    return int(torch.randint(lo, hi + 1, (1,), generator=g))


def mask_area(fraction: float, h: int, w: int) -> int:
    return int(math.floor(fraction * h * w + 0.5))


def _mask_shape(area: int, h: int, w: int) -> tuple[int, int, int]:
    """Rectangle ``rows x cols`` plus ``rem`` pixels in one extra partial column."""
    guess = max(1, min(h, round(math.sqrt(area * h / w))))
    for rows in sorted(range(1, h + 1), key=lambda r: abs(r - guess)):
        cols, rem = divmod(area, rows)
        if cols + (1 if rem else 0) <= w:
            return rows, cols, rem
    raise ConfigError(f"cannot place a mask of area {area} in {h}x{w}")


def random_mask(x: Tensor, fraction: float, gens: Sequence[torch.Generator]) -> Tensor:
    """Zero one contiguous region of exactly ``round(fraction * H * W)`` pixels per image."""
    n, _, h, w = x.shape
    area = mask_area(fraction, h, w)
    rows, cols, rem = _mask_shape(area, h, w)
    keep = torch.ones(n, 1, h, w, dtype=x.dtype)
    for i in range(n):
        top = _randint(gens[i], 0, h - rows)
        left = _randint(gens[i], 0, w - cols - (1 if rem else 0))
        keep[i, :, top:top + rows, left:left + cols] = 0
        if rem:
            keep[i, :, top:top + rem, left + cols] = 0
    return x * keep


def rotate(x: Tensor, degrees: Tensor) -> Tensor:
    """Rotate each image about its centre; uncovered pixels are zero-filled."""
    rad = degrees.to(x.dtype) * (math.pi / 180.0)
    cos, sin = torch.cos(rad), torch.sin(rad)
    zero = torch.zeros_like(cos)
    theta = torch.stack([torch.stack([cos, -sin, zero], -1), torch.stack([sin, cos, zero], -1)], 1)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def rescale(x: Tensor, scales: Sequence[float]) -> Tensor:
    """Resample each image to ``scale`` times its size and back (bilinear)."""
    h, w = x.shape[-2:]
    out = []
    for img, s in zip(x, scales):
        size = (max(1, round(h * s)), max(1, round(w * s)))
        small = F.interpolate(img[None], size=size, mode="bilinear", align_corners=False)
        out.append(F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False))
    return torch.cat(out)


def add_noise(x: Tensor, sigma: float, gens: Sequence[torch.Generator]) -> Tensor:
    if sigma == 0:
        return x
    noise = torch.stack([torch.randn(x.shape[1:], generator=g, dtype=x.dtype) for g in gens])
    return x + sigma * noise


def apply_op(op: AntiCollapseOp, x: Tensor, gens: Sequence[torch.Generator]) -> Tensor:
    if op.kind is OpKind.IDENTITY:
        return x
    if op.kind is OpKind.RANDOM_MASK:
        return random_mask(x, op.mask_fraction, gens)
    if op.kind is OpKind.ROTATE:
        angles = torch.tensor([_uniform(g, *op.angle_range) for g in gens])
        return rotate(x, angles)
    if op.kind is OpKind.NOISE:
        return add_noise(x, op.sigma, gens)
    if op.kind is OpKind.RESCALE:
        return rescale(x, [_uniform(g, *op.scale_range) for g in gens])
    raise ConfigError(f"unknown op kind {op.kind}")


def gate_draws(acset: AntiCollapseSet, step: int) -> list[bool]:
    """Bernoulli gating decision of every op at ``step``."""
    return [
        float(torch.rand((), generator=_generator(acset.seed, step, k))) < op.probability
        for k, op in enumerate(acset.ops)
    ]


def apply_set(acset: AntiCollapseSet, x: Tensor, step: int) -> Tensor:
    """Apply the ops in order, each gated by an independent Bernoulli draw.

    All randomness is a function of ``(acset.seed, step, op index)``.
    """
    out = x
    touched = False
    for k, op in enumerate(acset.ops):
        g = _generator(acset.seed, step, k)
        if float(torch.rand((), generator=g)) >= op.probability:
            continue
        out = apply_op(op, out, [g] * x.shape[0])
        touched = True
    return out.clamp(0.0, 1.0) if touched else out


# ---------------------------------------------------------------------------
# evaluation conditions

EVAL_CONDITIONS = ("None", "RM", "Ro", "Noise", "RS")
_EVAL_KIND = {
    "none": OpKind.IDENTITY,
    "rm": OpKind.RANDOM_MASK,
    "ro": OpKind.ROTATE,
    "noise": OpKind.NOISE,
    "rs": OpKind.RESCALE,
}


def canonical_condition(kind: str) -> str:
    key = str(kind).lower()
    if key not in _EVAL_KIND:
        raise ConfigError(f"unknown corruption condition {kind!r}; expected one of {EVAL_CONDITIONS}")
    return EVAL_CONDITIONS[list(_EVAL_KIND).index(key)]


def corruption_for_eval(kind: str, x: Tensor, seed: int = 0, offset: int = 0,
                        op: AntiCollapseOp | None = None) -> Tensor:
    """Deterministic single corruption for an evaluation column.

    Image ``i`` of the batch draws its parameters from a generator keyed by
    ``(seed, condition, offset + i)``, so results do not depend on batching.
    ``op`` overrides the default severities (which mirror training).
    """
    name = canonical_condition(kind)
    op_kind = _EVAL_KIND[name.lower()]
    if op_kind is OpKind.IDENTITY:
        return x
    if op is None:
        op = AntiCollapseOp(op_kind, probability=1.0)
    elif op.kind is not op_kind:
        raise ConfigError(f"severity override of kind {op.kind.value} given for condition {name}")
    cond_id = EVAL_CONDITIONS.index(name)
    gens = [_generator(seed, 7919 + cond_id, offset + i) for i in range(x.shape[0])]
    with torch.no_grad():
        out = apply_op(op, x, gens)
    return out.clamp(0.0, 1.0)
