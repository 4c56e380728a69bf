"""Visible patch trigger, used as a known-detectable reference for the defense."""

from __future__ import annotations

import torch
from torch import Tensor

from .data import blend_inject


class PatchTrigger:
    """Paste a ``size x size`` checkerboard patch into a corner via a per-pixel blend map."""

    def __init__(self, image_size: int = 32, size: int = 3, margin: int = 1, channels: int = 3):
        self.pattern = torch.zeros(1, image_size, image_size)
        self.blend_map = torch.zeros(1, image_size, image_size)
        top = image_size - margin - size
        yy, xx = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
        self.pattern[0, top:top + size, top:top + size] = ((yy + xx) % 2 == 0).float()
        self.blend_map[0, top:top + size, top:top + size] = 1.0

    def __call__(self, x: Tensor) -> Tensor:
        return blend_inject(x, self.pattern, self.blend_map)
