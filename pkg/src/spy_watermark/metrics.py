"""Image quality metrics: PSNR, SSIM and a pluggable LPIPS-style distance."""

from __future__ import annotations

import logging
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0


def _check_pair(x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 3:
        x, y = x[None], y[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) or (C, H, W), got {tuple(x.shape)}")
    return x.double(), y.double()


def psnr(x: Tensor, y: Tensor, reduction: str = "mean") -> Tensor:
    """Peak signal-to-noise ratio in dB for [0, 1] images, per image then averaged.

    Values are capped at 100 dB (reached when the MSE drops below 1e-10).
    """
    x, y = _check_pair(x, y)
    mse = ((x - y) ** 2).flatten(1).mean(1)
    val = torch.where(mse < 1e-10, torch.full_like(mse, PSNR_CAP), 10 * torch.log10(1.0 / mse.clamp_min(1e-300)))
    val = val.clamp(max=PSNR_CAP)
    return val.mean() if reduction == "mean" else val


def gaussian_window(size: int = 11, sigma: float = 1.5) -> Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x: Tensor, y: Tensor, win_size: int = 11, sigma: float = 1.5, data_range: float = 1.0,
         reduction: str = "mean") -> Tensor:
    """Structural similarity with a Gaussian window and the usual constants
    ``(0.01 L)^2`` and ``(0.03 L)^2``; the map is averaged over valid
    positions and channels."""
    x, y = _check_pair(x, y)
    c = x.shape[1]
    if min(x.shape[-2:]) < win_size:
        raise ShapeError(f"images smaller than the {win_size}x{win_size} SSIM window")
    w = gaussian_window(win_size, sigma).expand(c, 1, win_size, win_size)

    def filt(t):
        return F.conv2d(t, w, groups=c)

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    val = (num / den).flatten(1).mean(1)
    return val.mean() if reduction == "mean" else val


# ---------------------------------------------------------------------------
# perceptual distance


class RandomFeatureLPIPS(nn.Module):
    """LPIPS-shaped distance over a fixed-seed random conv feature stack.

    Numbers from this backend are NOT comparable to published LPIPS values,
    which rely on pretrained features and learned channel weights.
    """

    name = "random-features"
    comparable = False

    def __init__(self, seed: int = 0, widths=(32, 64, 96, 128)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        cin = 3
        for i, cout in enumerate(widths):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            self.convs.append(conv)
            cin = cout
        self.requires_grad_(False)
        self.eval()

    def features(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x * 2 - 1
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    @torch.no_grad()
    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        total = torch.zeros(x.shape[0], dtype=torch.float64)
        for fx, fy in zip(self.features(x.float()), self.features(y.float())):
            nx = fx / (fx.norm(dim=1, keepdim=True) + 1e-10)
            ny = fy / (fy.norm(dim=1, keepdim=True) + 1e-10)
            total += ((nx - ny) ** 2).sum(1).mean((1, 2)).double()
        return total / len(self.convs)


class PretrainedLPIPS(nn.Module):
    """Adapter for the ``lpips`` package (AlexNet features with learned weights)."""

    name = "lpips-alex"
    comparable = True

    def __init__(self):
        super().__init__()
        import lpips as _lpips  # optional dependency

        self.net = _lpips.LPIPS(net="alex", verbose=False)
        self.net.eval()

    @torch.no_grad()
    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        return self.net(x.float(), y.float(), normalize=True).flatten().double()


@lru_cache(maxsize=None)
def get_lpips(backend: str = "auto"):
    """Return a perceptual distance backend.

    ``auto`` prefers the pretrained backend and falls back to random features
    when the ``lpips`` package or its weights are unavailable.
    """
    if backend in ("auto", "pretrained"):
        try:
            return PretrainedLPIPS()
        except Exception as exc:  # import errors, failed weight downloads
            if backend == "pretrained":
                raise ConfigError(f"pretrained LPIPS backend unavailable: {exc}") from exc
            logger.warning("pretrained LPIPS unavailable (%s); using non-comparable random features", exc)
    elif backend != "random":
        raise ConfigError(f"unknown LPIPS backend {backend!r}")
    return RandomFeatureLPIPS()


def lpips(x: Tensor, y: Tensor, backend: str | nn.Module = "auto", reduction: str = "mean") -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 3:
        x, y = x[None], y[None]
    net = get_lpips(backend) if isinstance(backend, str) else backend
    val = net(x, y)
    return val.mean() if reduction == "mean" else val


def lpips_backend_name(backend: str | nn.Module = "auto") -> tuple[str, bool]:
    net = get_lpips(backend) if isinstance(backend, str) else backend
    return net.name, net.comparable
