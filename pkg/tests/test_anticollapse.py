import itertools
import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from spy_watermark import anticollapse as ac
from spy_watermark.anticollapse import (AntiCollapseOp, AntiCollapseSet, OpKind, apply_set,
                                        corruption_for_eval, gate_draws)
from spy_watermark.errors import ConfigError


def positive_images(n=4, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return 0.05 + 0.95 * torch.rand(n, 3, size, size, generator=g)


def smooth_images(n=4, size=32):
    yy, xx = torch.meshgrid(torch.linspace(-1, 1, size), torch.linspace(-1, 1, size), indexing="ij")
    imgs = [0.5 + 0.4 * torch.sin(2.0 * (xx * math.cos(k) + yy * math.sin(k)) + k) for k in range(n)]
    return torch.stack(imgs)[:, None].expand(n, 3, size, size).clone()


def zeroed_pixels(x):
    return (x == 0).all(dim=1).flatten(1).sum(1)


def test_zero_probability_is_identity():
    x = positive_images()
    s = AntiCollapseSet([AntiCollapseOp(k, probability=0.0) for k in ac.DEFAULT_ORDER], seed=1)
    for step in range(20):
        assert torch.equal(apply_set(s, x, step), x)


def test_mask_quarter_zeroes_exactly_256_pixels():
    x = positive_images(6)
    s = AntiCollapseSet([AntiCollapseOp(OpKind.RANDOM_MASK, probability=1.0, mask_fraction=0.25)])
    out = apply_set(s, x, step=3)
    assert zeroed_pixels(out).tolist() == [256] * 6


@given(st.floats(0.01, 0.99), st.integers(4, 40), st.integers(4, 40))
@settings(max_examples=60, deadline=None)
def test_mask_area_exactness(fraction, h, w):
    x = 0.5 + 0.5 * torch.rand(2, 3, h, w)
    gens = [torch.Generator().manual_seed(i) for i in range(2)]
    out = ac.random_mask(x, fraction, gens)
    expected = math.floor(fraction * h * w + 0.5)
    assert zeroed_pixels(out).tolist() == [expected] * 2


def test_rescale_half_goes_through_16x16(monkeypatch):
    sizes = []
    real = F.interpolate

    def spy(t, size=None, **kw):
        sizes.append(tuple(size))
        return real(t, size=size, **kw)

    monkeypatch.setattr(ac.F, "interpolate", spy)
    op = AntiCollapseOp(OpKind.RESCALE, probability=1.0, scale_range=(0.5, 0.5))
    out = apply_set(AntiCollapseSet([op]), positive_images(1), step=0)
    assert sizes == [(16, 16), (32, 32)]
    assert out.shape == (1, 3, 32, 32)


@pytest.mark.parametrize("subset", [c for r in range(1, 5) for c in itertools.combinations(ac.DEFAULT_ORDER, r)])
def test_shape_and_range_preserved(subset):
    x = positive_images(3)
    s = AntiCollapseSet([AntiCollapseOp(k, probability=1.0) for k in subset], seed=2)
    out = apply_set(s, x, step=11)
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1


def test_seeded_determinism():
    x = positive_images(4)
    s = AntiCollapseSet(seed=7)
    assert torch.equal(apply_set(s, x, 5), apply_set(s, x, 5))
    outs = [apply_set(s, x, step) for step in range(6)]
    assert any(not torch.equal(outs[0], o) for o in outs[1:])


@pytest.mark.parametrize("p", [0.5, 0.2])
def test_bernoulli_acceptance_rate_within_three_sigma(p):
    s = AntiCollapseSet([AntiCollapseOp(OpKind.NOISE, probability=p), AntiCollapseOp(OpKind.ROTATE, probability=p)],
                        seed=3)
    n = 1000
    draws = [gate_draws(s, step) for step in range(n)]
    sigma = math.sqrt(p * (1 - p) / n)
    for k in range(2):
        rate = sum(d[k] for d in draws) / n
        assert abs(rate - p) <= 3 * sigma
    # different steps give differing draws
    assert len({tuple(d) for d in draws}) > 1


def test_rotation_zero_is_identity():
    x = smooth_images()
    assert (ac.rotate(x, torch.zeros(4)) - x).abs().max() < 1e-6


def test_rotation_round_trip_recovers_centre():
    x = smooth_images()
    angles = torch.tensor([15.0, -10.0, 7.5, -15.0])
    back = ac.rotate(ac.rotate(x, angles), -angles)
    c = slice(8, 24)
    assert (back[..., c, c] - x[..., c, c]).abs().mean() < 2e-2


def test_masking_blocks_gradient_only_on_masked_pixels():
    x = positive_images(2).requires_grad_(True)
    s = AntiCollapseSet([AntiCollapseOp(OpKind.RANDOM_MASK, probability=1.0)])
    out = apply_set(s, x, 0)
    out.sum().backward()
    masked = (out == 0).all(1, keepdim=True).expand_as(x)
    assert (x.grad[masked] == 0).all() and (x.grad[~masked] != 0).all()


def test_invalid_op_parameters():
    with pytest.raises(ConfigError):
        AntiCollapseSet([AntiCollapseOp(OpKind.RESCALE, scale_range=(0.25, 2.0))]).validate()
    with pytest.raises(ConfigError):
        AntiCollapseSet([AntiCollapseOp(OpKind.NOISE, probability=1.5)]).validate()
    with pytest.raises(ConfigError):
        AntiCollapseSet([]).validate()


# ---------------------------------------------------------------- eval conditions


def test_eval_none_and_zero_noise_are_identity():
    x = positive_images()
    assert torch.equal(corruption_for_eval("None", x), x)
    zero = AntiCollapseOp(OpKind.NOISE, probability=1.0, sigma=0.0)
    assert torch.equal(corruption_for_eval("Noise", x, op=zero), x)


def test_eval_masks_differ_per_image():
    x = positive_images(10)
    out = corruption_for_eval("RM", x, seed=0)
    assert zeroed_pixels(out).tolist() == [256] * 10
    masks = (out == 0).all(1)
    assert len({m.flatten().nonzero().flatten()[0].item() for m in masks}) > 1


def test_eval_is_batch_independent():
    x = positive_images(8)
    whole = corruption_for_eval("Ro", x, seed=4)
    parts = torch.cat([corruption_for_eval("Ro", x[:3], seed=4, offset=0),
                       corruption_for_eval("Ro", x[3:], seed=4, offset=3)])
    assert torch.equal(whole, parts)


@pytest.mark.parametrize("kind", ["RM", "Ro", "Noise", "RS"])
def test_eval_conditions_deterministic_and_bounded(kind):
    x = positive_images(3)
    a, b = corruption_for_eval(kind, x, seed=1), corruption_for_eval(kind, x, seed=1)
    assert torch.equal(a, b) and a.shape == x.shape
    assert a.min() >= 0 and a.max() <= 1
    assert not torch.equal(a, x)


def test_eval_unknown_kind():
    with pytest.raises(ConfigError):
        corruption_for_eval("jpeg", positive_images(1))
