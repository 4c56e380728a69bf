import json
import math

import numpy as np
import pytest
import torch
from torch import nn

from spy_watermark.data import PoisonSpec, build_poisoned_dataset, make_synthetic, select_poison_indices
from spy_watermark.errors import ConfigError, ConfigMismatchError, NumericError, ShapeError
from spy_watermark.victim import (VictimConfig, build_victim, cosine_lr, load_victim, predict, train_victim)


class OneHot(nn.Module):
    """Emits a one-hot logit vector whose hot index is read off the first pixel."""

    def __init__(self, k):
        super().__init__()
        self.k = k

    def forward(self, x):
        hot = (x[:, 0, 0, 0] * 10).round().long()
        return nn.functional.one_hot(hot, self.k).float()


def test_cosine_schedule_formula():
    epochs = 30
    for e in range(epochs):
        expected = 0.1 * (1 + math.cos(math.pi * e / epochs)) / 2
        assert abs(cosine_lr(0.1, e, epochs) - expected) <= 1e-9
    assert cosine_lr(0.1, 0, epochs) == 0.1
    assert cosine_lr(0.1, epochs - 1, epochs) < cosine_lr(0.1, 0, epochs)


def test_logged_learning_rates_follow_schedule(tmp_path):
    data = make_synthetic(32)
    cfg = VictimConfig(epochs=3, batch_size=16)
    res = train_victim(data, cfg, out_dir=tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "victim_metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2]
    assert [r["lr"] for r in lines] == [cosine_lr(0.1, e, 3) for e in range(3)]
    assert set(lines[0]) >= {"loss", "acc"}
    assert res.checkpoint == tmp_path / "victim.ckpt"


def test_predict_contract_and_determinism():
    model = build_victim(VictimConfig(), 4)
    x = torch.rand(7, 3, 32, 32)
    a, b = predict(model, x), predict(model, x)
    assert a.shape == (7,) and a.dtype == torch.long
    assert ((a >= 0) & (a < 4)).all()
    assert torch.equal(a, b)
    with pytest.raises(ShapeError):
        predict(model, torch.rand(2, 3, 16, 16))


def test_one_hot_stub_returns_hot_index():
    x = torch.zeros(5, 3, 4, 4)
    x[:, 0, 0, 0] = torch.tensor([0.3, 0.0, 0.9, 0.1, 0.5])
    assert predict(OneHot(10), x).tolist() == [3, 0, 9, 1, 5]


def test_clean_batches_identical_until_first_poisoned_update():
    clean = make_synthetic(16, seed=2)
    cfg = VictimConfig(epochs=1, batch_size=8, seed=0)
    perm = torch.from_numpy(np.random.default_rng([cfg.seed, 0]).permutation(16))
    first_batch = set(perm[:8].tolist())
    # pick a poisoning seed whose poisoned examples all fall into the second batch
    seed = next(s for s in range(500) if not first_batch & set(select_poison_indices(16, 0.1, s).tolist()))
    runs = {}
    for ratio in (0.0, 0.1):
        pd = build_poisoned_dataset(clean, PoisonSpec(ratio=ratio, mode="linear_blend"),
                                    watermark=torch.ones(1, 32, 32), seed=seed)
        seen = []
        train_victim(pd, cfg, batch_callback=lambda e, b, idx, logits: seen.append((idx.clone(), logits)))
        runs[ratio] = seen
    (idx0, l0), (idx1, l1) = runs[0.0][0], runs[0.1][0]
    assert torch.equal(idx0, idx1) and torch.equal(l0, l1)
    assert not torch.equal(runs[0.0][1][1], runs[0.1][1][1])


def test_zero_ratio_trains_plain_classifier():
    data = make_synthetic(256, seed=0)
    pd = build_poisoned_dataset(data, PoisonSpec(ratio=0.0, mode="linear_blend"),
                                watermark=torch.ones(1, 32, 32), seed=0)
    res = train_victim(pd, VictimConfig(epochs=4, batch_size=32))
    test = make_synthetic(128, "test", seed=0)
    acc = float((predict(res.model, test.images) == test.labels).double().mean())
    assert acc > 0.5


def test_divergence_aborts():
    with pytest.raises(NumericError):
        train_victim(make_synthetic(64), VictimConfig(epochs=6, lr=1e6, batch_size=16, augment=False))


def test_invalid_config():
    with pytest.raises(ConfigError):
        train_victim(make_synthetic(8), VictimConfig(epochs=0))
    with pytest.raises(ConfigError):
        VictimConfig.profile("huge")
    paper = VictimConfig.profile("paper")
    assert (paper.architecture, paper.epochs, paper.lr, paper.momentum) == ("resnet18", 100, 0.1, 0.9)


def test_checkpoint_round_trip(tmp_path):
    data = make_synthetic(16)
    cfg = VictimConfig(epochs=1, batch_size=8)
    res = train_victim(data, cfg, out_dir=tmp_path)
    loaded = load_victim(res.checkpoint, expected=cfg)
    x = torch.rand(4, 3, 32, 32)
    assert torch.equal(predict(res.model, x), predict(loaded, x))
    with pytest.raises(ConfigMismatchError):
        load_victim(res.checkpoint, expected=VictimConfig(epochs=2, batch_size=8))


def test_resnet18_builds_for_small_images():
    model = build_victim(VictimConfig(architecture="resnet18"), 10)
    assert predict(model, torch.rand(2, 3, 32, 32)).shape == (2,)
