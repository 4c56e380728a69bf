import json
import pickle

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from spy_watermark.data import (ImageSet, PoisonMode, PoisonSpec, blend_inject, build_poisoned_dataset,
                                imagenet_class_choice, load_dataset, make_synthetic, poison_count)
from spy_watermark.errors import ConfigError, IngestionError, ShapeError


def test_synthetic_is_seeded_and_in_range():
    a = load_dataset("synthetic", "train", n=64, seed=3)
    b = load_dataset("synthetic", "train", n=64, seed=3)
    assert len(a) == 64 and a.num_classes == 4 and a.image_shape == (3, 32, 32)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert a.images.min() >= 0 and a.images.max() <= 1
    test = load_dataset("synthetic", "test", n=64, seed=3)
    assert not torch.equal(a.images, test.images)


def test_prototype_classes_share_templates_across_splits():
    train = load_dataset("synthetic", "train", n=200, seed=1, num_classes=5, synthetic_kind="prototypes")
    test = make_synthetic(200, "test", seed=1, num_classes=5, kind="prototypes")
    assert train.images.min() >= 0 and train.images.max() <= 1

    def centroids(d):
        return torch.stack([d.images[d.labels == k].mean(0) for k in range(5)]).flatten(1)

    # nearest train centroid classifies held-out images well above chance
    dist = torch.cdist(test.images.flatten(1), centroids(train))
    assert (dist.argmin(1) == test.labels).float().mean() > 0.8
    with pytest.raises(ConfigError):
        make_synthetic(4, kind="stripes")


def test_unknown_dataset_is_config_error():
    with pytest.raises(ConfigError):
        load_dataset("mnist", "train", root=".")


def test_missing_files_are_ingestion_errors(tmp_path):
    with pytest.raises(IngestionError):
        load_dataset("cifar10", "train", root=tmp_path)
    with pytest.raises(IngestionError):
        load_dataset("gtsrb", "train", root=tmp_path)
    with pytest.raises(IngestionError):
        load_dataset("imagenet-subset", "train", root=tmp_path / "nope")


def _fake_cifar(root, n_per_batch=5):
    base = root / "cifar-10-batches-py"
    base.mkdir()
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        entry = {"data": rng.integers(0, 256, size=(n_per_batch, 3072), dtype=np.uint8),
                 "labels": list(rng.integers(0, 10, size=n_per_batch))}
        with open(base / name, "wb") as fh:
            pickle.dump(entry, fh)
    return base


def test_cifar10_archive_decoding(tmp_path):
    base = _fake_cifar(tmp_path)
    train = load_dataset("cifar10", "train", root=tmp_path)
    assert len(train) == 25 and train.num_classes == 10 and train.image_shape == (3, 32, 32)
    with open(base / "data_batch_1", "rb") as fh:
        raw = pickle.load(fh)
    first = torch.from_numpy(raw["data"][0].reshape(3, 32, 32).astype(np.float32) / 255)
    assert torch.equal(train.images[0], first)
    assert len(load_dataset("cifar10", "test", root=tmp_path)) == 5


def test_imagenet_subset_keeps_configured_classes(tmp_path):
    from PIL import Image

    for k in range(15):
        d = tmp_path / "train" / f"n{k:08d}"
        d.mkdir(parents=True)
        for j in range(2):
            Image.new("RGB", (40, 30), color=(k * 10, j * 50, 0)).save(d / f"img{j}.JPEG")
    data = load_dataset("imagenet-subset", "train", root=tmp_path, classes=10, image_size=64, seed=1)
    assert data.num_classes == 10 and len(data) == 20
    assert data.image_shape == (3, 64, 64)
    assert set(data.class_names) == set(imagenet_class_choice([f"n{k:08d}" for k in range(15)], 10, 1))
    assert set(data.labels.tolist()) == set(range(10))


# ---------------------------------------------------------------- blend


def test_blend_identity_cases_are_bit_exact():
    x = torch.rand(2, 3, 8, 8)
    m = torch.rand(1, 8, 8)
    assert torch.equal(blend_inject(x, m, 0.0), x)
    assert torch.equal(blend_inject(x, m, 1.0), m.expand_as(x))


def test_blend_arithmetic():
    x = torch.full((3, 4, 4), 0.5)
    m = torch.ones(1, 4, 4)
    assert torch.allclose(blend_inject(x, m, 0.2), torch.full_like(x, 0.6), atol=1e-7)


def test_blend_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        blend_inject(torch.rand(3, 8, 8), torch.rand(1, 4, 4), 0.5)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_blend_is_affine_in_lambda(l1, l2, l3):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 6, 6, generator=g, dtype=torch.float64)
    m = torch.rand(1, 6, 6, generator=g, dtype=torch.float64)
    b1, b2, b3 = (blend_inject(x, m, lam) for lam in (l1, l2, l3))
    # collinearity: (b2 - b1) * (l3 - l1) == (b3 - b1) * (l2 - l1)
    assert torch.allclose((b2 - b1) * (l3 - l1), (b3 - b1) * (l2 - l1), atol=1e-6)


# ---------------------------------------------------------------- poisoning


@given(st.floats(0, 1), st.integers(1, 300))
@settings(max_examples=40, deadline=None)
def test_poison_count_property(ratio, n):
    clean = ImageSet(torch.rand(n, 1, 4, 4), torch.randint(0, 3, (n,)), 3)
    pd = build_poisoned_dataset(clean, PoisonSpec(ratio=ratio, mode="linear_blend"),
                                watermark=torch.zeros(1, 4, 4), seed=1)
    assert int(pd.poison_mask.sum()) == poison_count(ratio, n)
    assert abs(int(pd.poison_mask.sum()) - ratio * n) <= 1


def test_ratio_count_on_fifty_thousand():
    assert poison_count(0.1, 50000) == 5000


def test_ratio_zero_is_identity():
    clean = make_synthetic(32)
    pd = build_poisoned_dataset(clean, PoisonSpec(ratio=0.0, mode="linear_blend"),
                                watermark=torch.ones(1, 32, 32), seed=0)
    assert not pd.poison_mask.any()
    assert torch.equal(pd.images, clean.images) and torch.equal(pd.labels, clean.labels)


def test_ratio_one_relabels_everything():
    clean = make_synthetic(64)
    pd = build_poisoned_dataset(clean, PoisonSpec(ratio=1.0, target_label=0, mode="linear_blend"),
                                watermark=torch.ones(1, 32, 32), seed=0)
    assert pd.poison_mask.all() and (pd.labels == 0).all()
    assert torch.equal(pd.original_labels, clean.labels)


def test_selection_deterministic_and_non_poisoned_untouched():
    clean = make_synthetic(200)
    spec = PoisonSpec(ratio=0.3, target_label=1, mode="linear_blend")
    m = torch.ones(1, 32, 32)
    a = build_poisoned_dataset(clean, spec, watermark=m, seed=5)
    b = build_poisoned_dataset(clean, spec, watermark=m, seed=5)
    c = build_poisoned_dataset(clean, spec, watermark=m, seed=6)
    assert torch.equal(a.poison_mask, b.poison_mask)
    assert not torch.equal(a.poison_mask, c.poison_mask)
    keep = ~a.poison_mask
    assert torch.equal(a.labels[keep], clean.labels[keep])
    assert torch.equal(a.images[keep], clean.images[keep])
    assert (a.labels[a.poison_mask] == 1).all()


def test_learned_mode_requires_injector():
    with pytest.raises(ConfigError):
        build_poisoned_dataset(make_synthetic(8), PoisonSpec(mode=PoisonMode.LEARNED_INJECTOR), seed=0)


def test_invalid_spec():
    with pytest.raises(ConfigError):
        PoisonSpec(ratio=1.5).validate()
    with pytest.raises(ConfigError):
        PoisonSpec(target_label=7).validate(num_classes=4)


def test_manifest_json(tmp_path):
    pd = build_poisoned_dataset(make_synthetic(40), PoisonSpec(ratio=0.25, mode="linear_blend"),
                                watermark=torch.ones(1, 32, 32), seed=9)
    pd.save_manifest(tmp_path / "m.json")
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["seed"] == 9 and m["ratio"] == 0.25 and m["mode"] == "linear_blend" and m["target_label"] == 0
    assert m["poisoned_indices"] == torch.nonzero(pd.poison_mask).flatten().tolist()
