"""Dataset ingestion, the linear blend trigger and poisoned-set construction."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import pickle
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, IngestionError, ShapeError

logger = logging.getLogger(__name__)

DATASETS = ("cifar10", "gtsrb", "imagenet-subset", "synthetic")
SPLITS = ("train", "test")

CIFAR10_CLASSES = 10
GTSRB_CLASSES = 43
SYNTHETIC_CLASSES = 4
SYNTHETIC_SIZE = 32


@dataclass(frozen=True)
class ImageSet:
    """Immutable batch of labelled images.

    ``images`` is float32 ``(N, C, H, W)`` in [0, 1]; ``labels`` is int64 ``(N,)``.
    Indexing yields ``(image, label)`` pairs so the set doubles as a torch dataset.
    """

    images: Tensor
    labels: Tensor
    num_classes: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError("labels must be a vector matching the image count")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ConfigError(f"label {int(self.labels.max())} >= class count {self.num_classes}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "ImageSet":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageSet(self.images[idx], self.labels[idx], self.num_classes, self.class_names)

    def take(self, n: int | None, seed: int = 0) -> "ImageSet":
        """Seeded uniform subset of ``n`` examples (the whole set when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(self), size=n, replace=False))
        return self.subset(idx)


# ---------------------------------------------------------------------------
# loaders


def load_dataset(
    name: str,
    split: str = "train",
    root: str | Path | None = None,
    *,
    n: int | None = None,
    classes: int = 10,
    image_size: int | None = None,
    seed: int = 0,
    num_classes: int = SYNTHETIC_CLASSES,
    synthetic_kind: str = "gratings",
    workers: int = 4,
) -> ImageSet:
    """Load one split of a supported dataset as an :class:`ImageSet`.

    Parameters
    ----------
    name : str
        One of ``cifar10``, ``gtsrb``, ``imagenet-subset``, ``synthetic``.
    split : str
        ``train`` or ``test``.
    root : path
        Directory holding the dataset files. Unused for ``synthetic``.
    n : int, optional
        Number of examples for ``synthetic``; a seeded subset size otherwise.
    classes : int
        Number of ImageNet classes kept (chosen by a seeded shuffle of class ids).
    image_size : int, optional
        Output resolution for file-based datasets that need resizing
        (GTSRB defaults to 32, ImageNet to 224).
    seed : int
        Seed for synthetic content, ImageNet class choice and subsetting.
    synthetic_kind : str
        ``gratings`` or ``prototypes``, see :func:`make_synthetic`.
    """
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")

    if name == "synthetic":
        return make_synthetic(n if n is not None else 64, split=split, seed=seed, num_classes=num_classes,
                              kind=synthetic_kind)

    if root is None:
        raise IngestionError(f"dataset {name!r} requires a root directory")
    root = Path(root)
    if not root.exists():
        raise IngestionError(f"dataset root {root} does not exist")

    if name == "cifar10":
        data = _load_cifar10(root, split)
    elif name == "gtsrb":
        data = _load_gtsrb(root, split, image_size or 32, workers)
    else:
        data = _load_imagenet_subset(root, split, classes, image_size or 224, seed, workers)
    logger.info("loaded %s/%s: %d examples, %d classes", name, split, len(data), data.num_classes)
    return data.take(n, seed=seed)


def _uint8_to_float(arr: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).float().div_(255.0)


def _load_cifar10(root: Path, split: str) -> ImageSet:
    base = root / "cifar-10-batches-py" if (root / "cifar-10-batches-py").is_dir() else root
    files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    xs, ys = [], []
    for fname in files:
        path = base / fname
        if not path.is_file():
            raise IngestionError(f"CIFAR10 batch file missing: {path}")
        try:
            with open(path, "rb") as fh:
                entry = pickle.load(fh, encoding="latin1")
        except (pickle.UnpicklingError, EOFError) as exc:
            raise IngestionError(f"unreadable CIFAR10 batch {path}: {exc}") from exc
        xs.append(np.asarray(entry["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.extend(entry["labels"])
    names: tuple[str, ...] = ()
    meta = base / "batches.meta"
    if meta.is_file():
        with open(meta, "rb") as fh:
            names = tuple(pickle.load(fh, encoding="latin1")["label_names"])
    return ImageSet(_uint8_to_float(np.concatenate(xs)), torch.tensor(ys, dtype=torch.long), CIFAR10_CLASSES, names)


def _read_image(path: Path, size: int) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8).transpose(2, 0, 1)
    except OSError as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def _read_many(paths: Sequence[Path], size: int, workers: int) -> Tensor:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        arrays = list(pool.map(lambda p: _read_image(p, size), paths))
    if not arrays:
        return torch.empty(0, 3, size, size)
    return _uint8_to_float(np.stack(arrays))


def _load_gtsrb(root: Path, split: str, size: int, workers: int) -> ImageSet:
    # Layout of the published archives: GTSRB/Final_Training/Images/<cls>/GT-<cls>.csv
    # and GTSRB/Final_Test/Images/*.ppm with GT-final_test.csv.
    base = root / "GTSRB" if (root / "GTSRB").is_dir() else root
    paths: list[Path] = []
    labels: list[int] = []
    if split == "train":
        img_root = base / "Final_Training" / "Images"
        if not img_root.is_dir():
            raise IngestionError(f"GTSRB training images missing under {img_root}")
        for cls_dir in sorted(p for p in img_root.iterdir() if p.is_dir()):
            label = int(cls_dir.name)
            for ppm in sorted(cls_dir.glob("*.ppm")):
                paths.append(ppm)
                labels.append(label)
    else:
        img_root = base / "Final_Test" / "Images"
        candidates = [root / "GT-final_test.csv", base / "GT-final_test.csv", img_root / "GT-final_test.csv"]
        gt = next((c for c in candidates if c.is_file()), None)
        if not img_root.is_dir() or gt is None:
            raise IngestionError(f"GTSRB test images or GT-final_test.csv missing under {root}")
        with open(gt, newline="") as fh:
            for row in csv.DictReader(fh, delimiter=";"):
                paths.append(img_root / row["Filename"])
                labels.append(int(row["ClassId"]))
    if not paths:
        raise IngestionError(f"no GTSRB images found under {root}")
    return ImageSet(_read_many(paths, size, workers), torch.tensor(labels, dtype=torch.long), GTSRB_CLASSES)


def imagenet_class_choice(all_classes: Sequence[str], k: int, seed: int) -> list[str]:
    """Fixed seeded shuffle of the sorted class ids, keeping the first ``k``."""
    ordered = sorted(all_classes)
    if k > len(ordered):
        raise ConfigError(f"requested {k} classes but only {len(ordered)} available")
    perm = np.random.default_rng(seed).permutation(len(ordered))
    return sorted(ordered[i] for i in perm[:k])


def _load_imagenet_subset(root: Path, split: str, k: int, size: int, seed: int, workers: int) -> ImageSet:
    split_dir = root / ("train" if split == "train" else "val")
    if not split_dir.is_dir():
        raise IngestionError(f"ImageNet split directory missing: {split_dir}")
    all_classes = [p.name for p in split_dir.iterdir() if p.is_dir()]
    chosen = imagenet_class_choice(all_classes, k, seed)
    paths, labels = [], []
    for label, wnid in enumerate(chosen):
        files = sorted(f for f in (split_dir / wnid).iterdir() if f.suffix.lower() in {".jpeg", ".jpg", ".png"})
        paths.extend(files)
        labels.extend([label] * len(files))
    if not paths:
        raise IngestionError(f"no images found for the chosen classes under {split_dir}")
    return ImageSet(_read_many(paths, size, workers), torch.tensor(labels, dtype=torch.long), k, tuple(chosen))


def make_synthetic(n: int, split: str = "train", seed: int = 0, num_classes: int = SYNTHETIC_CLASSES,
                   size: int = SYNTHETIC_SIZE, kind: str = "gratings") -> ImageSet:
    """Seeded procedural images.

    Parameters
    ----------
    kind : {"gratings", "prototypes"}
        ``gratings``: each class is a grating with its own orientation;
        frequency, phase, colours and a smooth background vary per image so the
        task is learnable but not trivial. Neighbouring orientations are
        similar, so the classes are ordered on a circle.
        ``prototypes``: each class is a random low-frequency colour texture
        (shared by both splits) seen under random gain, offset, shift and
        noise. The classes are unordered and roughly equidistant.
    """
    if kind not in ("gratings", "prototypes"):
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    split_offset = 0 if split == "train" else 1_000_003
    rng = np.random.default_rng(seed + split_offset)
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    if kind == "prototypes":
        protos = _prototypes(np.random.default_rng([seed, 77]), num_classes, size)
        for i, label in enumerate(labels):
            dy, dx = rng.integers(-2, 3, size=2)
            img = np.roll(protos[label], (dy, dx), axis=(1, 2))
            gain = rng.uniform(0.6, 1.0)
            offset = rng.uniform(0.0, 1.0 - gain, size=3)
            img = gain * img + offset[:, None, None] + rng.normal(0, 0.04, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
        return ImageSet(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)), num_classes,
                        tuple(f"class{k}" for k in range(num_classes)))
    for i, label in enumerate(labels):
        theta = np.pi * label / num_classes + rng.normal(0, 0.08)
        freq = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        fg = rng.uniform(0.2, 1.0, size=3)
        bg = rng.uniform(0.0, 0.6, size=3)
        tilt = rng.normal(0, 0.15, size=2)
        background = np.clip(bg[:, None, None] + tilt[0] * xx + tilt[1] * yy, 0, 1)
        amp = rng.uniform(0.35, 0.7)
        img = (1 - amp) * background + amp * wave[None] * fg[:, None, None]
        img += rng.normal(0, 0.02, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageSet(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)), num_classes,
                    tuple(f"class{k}" for k in range(num_classes)))


def _prototypes(rng: np.random.Generator, k: int, size: int) -> np.ndarray:
    # 8x8 random colour fields upsampled bilinearly and stretched to [0, 1]
    coarse = torch.from_numpy(rng.uniform(0, 1, size=(k, 3, 8, 8)).astype(np.float32))
    fine = torch.nn.functional.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False).numpy()
    lo = fine.min(axis=(1, 2, 3), keepdims=True)
    hi = fine.max(axis=(1, 2, 3), keepdims=True)
    return (fine - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# poisoning


def blend_inject(x: Tensor, m: Tensor, lam) -> Tensor:
    """Linear blend ``x * (1 - lam) + m * lam``.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``m`` must broadcast over the
    spatial shape (a single-channel map is replicated over channels). ``lam``
    may be a scalar or a tensor broadcastable to ``x`` (e.g. a patch mask).
    """
    if m.ndim < 2 or m.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"trigger spatial shape {tuple(m.shape[-2:])} != image {tuple(x.shape[-2:])}")
    if m.ndim >= 3 and m.shape[-3] not in (1, x.shape[-3]):
        raise ShapeError(f"trigger has {m.shape[-3]} channels, image has {x.shape[-3]}")
    if not torch.is_tensor(lam) and not 0.0 <= lam <= 1.0:
        raise ConfigError(f"blend factor {lam} outside [0, 1]")
    out = x * (1 - lam) + m * lam
    return out.clamp(0.0, 1.0)


class PoisonMode(str, enum.Enum):
    LEARNED_INJECTOR = "learned_injector"
    LINEAR_BLEND = "linear_blend"


@dataclass
class PoisonSpec:
    ratio: float = 0.1
    target_label: int = 0
    blend_factor: float = 0.2
    mode: PoisonMode = PoisonMode.LEARNED_INJECTOR

    def __post_init__(self):
        self.mode = PoisonMode(self.mode)

    def problems(self, num_classes: int | None = None) -> list[tuple[str, str]]:
        out = []
        if not 0.0 <= self.ratio <= 1.0:
            out.append(("ratio", "ratio out of [0,1]"))
        if not 0.0 <= self.blend_factor <= 1.0:
            out.append(("blend_factor", "blend factor out of [0,1]"))
        if self.target_label < 0 or (num_classes is not None and self.target_label >= num_classes):
            out.append(("target_label", f"target label {self.target_label} invalid for {num_classes} classes"))
        return out

    def validate(self, num_classes: int | None = None) -> None:
        problems = self.problems(num_classes)
        if problems:
            raise ConfigError("invalid poison spec", problems)


@dataclass(frozen=True)
class PoisonedDataset:
    data: ImageSet
    poison_mask: Tensor
    original_labels: Tensor
    spec: PoisonSpec
    seed: int
    poisoned_indices: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.data)

    @property
    def images(self) -> Tensor:
        return self.data.images

    @property
    def labels(self) -> Tensor:
        return self.data.labels

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": self.spec.ratio,
            "target_label": self.spec.target_label,
            "blend_factor": self.spec.blend_factor,
            "mode": self.spec.mode.value,
            "n": len(self),
            "poisoned_indices": list(self.poisoned_indices),
        }

    def save_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1))


def poison_count(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + 0.5))


def select_poison_indices(n: int, ratio: float, seed: int) -> np.ndarray:
    """Uniform selection without replacement of ``round(ratio * n)`` indices."""
    k = poison_count(ratio, n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False))


def build_poisoned_dataset(
    clean: ImageSet,
    spec: PoisonSpec,
    injector=None,
    watermark: Optional[Tensor] = None,
    seed: int = 0,
    trigger: Optional[Callable[[Tensor], Tensor]] = None,
    batch_size: int = 256,
) -> PoisonedDataset:
    """Replace a seeded random fraction of ``clean`` by triggered, target-labelled copies.

    The trigger is chosen by ``spec.mode``: the trained ``injector`` for
    ``LEARNED_INJECTOR`` or :func:`blend_inject` with ``watermark`` for
    ``LINEAR_BLEND``. An explicit ``trigger`` callable overrides both (used by
    the patch baseline).
    """
    spec.validate(clean.num_classes)
    if trigger is None:
        trigger = make_trigger(spec, injector=injector, watermark=watermark)

    idx = select_poison_indices(len(clean), spec.ratio, seed)
    images = clean.images.clone()
    labels = clean.labels.clone()
    if len(idx):
        sel = torch.from_numpy(idx)
        with torch.no_grad():
            for start in range(0, len(sel), batch_size):
                chunk = sel[start:start + batch_size]
                images[chunk] = trigger(clean.images[chunk]).to(images.dtype)
        labels[sel] = spec.target_label
    mask = torch.zeros(len(clean), dtype=torch.bool)
    mask[torch.from_numpy(idx)] = True
    data = ImageSet(images, labels, clean.num_classes, clean.class_names)
    return PoisonedDataset(data, mask, clean.labels.clone(), spec, seed, tuple(int(i) for i in idx))


def make_trigger(spec: PoisonSpec, injector=None, watermark: Optional[Tensor] = None) -> Callable[[Tensor], Tensor]:
    """Return the image-batch -> poisoned-batch function selected by ``spec.mode``."""
    if spec.mode is PoisonMode.LEARNED_INJECTOR:
        if injector is None:
            raise ConfigError("LEARNED_INJECTOR mode requires a trained injector")

        def _learned(x: Tensor) -> Tensor:
            was_training = injector.training
            injector.eval()
            try:
                with torch.no_grad():
                    return injector(x)
            finally:
                injector.train(was_training)

        return _learned
    if watermark is None:
        if injector is None:
            raise ConfigError("LINEAR_BLEND mode requires a watermark")
        watermark = injector.watermark.detach()
    m = watermark.detach()
    return lambda x: blend_inject(x, m, spec.blend_factor)
