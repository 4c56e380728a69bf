"""Clean accuracy / attack success under corruption conditions, stealth metrics
and report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
from torch import Tensor

from .anticollapse import EVAL_CONDITIONS, canonical_condition, corruption_for_eval
from .data import ImageSet
from .errors import ConfigError
from .metrics import lpips, lpips_backend_name, psnr, ssim
from .victim import predict

CSV_HEADER = ["method", "dataset", "metric", *EVAL_CONDITIONS, "AVG"]


def _as_trigger(trigger) -> Callable[[Tensor], Tensor]:
    if hasattr(trigger, "watermark") and callable(trigger):
        injector = trigger

        def _inject(x):
            injector.eval()
            with torch.no_grad():
                return injector(x)

        return _inject
    return trigger


def _predict_condition(model, images: Tensor, condition: str, seed: int, batch_size: int,
                       transform: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    preds = []
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        if transform is not None:
            x = transform(x)
        x = corruption_for_eval(condition, x, seed=seed, offset=start)
        preds.append(predict(model, x, batch_size))
    return torch.cat(preds)


def compute_cda(model, test: ImageSet, condition: str = "None", seed: int = 0, batch_size: int = 256) -> float:
    """Percentage of (corrupted) clean test images classified correctly."""
    if len(test) == 0:
        raise ConfigError("empty test set")
    preds = _predict_condition(model, test.images, canonical_condition(condition), seed, batch_size)
    return 100.0 * float((preds == test.labels).double().mean())


def asr_pool(test: ImageSet, target: int) -> ImageSet:
    """Test images whose true label differs from the target."""
    return test.subset(torch.nonzero(test.labels != target).flatten())


def compute_asr(model, test: ImageSet, trigger, target: int, condition: str = "None", seed: int = 0,
                batch_size: int = 256) -> float:
    """Percentage of triggered-then-corrupted non-target test images predicted as ``target``.

    ``trigger`` is a trained injector or any batch -> batch callable.
    """
    pool = asr_pool(test, target)
    if len(pool) == 0:
        raise ConfigError("no non-target test images for ASR")
    preds = _predict_condition(model, pool.images, canonical_condition(condition), seed, batch_size,
                               transform=_as_trigger(trigger))
    return 100.0 * float((preds == target).double().mean())


@dataclass
class EvalReport:
    cda: dict[str, float] = field(default_factory=dict)
    asr: dict[str, float] = field(default_factory=dict)
    stealth: Optional[dict] = None
    method: str = "spy-watermark"
    dataset: str = ""
    extra: dict = field(default_factory=dict)

    @staticmethod
    def _avg(values: dict[str, float]) -> float:
        return sum(values[c] for c in EVAL_CONDITIONS) / len(EVAL_CONDITIONS)

    @property
    def avg_cda(self) -> float:
        return self._avg(self.cda)

    @property
    def avg_asr(self) -> float:
        return self._avg(self.asr)

    def complete(self) -> bool:
        return all(c in self.cda and c in self.asr for c in EVAL_CONDITIONS)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.complete():
            d["avg_cda"] = self.avg_cda
            d["avg_asr"] = self.avg_asr
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(cda=dict(d["cda"]), asr=dict(d["asr"]), stealth=d.get("stealth"),
                   method=d.get("method", "spy-watermark"), dataset=d.get("dataset", ""),
                   extra=dict(d.get("extra", {})))

    def csv_rows(self) -> list[list]:
        rows = []
        for metric, values in (("CDA", self.cda), ("ASR", self.asr)):
            rows.append([self.method, self.dataset, metric, *[values[c] for c in EVAL_CONDITIONS],
                         self._avg(values)])
        return rows


def emit_report(report: EvalReport, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.csv`` (columns None, RM, Ro, Noise, RS, AVG)."""
    if not report.complete():
        raise ConfigError("report lacks some condition columns")
    base = Path(path)
    if base.suffix in (".json", ".csv"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = base.with_suffix(".json"), base.with_suffix(".csv")
    json_path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(report.csv_rows())
    return json_path, csv_path


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


@torch.no_grad()
def stealth_metrics(clean: Tensor, poisoned: Tensor, lpips_backend: str = "auto") -> dict:
    name, comparable = lpips_backend_name(lpips_backend)
    return {
        "psnr": float(psnr(clean, poisoned)),
        "ssim": float(ssim(clean, poisoned)),
        "lpips": float(lpips(clean, poisoned, backend=lpips_backend)),
        "lpips_backend": name,
        "lpips_comparable": comparable,
    }


def evaluate_attack(model, test: ImageSet, trigger, target: int, seed: int = 0,
                    conditions: Sequence[str] = EVAL_CONDITIONS, stealth_samples: int | None = 500,
                    lpips_backend: str = "auto", method: str = "spy-watermark", dataset: str = "") -> EvalReport:
    """CDA and ASR for every condition plus stealth metrics on a test sample."""
    report = EvalReport(method=method, dataset=dataset)
    for cond in conditions:
        name = canonical_condition(cond)
        report.cda[name] = compute_cda(model, test, name, seed)
        report.asr[name] = compute_asr(model, test, trigger, target, name, seed)
    if stealth_samples:
        clean = test.images[:stealth_samples]
        poisoned = torch.cat([_as_trigger(trigger)(clean[i:i + 256]) for i in range(0, len(clean), 256)])
        report.stealth = stealth_metrics(clean, poisoned, lpips_backend)
    return report
