"""Learnable invisible-watermark backdoor attack with corruption-robust triggers."""

from .anticollapse import AntiCollapseOp, AntiCollapseSet, OpKind, apply_set, corruption_for_eval
from .config import validate_config
from .data import (ImageSet, PoisonedDataset, PoisonMode, PoisonSpec, blend_inject, build_poisoned_dataset,
                   load_dataset, make_synthetic)
from .defense import DefenseConfig, anomaly_index, reverse_trigger, run_defense
from .evaluation import EvalReport, compute_asr, compute_cda, emit_report, evaluate_attack
from .extractor import ExtractorConfig, TriggerExtractor, extractor_loss
from .injector import InjectorConfig, TriggerInjector, injector_loss, load_injector, save_injector
from .joint import JointLossConfig, TrainSchedule, total_loss, train_joint
from .metrics import lpips, psnr, ssim
from .pipeline import run_pipeline
from .victim import VictimConfig, predict, train_victim

__version__ = "0.1.0"
