"""Defenses against sticker attacks on traffic-sign classifiers."""
from stickerguard.classifier import ClassifierModel, TrainConfig, classify, load_model, predict, save_model, train
from stickerguard.defenses import Reconstruct, Remap, RemapMode, parallel_apply, reconstruct, remap, sequential_apply
from stickerguard.evaluation import MetricsReport, ScenarioConfig, run_baseline, run_scenario
from stickerguard.fusion import majority_vote, softmax_fusion
from stickerguard.imaging import load_png, save_png
from stickerguard.masks import MaskSetStore, RandomMaskConfig, build_mask_set_store, random_masks
from stickerguard.scenes import AttackBudget, Sample, generate_dataset, generate_sign, surrogate_attack

__version__ = "0.1.0"

__all__ = [
    "AttackBudget", "ClassifierModel", "MaskSetStore", "MetricsReport", "RandomMaskConfig", "Reconstruct",
    "Remap", "RemapMode", "Sample", "ScenarioConfig", "TrainConfig", "build_mask_set_store", "classify",
    "generate_dataset", "generate_sign", "load_model", "load_png", "majority_vote", "parallel_apply", "predict",
    "random_masks", "reconstruct", "remap", "run_baseline", "run_scenario", "save_model", "save_png",
    "sequential_apply", "softmax_fusion", "surrogate_attack", "train",
]
