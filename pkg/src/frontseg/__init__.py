"""Attention U-Net segmentation of glacier calving fronts on a small numpy autodiff engine."""
from .attnet import AttentionUNet, ModelConfig, build_model
from .data import SynthConfig, load_dataset, split_counts, split_dataset, synth_generate, write_dataset
from .estimator import AttentionUNetSegmenter, FrontPreprocessor
from .imageproc import FrontMask, SampleImage, augment_expand, edt, preprocess_pair
from .losses import MetricsRecord, bce, dice_binary, iou, soft_dice, wbce, wdice, weight_map
from .tensor import Tensor, grad_check
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AttentionUNet",
    "AttentionUNetSegmenter",
    "FrontMask",
    "FrontPreprocessor",
    "MetricsRecord",
    "ModelConfig",
    "SampleImage",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "augment_expand",
    "bce",
    "build_model",
    "dice_binary",
    "edt",
    "evaluate",
    "grad_check",
    "iou",
    "load_dataset",
    "preprocess_pair",
    "soft_dice",
    "split_counts",
    "split_dataset",
    "synth_generate",
    "train",
    "wbce",
    "wdice",
    "weight_map",
    "write_dataset",
]
