"""Weakly-supervised multi-type anomaly detection with explanation heatmaps.

A fully convolutional detector trained from image-level labels only: the
network emits one low-resolution anomaly heatmap per defect type, spatial
means of those maps give per-type image scores, and bilinear upsampling
turns the maps into pixel-level explanations for evaluation. Includes the
balanced class sampler, image/pixel AUROC and per-region-overlap metrics,
a procedural synthetic defect dataset, and a CLI.
"""

from .autodiff import (Parameter, Tensor, adam_step, finite_difference_check)
from .errors import (ConfigError, DataError, MtfcddError, NumericError,
                     UndefinedMetricError)
from .loss import Z_MIN, anomaly_scores, binary_fcdd_loss, multitype_loss
from .metrics import (Component, MetricReport, aupro, auroc,
                      connected_components, evaluate_heatmaps,
                      image_level_auroc, pixel_level_auroc, pro_curve)
from .model import ModelConfig, MultiTypeFCDD, build_model, parameter_count
from .sampler import (BalancedSampler, estimate_epoch_length,
                      exact_epoch_length, std_epoch_ratio)
from .synth import SynthConfig, generate_synthetic
from .train import (EvalConfig, OptimConfig, RunConfig, TrainConfig,
                    evaluate_run, infer_images, train_run)

__version__ = "0.1.0"

__all__ = [
    "BalancedSampler", "Component", "ConfigError", "DataError", "EvalConfig",
    "MetricReport", "ModelConfig", "MtfcddError", "MultiTypeFCDD",
    "NumericError", "OptimConfig", "Parameter", "RunConfig", "SynthConfig",
    "Tensor", "TrainConfig", "UndefinedMetricError", "Z_MIN", "adam_step",
    "anomaly_scores", "aupro", "auroc", "binary_fcdd_loss", "build_model",
    "connected_components", "estimate_epoch_length", "evaluate_heatmaps",
    "evaluate_run", "exact_epoch_length", "finite_difference_check",
    "generate_synthetic", "image_level_auroc", "infer_images",
    "multitype_loss", "parameter_count", "pixel_level_auroc", "pro_curve",
    "std_epoch_ratio", "train_run",
]
