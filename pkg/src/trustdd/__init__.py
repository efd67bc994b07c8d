"""Outlier-aware dataset distillation.

Distill a labeled dataset into a few learnable images per class plus a
small learnable set of outlier images, so networks trained on the result
classify well and also assign low confidence to out-of-distribution data.
"""
from .corruptions import CorruptionConfig, noise_outliers, synthesize_outliers
from .data import (
    DistilledSet,
    LabeledImageSet,
    UnlabeledImageSet,
    init_distilled,
    load_dataset,
    load_distilled,
    load_image_directory,
    make_blob_outliers,
    make_blobs,
    save_distilled,
)
from .distill import DistillConfig, dsa_match_loss, mtt_match_loss, run_trustdd, single_set_distill
from .networks import (
    NetworkSpec,
    ParameterVector,
    build_network,
    expert_trajectories,
    forward_logits,
    integrated_loss,
    train_on_distilled,
    uniformity_loss,
)
from .ood import OODReport, energy_score, evaluate_protocol, mls_score, msp_score

__version__ = "0.1.0"

__all__ = [
    "CorruptionConfig", "noise_outliers", "synthesize_outliers",
    "DistilledSet", "LabeledImageSet", "UnlabeledImageSet", "init_distilled", "load_dataset",
    "load_distilled", "load_image_directory", "make_blob_outliers", "make_blobs", "save_distilled",
    "DistillConfig", "dsa_match_loss", "mtt_match_loss", "run_trustdd", "single_set_distill",
    "NetworkSpec", "ParameterVector", "build_network", "expert_trajectories", "forward_logits",
    "integrated_loss", "train_on_distilled", "uniformity_loss",
    "OODReport", "energy_score", "evaluate_protocol", "mls_score", "msp_score",
]
