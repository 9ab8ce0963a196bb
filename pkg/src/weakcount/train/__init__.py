"""Weakly supervised training from per-recording event counts."""

from .loop import (
    SWITCHES,
    Bag,
    Evaluation,
    MemberResult,
    PhaseResult,
    PipelineData,
    PipelineResult,
    TrainConfig,
    bag_loss_and_grad,
    calibration_slices,
    evaluate,
    evaluate_quantized,
    network_for,
    prepare_bags,
    prepare_pipeline_data,
    train_member,
    train_phase,
    train_pipeline,
)
from .loss import ProportionTarget, UnusableRecording, aggregate, build_target, proportion_loss, proportion_loss_grad
from .masking import MaskedPredictions, count_shots, mask_duplicates, simple_post_filter
from .optim import PlateauSchedule, SGDState, sgd_step
from .vat import kl_rows, vat_loss

__all__ = [
    "SWITCHES", "Bag", "Evaluation", "MemberResult", "PhaseResult", "PipelineData", "PipelineResult",
    "TrainConfig", "bag_loss_and_grad", "calibration_slices", "evaluate", "evaluate_quantized", "network_for", "prepare_bags",
    "prepare_pipeline_data", "train_member", "train_phase", "train_pipeline", "ProportionTarget",
    "UnusableRecording", "aggregate", "build_target", "proportion_loss", "proportion_loss_grad",
    "MaskedPredictions", "count_shots", "mask_duplicates", "simple_post_filter", "PlateauSchedule",
    "SGDState", "sgd_step", "kl_rows", "vat_loss",
]
