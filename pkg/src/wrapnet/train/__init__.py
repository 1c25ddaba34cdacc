"""Desk-scale training harness."""
from .config import STAGES, TrainConfig
from .dataset import Dataset, make_synthetic_dataset
from .net import Phase, ToyNet
from .pipeline import (
    TrainResult,
    calibrate,
    carry_adaptation_schedule,
    evaluate,
    pretrain,
    summarize,
    train_pipeline,
)

__all__ = [
    "Dataset", "Phase", "STAGES", "ToyNet", "TrainConfig", "TrainResult", "calibrate",
    "carry_adaptation_schedule", "evaluate", "make_synthetic_dataset", "pretrain", "summarize",
    "train_pipeline",
]
