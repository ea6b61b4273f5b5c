"""Training, evaluation and ablation drivers."""
from .ablation import ablation_run, fusion_sweep, gamma_sweep, load_matrix, report_from_checkpoints
from .config import ConfigError, TrainConfig, apply_overrides, load_config, lr_at
from .metrics import Metrics, evaluate_topk, metrics_from_scores, ten_crop_eval, ten_crops, topk_indices
from .optim import sgd_momentum_step
from .train import (TrainingDiverged, TrainResult, build_from_config, overfit_one_batch, pretrain_object_net,
                    train)

__all__ = [
    "ablation_run", "fusion_sweep", "gamma_sweep", "load_matrix", "report_from_checkpoints",
    "ConfigError", "TrainConfig", "apply_overrides", "load_config", "lr_at", "Metrics", "evaluate_topk",
    "metrics_from_scores", "ten_crop_eval", "ten_crops", "topk_indices", "sgd_momentum_step",
    "TrainingDiverged", "TrainResult", "build_from_config", "overfit_one_batch", "pretrain_object_net", "train",
]
