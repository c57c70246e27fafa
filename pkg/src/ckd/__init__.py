"""Contextual knowledge distillation for small numpy transformer encoders."""

from .adaptive import SubnetSpec, estimate_importance, rewire, train_adaptive_full, train_adaptive_width
from .baselines import ConstraintViolation, check_compatibility
from .checkpoint import load_model, save_model
from .harness import RunRecord, TrainConfig, distill, train_teacher
from .losses import (DistillConfig, UnsupportedConfiguration, align_layers, ckd_ltr_loss, ckd_wr_loss,
                     logit_kd_loss, total_objective)
from .model import Encoder, LayerStates, ModelConfig, StateGrads
from .relations import pair_relation, triple_angle, windowed_relations
from .tasks import TaskSpec, generate_task

__version__ = "0.1.0"

__all__ = [
    "ConstraintViolation", "DistillConfig", "Encoder", "LayerStates", "ModelConfig", "RunRecord", "StateGrads",
    "SubnetSpec", "TaskSpec", "TrainConfig", "UnsupportedConfiguration", "align_layers", "check_compatibility",
    "ckd_ltr_loss", "ckd_wr_loss", "distill", "estimate_importance", "generate_task", "load_model",
    "logit_kd_loss", "pair_relation", "rewire", "save_model", "total_objective", "train_adaptive_full",
    "train_adaptive_width", "train_teacher", "triple_angle", "windowed_relations",
]
