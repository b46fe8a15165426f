"""Anchor-weighted frame losses and small streaming detectors, with a
synthetic-data experiment harness."""
from .anchors import AnchorError, TaskKind, extract_anchor, weights_for_sequence
from .losses import LossKind, LossSpec, anchor_weight, fcel, ffl, frame_loss, sequence_loss
from .metrics import EvalReport, auc_roc, evaluate_scores, tune_threshold
from .models import ModelConfig, ModelKind, build, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

__version__ = "0.1.0"
