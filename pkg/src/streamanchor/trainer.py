"""Seeded mini-batch training with Adam and a cosine learning-rate schedule."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .anchors import TaskKind, weights_for_sequence
from .data import Dataset, LabeledSequence
from .losses import LossSpec, batch_loss, frame_loss
from .metrics import auc_roc
from .models import StreamingModel

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """Loss or gradients became non-finite; ``last_good`` holds the previous parameters."""

    def __init__(self, message: str, last_good: dict[str, np.ndarray] | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr0: float = 0.005
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    task: TaskKind = TaskKind.KWS
    # keep the epoch with the best validation AUC instead of the last one
    select_best: bool = True

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        if self.epochs < 1:
            raise ValueError(f"invalid TrainConfig.epochs: {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"invalid TrainConfig.batch_size: {self.batch_size}")
        if not self.lr0 > 0:
            raise ValueError(f"invalid TrainConfig.lr0: {self.lr0}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"invalid TrainConfig.schedule: {self.schedule!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid TrainConfig Adam parameters")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_table(self, sep: str = "\t") -> str:
        rows = [sep.join(["epoch", "train_loss", "val_loss", "val_auc", "lr"])]
        for i in range(len(self)):
            rows.append(sep.join([str(i + 1), repr(self.train_loss[i]), repr(self.val_loss[i]),
                                  repr(self.val_auc[i]), repr(self.lr[i])]))
        return "\n".join(rows) + "\n"


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise nx.ShapeError("adam_step", params[name].shape, g.shape, detail=name)
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r} ({bad} entries)")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p = params[name]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- batching -----------------------------------------------------------------

def pad_batch(seqs: Sequence[LabeledSequence], task: TaskKind, no_anchor_weight: float = 1.0):
    """Right-pad a list of sequences to a common length.

    Returns (features B x T x D, labels B x T, weights B x T, lengths B).
    """
    lengths = np.array([s.T for s in seqs])
    T = int(lengths.max())
    D = seqs[0].D
    x = np.zeros((len(seqs), T, D))
    y = np.zeros((len(seqs), T))
    w = np.ones((len(seqs), T))
    for i, s in enumerate(seqs):
        if s.D != D:
            raise nx.ShapeError("pad_batch", (s.T, s.D), (T, D), detail=s.id)
        x[i, :s.T] = s.features
        y[i, :s.T] = s.labels
        w[i, :s.T] = weights_for_sequence(s, task, no_anchor_weight)
    return x, y, w, lengths


def predict_sequences(model: StreamingModel, seqs: Sequence[LabeledSequence],
                      batch_size: int = 64) -> list[np.ndarray]:
    """Per-frame scores for each sequence (inference mode), in input order."""
    order = sorted(range(len(seqs)), key=lambda i: (seqs[i].T, i))
    out: list[np.ndarray | None] = [None] * len(seqs)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        T = max(seqs[i].T for i in idx)
        x = np.zeros((len(idx), T, seqs[idx[0]].D))
        for j, i in enumerate(idx):
            x[j, :seqs[i].T] = seqs[i].features
        probs = model.predict(x)
        for j, i in enumerate(idx):
            out[i] = probs[j, :seqs[i].T].copy()
    return out


def dataset_loss(model: StreamingModel, seqs: Sequence[LabeledSequence], spec: LossSpec,
                 task: TaskKind, scores: Sequence[np.ndarray] | None = None) -> float:
    """Mean sequence loss in inference mode (reuses ``scores`` when given)."""
    if not seqs:
        return float("nan")
    if scores is None:
        scores = predict_sequences(model, seqs)
    total = 0.0
    for seq, p in zip(seqs, scores):
        w = weights_for_sequence(seq, task, spec.no_anchor_weight)
        total += float(np.mean(frame_loss(seq.labels.astype(np.float64), p, w, spec)))
    return total / len(seqs)


def batch_order(lengths: Sequence[int], batch_size: int, rng: np.random.Generator,
                pool: int = 8) -> list[np.ndarray]:
    """Shuffled mini-batches grouped by similar length to limit padding.

    The data is shuffled, cut into pools of ``pool`` batches, each pool is
    sorted by length and cut into batches, and the batch order is shuffled.
    """
    lengths = np.asarray(lengths)
    order = rng.permutation(len(lengths))
    batches = []
    step = batch_size * pool
    for start in range(0, len(order), step):
        chunk = order[start:start + step]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def loss_and_grads(model: StreamingModel, seqs: Sequence[LabeledSequence], spec: LossSpec,
                   task: TaskKind, training: bool = False,
                   rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
    x, y, w, lengths = pad_batch(seqs, task, spec.no_anchor_weight)
    with nx.Tape() as tape:
        probs = model.forward(x, training=training, rng=rng)
        loss = batch_loss(probs, y, w, lengths, spec)
    grads = nx.backward(tape, loss)
    by_name = {}
    for name, p in model.params.items():
        g = grads.get(p)
        by_name[name] = np.zeros_like(p.data) if g is None else g
    return float(loss.data), by_name


def _session_auc(seqs: Sequence[LabeledSequence], scores: Sequence[np.ndarray]) -> float:
    labels = np.array([int(s.labels.any()) for s in seqs])
    if labels.size == 0 or labels.min() == labels.max():
        return float("nan")
    return auc_roc([float(p.max()) for p in scores], labels)


def train(dataset: Dataset, model: StreamingModel,
          config: TrainConfig) -> tuple[StreamingModel, TrainHistory]:
    """Train ``model`` in place on the train split; returns it with its history."""
    train_seqs = dataset.subset("train")
    val_seqs = dataset.subset("validation")
    if not train_seqs:
        raise TrainingError("empty train split")
    dims = {s.D for s in train_seqs + val_seqs}
    if dims != {model.config.input_dim}:
        raise nx.ShapeError("train", (model.config.input_dim,), tuple(sorted(dims)),
                            detail="model input_dim vs dataset feature dims")
    spec, task = config.loss, config.task
    n_batches = math.ceil(len(train_seqs) / config.batch_size)
    total_steps = config.epochs * n_batches
    state = AdamState()
    history = TrainHistory()
    best_auc = -math.inf
    best_state = model.state_dict()
    step = 0

    for epoch in range(config.epochs):
        batches = batch_order([q.T for q in train_seqs], config.batch_size,
                              np.random.default_rng([config.seed, epoch]))
        history.lr.append(config.lr0 if config.schedule == "constant"
                          else cosine_lr(step, total_steps, config.lr0))
        epoch_loss = 0.0
        for idx in batches:
            batch = [train_seqs[i] for i in idx]
            rng = np.random.default_rng([config.seed, 0xD0, step])
            last_good = model.state_dict()
            loss, grads = loss_and_grads(model, batch, spec, task, training=True, rng=rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch + 1}, step {step}",
                                       last_good)
            lr = (config.lr0 if config.schedule == "constant"
                  else cosine_lr(step, total_steps, config.lr0))
            try:
                adam_step(model.params, grads, state, lr,
                          config.beta1, config.beta2, config.adam_eps)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch + 1}, step {step}",
                                       last_good) from None
            epoch_loss += loss * len(batch)
            step += 1
        history.train_loss.append(epoch_loss / len(train_seqs))
        val_scores = predict_sequences(model, val_seqs)
        history.val_loss.append(dataset_loss(model, val_seqs, spec, task, val_scores))
        auc = _session_auc(val_seqs, val_scores)
        history.val_auc.append(auc)
        log.info("epoch %d loss %.5f val_loss %.5f val_auc %.4f", epoch + 1,
                 history.train_loss[-1], history.val_loss[-1], auc)
        # ties go to the later epoch
        if not math.isnan(auc) and auc >= best_auc:
            best_auc = auc
            best_state = model.state_dict()
            history.best_epoch = epoch + 1
    if config.select_best and history.best_epoch > 0:
        model.load_state_dict(best_state)
    else:
        history.best_epoch = config.epochs
    return model, history
