"""Frame-wise detection losses and their anchor-weighted variants.

All frame-level functions work on plain floats/arrays as well as on
:class:`~streamanchor.numerics.Tensor` scores, in which case the result is
differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics as nx

EPS = 1e-6


class LossKind(str, Enum):
    FCEL = "FCEL"
    FFL = "FFL"
    SAL = "SAL"
    SA_PLUS_FL = "SA_PLUS_FL"
    SAFL = "SAFL"

    @classmethod
    def parse(cls, value: "str | LossKind") -> "LossKind":
        if isinstance(value, cls):
            return value
        text = str(value).strip().upper().replace("+", "_PLUS_").replace("__", "_")
        try:
            return cls(text)
        except ValueError:
            raise ValueError(
                f"unknown loss {value!r}; expected one of {[k.value for k in cls]}"
            ) from None

    @property
    def label(self) -> str:
        return "SA+FL" if self is LossKind.SA_PLUS_FL else self.value


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.FCEL
    gamma: float = 2.0
    alpha: float = 0.25
    # weight of every frame in a sequence that has no event
    no_anchor_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind.parse(self.kind))
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if not 0 < self.no_anchor_weight <= 1:
            raise ValueError(f"no_anchor_weight must be in (0, 1], got {self.no_anchor_weight}")

    @property
    def uses_anchor(self) -> bool:
        return self.kind in (LossKind.SAL, LossKind.SA_PLUS_FL, LossKind.SAFL)


def clamp_prob(p):
    return nx.clamp(p, EPS, 1.0 - EPS)


def fcel(y, p):
    """Binary cross entropy of one frame (or elementwise over arrays)."""
    p = clamp_prob(p)
    return -(y * nx.log(p)) - (1 - y) * nx.log(1 - p)


def focal_term(s, gamma: float):
    """``(1 - s)**gamma * log(s)``; nonpositive."""
    s = clamp_prob(s)
    return nx.pow(1 - s, gamma) * nx.log(s)


def ffl(y, p, spec: LossSpec):
    p = clamp_prob(p)
    return (-(y * spec.alpha) * focal_term(p, spec.gamma)
            - ((1 - y) * (1 - spec.alpha)) * focal_term(1 - p, spec.gamma))


def anchor_weight(t: int, anchor: int | None, T: int, no_anchor_weight: float = 1.0) -> float:
    """Weight of 1-based frame ``t``: ``(T - |anchor - t|) / T``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 1 <= t <= T:
        raise ValueError(f"frame {t} outside 1..{T}")
    if anchor is None:
        return float(no_anchor_weight)
    if not 1 <= anchor <= T:
        raise ValueError(f"anchor {anchor} outside 1..{T}")
    return (T - abs(anchor - t)) / T


def anchor_weights(T: int, anchor: int | None, no_anchor_weight: float = 1.0) -> np.ndarray:
    """Vectorised :func:`anchor_weight` over frames 1..T."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if anchor is None:
        return np.full(T, float(no_anchor_weight))
    if not 1 <= anchor <= T:
        raise ValueError(f"anchor {anchor} outside 1..{T}")
    t = np.arange(1, T + 1)
    return (T - np.abs(anchor - t)) / T


def frame_loss(y, p, w, spec: LossSpec):
    """Loss of one frame (or elementwise) under ``spec`` with anchor weight ``w``."""
    wd = np.asarray(w)
    if np.any(wd <= 0) or np.any(wd > 1):
        raise ValueError("anchor weights must lie in (0, 1]")
    kind = spec.kind
    if kind is LossKind.FCEL:
        return fcel(y, p)
    if kind is LossKind.FFL:
        return ffl(y, p, spec)
    if kind is LossKind.SAL:
        return w * fcel(y, p)
    if kind is LossKind.SA_PLUS_FL:
        return w * fcel(y, p) + ffl(y, p, spec)
    if kind is LossKind.SAFL:
        return w * ffl(y, p, spec)
    raise ValueError(f"unknown loss kind {kind!r}")


def sequence_loss(seq, scores, spec: LossSpec, task=None):
    """Mean frame loss over one sequence.

    ``scores`` may be a Tensor (result is differentiable) or an array.
    """
    from .anchors import weights_for_sequence

    labels = np.asarray(seq.labels, dtype=np.float64)
    n = np.shape(nx._data(scores))
    if n != labels.shape:
        raise ValueError(f"scores shape {n} does not match {labels.shape[0]} labels")
    w = weights_for_sequence(seq, task, spec.no_anchor_weight)
    return nx.mean(frame_loss(labels, scores, w, spec))


def batch_loss(scores, labels: np.ndarray, weights: np.ndarray, lengths, spec: LossSpec):
    """Mean over sequences of the per-sequence mean frame loss.

    ``scores`` is (B, T) with sequences right-padded to a common T; frames at
    or beyond each sequence's length are masked out. Padded frames must carry
    a valid weight (any value in (0, 1]).
    """
    lengths = np.asarray(lengths)
    B, T = labels.shape
    if nx._data(scores).shape != (B, T) or weights.shape != (B, T) or lengths.shape != (B,):
        raise nx.ShapeError("batch_loss", nx._data(scores).shape, labels.shape,
                            weights.shape, lengths.shape)
    mask = np.arange(T)[None, :] < lengths[:, None]
    per_frame = frame_loss(labels, scores, weights, spec)
    scale = mask / (lengths[:, None] * B)
    return nx.sum(per_frame * scale)
