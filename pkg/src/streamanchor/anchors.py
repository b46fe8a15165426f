"""Task anchors: the single frame a detector is expected to respond to."""
from __future__ import annotations

from enum import Enum

import numpy as np

from .losses import anchor_weights


class TaskKind(str, Enum):
    KWS = "KWS"  # keyword spotting: anchor at end of keyword
    MTD = "MTD"  # multi-modal trigger detection: anchor at start of speech
    SOD = "SOD"  # speech onset detection: anchor at start of speech

    @classmethod
    def parse(cls, value: "str | TaskKind") -> "TaskKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ValueError(
                f"unknown task {value!r}; expected one of {[t.value for t in cls]}"
            ) from None


class AnchorError(ValueError):
    pass


def positive_runs(labels) -> list[tuple[int, int]]:
    """Contiguous runs of 1s as 0-based inclusive ``(start, end)`` pairs."""
    y = np.asarray(labels).astype(bool).astype(np.int8)
    if y.ndim != 1:
        raise AnchorError(f"labels must be 1-D, got shape {y.shape}")
    edges = np.diff(np.concatenate(([0], y, [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def extract_anchor(labels, task: TaskKind | str) -> int | None:
    """1-based anchor frame, or None for a sequence without an event.

    Raises AnchorError when the labels hold more than one positive run.
    """
    task = TaskKind.parse(task)
    if len(labels) < 1:
        raise AnchorError("labels must contain at least one frame")
    runs = positive_runs(labels)
    if not runs:
        return None
    if len(runs) > 1:
        raise AnchorError(f"expected at most one positive run, found {len(runs)}: {runs}")
    start, end = runs[0]
    if task is TaskKind.KWS:
        return end + 1
    return start + 1


def weights_for_sequence(seq, task: TaskKind | str | None = None,
                         no_anchor_weight: float = 1.0) -> np.ndarray:
    """Per-frame anchor weights for a sequence (or a bare label vector).

    ``task`` defaults to ``seq.task`` when a LabeledSequence is given.
    """
    labels = getattr(seq, "labels", seq)
    if task is None:
        task = getattr(seq, "task", None)
        if task is None:
            raise ValueError("task is required for a bare label vector")
    anchor = extract_anchor(labels, task)
    return anchor_weights(len(labels), anchor, no_anchor_weight)
