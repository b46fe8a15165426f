"""Session-level detection metrics: AUC, FNR at a tuned FPR, latency, Brier."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .anchors import TaskKind, extract_anchor


@dataclass
class SessionResult:
    id: str
    session_label: int
    session_score: float
    first_cross_frame: int | None  # 1-based, at the evaluation threshold
    gt_event_frame: int | None  # task anchor, 1-based

    @property
    def fired(self) -> bool:
        return self.first_cross_frame is not None


@dataclass
class LatencyStats:
    mean: float
    p25: float
    p50: float
    p75: float


@dataclass
class EvalReport:
    auc: float
    latency_mean: float
    latency_p25: float
    latency_p50: float
    latency_p75: float
    fnr_at_target_fpr: float
    threshold: float
    brier: float
    target_fpr: float = 0.02
    test_fpr: float = float("nan")
    n_sessions: int = 0
    n_positive: int = 0
    n_detected: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be a 1-D binary vector")
    return y.astype(bool)


def auc_roc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties = 1/2).

    Computed from midranks after one sort, O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if s.shape != y.shape:
        raise ValueError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"auc_roc needs both classes (positives={n_pos}, negatives={n_neg})")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # twice the midrank of each tie group keeps everything integral
    bounds = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [s.size]))
    twice_rank = np.empty(s.size, dtype=np.int64)
    for a, b in zip(starts, ends):
        twice_rank[a:b] = a + b + 1  # 2 * mean of ranks a+1 .. b
    pos_twice = int(twice_rank[y[order]].sum())
    twice_u = pos_twice - n_pos * (n_pos + 1)
    return (twice_u / 2) / (n_pos * n_neg)


def session_decision(frame_scores, threshold: float) -> tuple[bool, int | None]:
    """A session fires iff some frame score strictly exceeds ``threshold``."""
    s = np.asarray(frame_scores, dtype=np.float64)
    hits = np.flatnonzero(s > threshold)
    if hits.size == 0:
        return False, None
    return True, int(hits[0]) + 1


def tune_threshold(session_scores, session_labels, target_fpr: float) -> float:
    """Smallest threshold whose session FPR on these sessions is <= ``target_fpr``."""
    if not 0.0 <= target_fpr <= 1.0:
        raise ValueError(f"target_fpr must be in [0, 1], got {target_fpr}")
    s = np.asarray(session_scores, dtype=np.float64)
    y = _binary(session_labels)
    neg = np.sort(s[~y])
    if neg.size == 0:
        raise ValueError("threshold tuning needs negative sessions")
    # FPR only changes at negative scores; a negative at exactly the
    # threshold does not fire, so candidates are 0 and the scores themselves
    candidates = np.concatenate(([0.0], neg))
    n = neg.size
    for theta in candidates:
        fired = n - np.searchsorted(neg, theta, side="right")
        if fired / n <= target_fpr:
            break
    if theta >= 1.0:
        raise ValueError(
            f"target FPR {target_fpr} unattainable: needs threshold {theta}, "
            "at which no session can fire")
    return float(theta)


def fnr_at_fpr(session_scores, session_labels, threshold: float) -> float:
    """Fraction of positive sessions that never exceed ``threshold``."""
    s = np.asarray(session_scores, dtype=np.float64)
    y = _binary(session_labels)
    if not y.any():
        raise ValueError("fnr needs positive sessions")
    return float(np.mean(~(s[y] > threshold)))


def fpr_at(session_scores, session_labels, threshold: float) -> float:
    s = np.asarray(session_scores, dtype=np.float64)
    y = _binary(session_labels)
    if y.all():
        return float("nan")
    return float(np.mean(s[~y] > threshold))


def detection_latency(session: SessionResult, frame_period_ms: float) -> float | None:
    """Absolute seconds between the anchor and the first crossing; None if never fired."""
    if not session.session_label or session.gt_event_frame is None:
        raise ValueError(f"{session.id}: latency is only defined for positive sessions")
    if session.first_cross_frame is None:
        return None
    return abs(session.first_cross_frame - session.gt_event_frame) * frame_period_ms / 1000.0


def _quantile(sorted_x: np.ndarray, q: float) -> float:
    pos = q * (sorted_x.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, sorted_x.size - 1)
    return float(sorted_x[lo] + (pos - lo) * (sorted_x[hi] - sorted_x[lo]))


def latency_stats(latencies: Iterable[float]) -> LatencyStats:
    """Mean and linearly interpolated 25/50/75th percentiles."""
    x = np.sort(np.asarray(list(latencies), dtype=np.float64))
    if x.size == 0:
        raise ValueError("latency_stats needs at least one latency")
    return LatencyStats(float(x.mean()), _quantile(x, 0.25), _quantile(x, 0.5), _quantile(x, 0.75))


def brier(session_scores, session_labels) -> float:
    s = np.asarray(session_scores, dtype=np.float64)
    y = _binary(session_labels).astype(np.float64)
    if s.size == 0 or s.shape != y.shape:
        raise ValueError("brier needs matching nonempty scores and labels")
    return float(np.mean((y - s) ** 2))


def sessions_from_scores(sequences: Sequence, frame_scores: Sequence[np.ndarray],
                         threshold: float, task: TaskKind | str | None = None) -> list[SessionResult]:
    out = []
    for seq, scores in zip(sequences, frame_scores):
        _, first = session_decision(scores, threshold)
        anchor = extract_anchor(seq.labels, task or seq.task)
        out.append(SessionResult(seq.id, int(seq.labels.any()), float(np.max(scores)),
                                 first, anchor))
    return out


def evaluate_scores(val_sequences: Sequence, val_scores: Sequence[np.ndarray],
                    test_sequences: Sequence, test_scores: Sequence[np.ndarray],
                    target_fpr: float = 0.02, task: TaskKind | str | None = None) -> EvalReport:
    """Full battery: threshold tuned on validation, everything else measured on test."""
    val_max = [float(np.max(s)) for s in val_scores]
    val_lab = [int(q.labels.any()) for q in val_sequences]
    threshold = tune_threshold(val_max, val_lab, target_fpr)

    sessions = sessions_from_scores(test_sequences, test_scores, threshold, task)
    scores = np.array([s.session_score for s in sessions])
    labels = np.array([s.session_label for s in sessions])
    auc = auc_roc(scores, labels)
    latencies = []
    for seq, sess in zip(test_sequences, sessions):
        if sess.session_label:
            lat = detection_latency(sess, seq.frame_period_ms)
            if lat is not None:
                latencies.append(lat)
    if latencies:
        stats = latency_stats(latencies)
    else:
        stats = LatencyStats(*(float("nan"),) * 4)
    return EvalReport(
        auc=auc,
        latency_mean=stats.mean,
        latency_p25=stats.p25,
        latency_p50=stats.p50,
        latency_p75=stats.p75,
        fnr_at_target_fpr=fnr_at_fpr(scores, labels, threshold),
        threshold=threshold,
        brier=brier(scores, labels),
        target_fpr=target_fpr,
        test_fpr=fpr_at(scores, labels, threshold),
        n_sessions=len(sessions),
        n_positive=int(labels.sum()),
        n_detected=len(latencies),
    )
