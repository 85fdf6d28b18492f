"""Threshold-based triple classification over dissimilarity scores.

A triple is predicted TRUE iff its score is <= the threshold (scores are
dissimilarities, lower = more plausible). The threshold is fit by exhaustive
scan over every decision boundary the validation scores admit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FitError


@dataclass(frozen=True)
class ThresholdClassifier:
    theta: float

    def predict(self, scores) -> np.ndarray:
        return np.asarray(scores, dtype=np.float64) <= self.theta


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }


def candidate_thresholds(scores) -> np.ndarray:
    """Every decision boundary the scores admit, ascending.

    Midpoints between adjacent distinct values, plus a below-minimum
    sentinel (predict nothing true) and the maximum itself (predict
    everything true). The infinite sentinels are realized finitely so the
    fitted threshold is always a finite number.
    """
    uniq = np.unique(np.asarray(scores, dtype=np.float64))
    return np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1]]])


def fit_threshold(scored_valid) -> ThresholdClassifier:
    """Threshold maximizing validation accuracy; ties go to the smallest
    candidate. ``scored_valid`` is an iterable of (score, label) pairs and
    must contain both classes."""
    pairs = list(scored_valid)
    scores = np.asarray([s for s, _ in pairs], dtype=np.float64)
    labels = np.asarray([bool(l) for _, l in pairs])
    if labels.all() or not labels.any():
        raise FitError("threshold fitting needs at least one positive and one negative")
    cands = candidate_thresholds(scores)
    # (n_cands, n_scores) decision matrix; small validation sets keep this cheap
    acc = ((scores[None, :] <= cands[:, None]) == labels[None, :]).mean(axis=1)
    return ThresholdClassifier(float(cands[int(np.argmax(acc))]))


def evaluate(preds, labels) -> Metrics:
    """Confusion-matrix metrics of boolean predictions against boolean labels."""
    p = np.asarray(preds, dtype=bool)
    l = np.asarray(labels, dtype=bool)
    if p.shape != l.shape:
        raise ValueError(f"length mismatch: {p.shape} predictions vs {l.shape} labels")
    if p.size == 0:
        raise ValueError("cannot evaluate an empty prediction list")
    return Metrics(
        tp=int((p & l).sum()),
        fp=int((p & ~l).sum()),
        fn=int((~p & l).sum()),
        tn=int((~p & ~l).sum()),
    )
