"""Unweighted average recall, Pearson correlation and report emission."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list

    @classmethod
    def from_labels(cls, truth, pred, classes=None):
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise ShapeError(f"truth {truth.shape} and predictions {pred.shape} differ in length")
        if classes is None:
            classes = sorted(set(truth.tolist()) | set(pred.tolist()))
        index = {c: i for i, c in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for t, p in zip(truth.tolist(), pred.tolist()):
            counts[index[t], index[p]] += 1
        return cls(counts, list(classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def recalls(self) -> np.ndarray:
        support = self.counts.sum(axis=1)
        empty = [self.class_names[i] for i in np.flatnonzero(support == 0)]
        if empty:
            raise DegenerateInputError(f"classes with no reference samples: {empty}")
        return np.diag(self.counts) / support


def uar(truth, pred, classes=None) -> float:
    """Mean over reference classes of per-class recall.

    ``classes`` defaults to the labels present in ``truth``; an explicitly
    listed class with no reference samples is an error.
    """
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ShapeError(f"truth {truth.shape} and predictions {pred.shape} differ in length")
    if classes is None:
        classes = np.unique(truth)
    recalls = []
    for c in classes:
        in_class = truth == c
        if not in_class.any():
            raise DegenerateInputError(f"class {c!r} has no reference samples")
        recalls.append(np.mean(pred[in_class] == c))
    if not recalls:
        raise DegenerateInputError("UAR of an empty label set")
    return float(np.mean(recalls))


def pcc(x, y) -> float:
    """Pearson correlation with two-pass mean removal in double precision."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"sequences differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise DegenerateInputError("PCC needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise DegenerateInputError("PCC undefined for a constant sequence")
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def bsc_score(per_speaker_pccs) -> float:
    values = np.asarray(per_speaker_pccs, dtype=np.float64)
    if values.size == 0:
        raise DegenerateInputError("no per-speaker PCCs to aggregate")
    return float(values.mean())


def pooled_pcc(truths, preds) -> float:
    """PCC of all sequences concatenated end to end."""
    return pcc(np.concatenate([np.ravel(t) for t in truths]), np.concatenate([np.ravel(p) for p in preds]))


@dataclass
class EvalReport:
    metric: str
    value: float
    n_samples: int
    details: dict = field(default_factory=dict)

    def rows(self):
        yield self.metric, self.value
        for key, val in self.details.items():
            yield key, val
        yield "n_samples", self.n_samples

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key, val in self.rows():
            w.writerow([key, f"{val:.6f}" if isinstance(val, float) else val])
        return buf.getvalue()

    def to_text(self) -> str:
        rows = [(k, f"{v:.4f}" if isinstance(v, float) else str(v)) for k, v in self.rows()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def mask_report(truth, pred, class_names=("clear", "mask")) -> EvalReport:
    cm = ConfusionMatrix.from_labels(truth, pred, list(range(len(class_names))))
    recalls = cm.recalls()
    details = {f"recall_{name}": float(r) for name, r in zip(class_names, recalls)}
    return EvalReport("uar", float(recalls.mean()), cm.total, details)


def breath_report(truths: dict, preds: dict, aggregation: str = "mean") -> EvalReport:
    """PCC report over speakers; ``truths``/``preds`` map speaker id to a sequence."""
    if set(truths) != set(preds):
        raise ShapeError("truth and prediction speakers differ")
    speakers = sorted(truths)
    per = {f"pcc_{s}": pcc(truths[s], preds[s]) for s in speakers}
    if aggregation == "pooled":
        value = pooled_pcc([truths[s] for s in speakers], [preds[s] for s in speakers])
    elif aggregation == "mean":
        value = bsc_score(list(per.values()))
    else:
        raise ValueError(f"aggregation must be 'mean' or 'pooled', got {aggregation!r}")
    n = sum(np.size(truths[s]) for s in speakers)
    return EvalReport("pcc", value, n, per)
