"""Bag-level aggregation of ranked instance probabilities and binary metrics."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"


def _check_probs(instance_probs) -> np.ndarray:
    p = np.asarray(instance_probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("instance_probs must not be empty")
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("instance probabilities must lie in [0, 1]")
    return p


def rank_weights(k: int) -> np.ndarray:
    """Normalised weights k, k-1, ..., 1 over k(k+1)/2."""
    w = np.arange(k, 0, -1, dtype=np.float64)
    return w / (k * (k + 1) / 2.0)


def weighted_evaluate(instance_probs) -> float:
    """Rank-weighted mean of instance probabilities.

    ``instance_probs[0]`` belongs to the most salient instance and gets weight
    ``k``; the last gets weight 1.
    """
    p = _check_probs(instance_probs)
    k = p.size
    return float(np.dot(np.arange(k, 0, -1, dtype=np.float64), p) / (k * (k + 1) / 2.0))


def max_evaluate(instance_probs) -> float:
    return float(_check_probs(instance_probs).max())


def mean_evaluate(instance_probs) -> float:
    return float(_check_probs(instance_probs).mean())


def classify_bag(P: float, threshold: float = 0.5) -> str:
    return POSITIVE if P >= threshold else NEGATIVE


@dataclass
class BagPrediction:
    bag_id: str
    instance_probs: list
    aggregate_P: float
    predicted_label: str
    true_label: str

    @classmethod
    def from_instances(cls, bag_id, instance_probs, true_label, threshold=0.5, aggregator=weighted_evaluate):
        probs = [float(v) for v in instance_probs]
        P = aggregator(probs)
        return cls(bag_id, probs, P, classify_bag(P, threshold), true_label)


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    confusion: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.f1, "confusion": dict(self.confusion)}


def metrics(predictions) -> MetricsReport:
    predictions = list(predictions)
    if not predictions:
        raise ValueError("cannot compute metrics on an empty prediction set")
    tp = fp = fn = tn = 0
    for p in predictions:
        if p.true_label is None:
            raise ValueError(f"prediction for bag {p.bag_id!r} has no true label")
        pred_pos = p.predicted_label == POSITIVE
        true_pos = p.true_label == POSITIVE
        if pred_pos and true_pos:
            tp += 1
        elif pred_pos:
            fp += 1
        elif true_pos:
            fn += 1
        else:
            tn += 1
    total = tp + fp + fn + tn
    denom = 2 * tp + fp + fn
    return MetricsReport(
        accuracy=(tp + tn) / total,
        f1=2 * tp / denom if denom else 0.0,
        confusion={"TP": tp, "FP": fp, "FN": fn, "TN": tn},
    )


def write_report(predictions, report: MetricsReport, threshold: float, json_path, csv_path=None,
                 extra: dict | None = None) -> dict:
    """Write the evaluation JSON (and optionally a per-bag CSV summary)."""
    body = {
        "threshold": threshold,
        "per_bag": [
            {
                "bag_id": p.bag_id,
                "instance_probs": [round(v, 12) for v in p.instance_probs],
                "aggregate_P": round(p.aggregate_P, 12),
                "predicted_label": p.predicted_label,
                "true_label": p.true_label,
            }
            for p in predictions
        ],
        **report.to_dict(),
    }
    if extra:
        body.update(extra)
    with open(os.fspath(json_path), "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
    if csv_path is not None:
        with open(os.fspath(csv_path), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bag_id", "aggregate_P", "predicted_label", "true_label"])
            for p in predictions:
                writer.writerow([p.bag_id, f"{p.aggregate_P:.10g}", p.predicted_label, p.true_label])
    return body
