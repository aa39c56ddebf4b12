"""Recall@K, mean Recall@K and the R/mR average used for trade-off reporting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np


@dataclass
class ImagePrediction:
    """Ranked triplets of one image.

    ``triplets`` rows are (sub_idx, obj_idx, predicate_id); ``entity_labels``
    are the predicted classes (equal to ground truth in PredCls).
    """

    triplets: np.ndarray
    scores: np.ndarray
    entity_labels: np.ndarray

    def __post_init__(self):
        self.triplets = np.asarray(self.triplets, dtype=np.int64).reshape(-1, 3)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.entity_labels = np.asarray(self.entity_labels, dtype=np.int64)
        order = rank_order(self.triplets, self.scores)
        self.triplets, self.scores = self.triplets[order], self.scores[order]


@dataclass
class ImageGT:
    triplets: np.ndarray        # (m, 3)
    entity_labels: np.ndarray

    def __post_init__(self):
        self.triplets = np.asarray(self.triplets, dtype=np.int64).reshape(-1, 3)
        self.entity_labels = np.asarray(self.entity_labels, dtype=np.int64)


def rank_order(triplets: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Stable order by (confidence desc, sub, obj, predicate)."""
    if not len(scores):
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((triplets[:, 2], triplets[:, 1], triplets[:, 0], -scores))


def _hits(pred: ImagePrediction, gt: ImageGT, k: int) -> np.ndarray:
    """Boolean per GT triplet: matched within the top-k predictions."""
    top = pred.triplets[:k]
    ok_cls = (pred.entity_labels[top[:, 0]] == gt.entity_labels[top[:, 0]]) & \
             (pred.entity_labels[top[:, 1]] == gt.entity_labels[top[:, 1]]) if len(top) else np.zeros(0, bool)
    matched = {tuple(t) for t, ok in zip(top.tolist(), ok_cls) if ok}
    return np.array([tuple(t) in matched for t in gt.triplets.tolist()], dtype=bool)


def _check(preds, gts, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truth differ in image count")
    if not any(len(g.triplets) for g in gts):
        raise ValueError("no ground-truth triplets in any image")


def recall_at_k(preds: Sequence[ImagePrediction], gts: Sequence[ImageGT], k: int) -> float:
    _check(preds, gts, k)
    per_image = [_hits(p, g, k).mean() for p, g in zip(preds, gts) if len(g.triplets)]
    return float(np.mean(per_image))


def per_predicate_recall(preds: Sequence[ImagePrediction], gts: Sequence[ImageGT],
                         k: int) -> Dict[int, float]:
    """Recall per predicate with GT pooled over all images."""
    _check(preds, gts, k)
    hit: Dict[int, int] = {}
    tot: Dict[int, int] = {}
    for p, g in zip(preds, gts):
        if not len(g.triplets):
            continue
        h = _hits(p, g, k)
        for (_, _, r), ok in zip(g.triplets.tolist(), h):
            tot[r] = tot.get(r, 0) + 1
            hit[r] = hit.get(r, 0) + int(ok)
    return {r: hit[r] / tot[r] for r in sorted(tot)}


def mean_recall_at_k(preds: Sequence[ImagePrediction], gts: Sequence[ImageGT], k: int) -> float:
    return float(np.mean(list(per_predicate_recall(preds, gts, k).values())))


def mean_metric(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        raise ValueError("mean_metric needs at least one value")
    return float(sum(values) / len(values))


def group_report(per_predicate: Dict[int, float], groups: Dict[str, Iterable[int]]
                 ) -> Dict[str, Optional[float]]:
    """Mean recall of each group's predicates present in GT; None marks an absent group."""
    out: Dict[str, Optional[float]] = {}
    for name, members in groups.items():
        vals = [per_predicate[p] for p in sorted(members) if p in per_predicate]
        out[name] = float(np.mean(vals)) if vals else None
    return out


@dataclass
class MetricReport:
    ks: List[int]
    recall: Dict[int, float]
    mean_recall: Dict[int, float]
    per_predicate: Dict[int, Dict[int, float]]
    groups: Dict[int, Dict[str, Optional[float]]]
    mean: float
    meta: Dict[str, object] = field(default_factory=dict)

    def to_json(self, predicate_names: Optional[Sequence[str]] = None) -> dict:
        name = (lambda p: predicate_names[p]) if predicate_names else str
        return {
            "meta": self.meta,
            "ks": self.ks,
            "R": {str(k): self.recall[k] for k in self.ks},
            "mR": {str(k): self.mean_recall[k] for k in self.ks},
            "Mean": self.mean,
            "groups": {str(k): self.groups[k] for k in self.ks},
            "per_predicate": {str(k): {name(p): v for p, v in self.per_predicate[k].items()}
                              for k in self.ks},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "k", "value"])
        for k in self.ks:
            w.writerow(["R", k, repr(self.recall[k])])
            w.writerow(["mR", k, repr(self.mean_recall[k])])
            for g, v in self.groups[k].items():
                w.writerow([f"mR_{g}", k, "" if v is None else repr(v)])
        w.writerow(["Mean", "", repr(self.mean)])
        return buf.getvalue()


def evaluate(preds: Sequence[ImagePrediction], gts: Sequence[ImageGT], ks=(20, 50, 100),
             groups: Optional[Dict[str, Iterable[int]]] = None) -> MetricReport:
    ks = sorted(int(k) for k in ks)
    recall = {k: recall_at_k(preds, gts, k) for k in ks}
    per_pred = {k: per_predicate_recall(preds, gts, k) for k in ks}
    mean_rec = {k: float(np.mean(list(per_pred[k].values()))) for k in ks}
    grp = {k: group_report(per_pred[k], groups or {}) for k in ks}
    mean = mean_metric([recall[k] for k in ks] + [mean_rec[k] for k in ks])
    return MetricReport(ks, recall, mean_rec, per_pred, grp, mean)
