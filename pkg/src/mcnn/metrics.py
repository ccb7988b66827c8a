"""Imbalance-aware evaluation: precision/recall/F1, average precision, PR curves.

Multi-class heads are scored one-vs-all: for each class the samples of that
class are positives and the class probability is the ranking score.  Macro
averages are unweighted means over classes that have at least one true
instance; micro averages are emitted alongside.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, UndefinedMetricError

logger = logging.getLogger(__name__)

HEADS = ("host", "ha_subtype", "na_subtype")


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Zero denominators define the affected metric as 0."""
    if min(tp, fp, fn) < 0:
        raise ContractError(f"confusion counts must be non-negative: {(tp, fp, fn)}")
    if tp + fp == 0 or tp + fn == 0:
        logger.debug("zero denominator in precision/recall (tp=%d fp=%d fn=%d)", tp, fp, fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _ranking(scores, labels) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be equal-length 1-D sequences")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be binary")
    # stable sort on negated scores keeps original order among ties
    return labels[np.argsort(-scores, kind="stable")].astype(np.int64)


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall after each position of the descending-score ranking."""
    ranked = _ranking(scores, labels)
    n_pos = int(ranked.sum())
    if n_pos == 0:
        raise UndefinedMetricError("no positive labels")
    tp = np.cumsum(ranked)
    precision = tp / np.arange(1, len(ranked) + 1)
    recall = tp / n_pos
    return precision, recall


def average_precision(scores, labels) -> float:
    """Sum over the ranking of (recall gain) x precision, no interpolation."""
    precision, recall = pr_curve(scores, labels)
    gains = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(gains * precision))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


@dataclass
class ClassMetrics:
    label: str
    support: int
    precision: float
    recall: float
    f1: float
    ap: float | None


@dataclass
class HeadReport:
    head: str
    classes: list[ClassMetrics]
    macro: dict[str, float]
    micro: dict[str, float]
    accuracy: float
    confusion: list[list[int]]
    pr_curves: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)


def evaluate_head(probs: np.ndarray, y_true: Sequence[int], labels: Sequence[str],
                  head: str = "head", curves: bool = True) -> HeadReport:
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    n, c = probs.shape
    if c != len(labels) or len(y_true) != n:
        raise ContractError("probability matrix does not match labels")
    if n and not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ContractError("probability rows must sum to 1")
    y_pred = np.argmax(probs, axis=1)
    cm = confusion_matrix(y_true, y_pred, c)
    rows, macro_rows, excluded = [], [], []
    pr_curves = {}
    for k, name in enumerate(labels):
        tp = int(cm[k, k])
        fp = int(cm[:, k].sum()) - tp
        fn = int(cm[k, :].sum()) - tp
        support = tp + fn
        if support == 0 and tp + fp == 0:
            excluded.append(name)
            logger.debug("%s: class %s absent from truth and predictions", head, name)
            continue
        p, r, f = precision_recall_f1(tp, fp, fn)
        ap = None
        if support:
            binary = (y_true == k).astype(np.int64)
            ap = average_precision(probs[:, k], binary)
            if curves:
                prec, rec = pr_curve(probs[:, k], binary)
                pr_curves[name] = {"recall": rec.tolist(), "precision": prec.tolist()}
        else:
            logger.info("%s: class %s has no positives; AP undefined, excluded from macro",
                        head, name)
        row = ClassMetrics(name, support, p, r, f, ap)
        rows.append(row)
        if support:
            macro_rows.append(row)

    def mean(values):
        return float(np.mean(values)) if values else 0.0

    macro = {"precision": mean([r.precision for r in macro_rows]),
             "recall": mean([r.recall for r in macro_rows]),
             "f1": mean([r.f1 for r in macro_rows]),
             "ap": mean([r.ap for r in macro_rows])}
    tp = int(np.trace(cm))
    # single-label multi-class: every miss is one FP and one FN
    mp, mr, mf = precision_recall_f1(tp, n - tp, n - tp)
    micro = {"precision": mp, "recall": mr, "f1": mf}
    return HeadReport(head, rows, macro, micro, float(tp / n) if n else 0.0, cm.tolist(),
                      pr_curves, excluded)


@dataclass
class EvalReport:
    heads: dict[str, HeadReport]
    provenance: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def macro(self, metric: str = "f1") -> dict[str, float]:
        return {h: r.macro[metric] for h, r in self.heads.items()}

    def mean_macro(self, metric: str = "f1") -> float:
        return float(np.mean([r.macro[metric] for r in self.heads.values()]))

    def to_dict(self, include_metadata: bool = True) -> dict:
        doc = {"heads": {h: asdict(r) for h, r in self.heads.items()},
               "provenance": self.provenance}
        if include_metadata:
            doc["metadata"] = self.metadata
        return doc

    def to_json(self, include_metadata: bool = True) -> str:
        return json.dumps(self.to_dict(include_metadata), indent=1, sort_keys=True)

    def curves_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["head", "class", "recall", "precision"])
        for h, rep in self.heads.items():
            for name, curve in rep.pr_curves.items():
                for r, p in zip(curve["recall"], curve["precision"]):
                    writer.writerow([h, name, repr(r), repr(p)])
        return buf.getvalue()


def one_vs_all_report(probs: Sequence[np.ndarray], y_true: np.ndarray, schema,
                      provenance: dict | None = None, curves: bool = True) -> EvalReport:
    """``probs`` holds one [n, classes] matrix per head; ``y_true`` is [n, 3]."""
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1, 3)
    names = (schema.host_categories, schema.ha_classes, schema.na_classes)
    heads = {h: evaluate_head(p, y_true[:, j], names[j], h, curves)
             for j, (h, p) in enumerate(zip(HEADS, probs))}
    return EvalReport(heads, dict(provenance or {}))


def summarize(reports: Sequence[EvalReport]) -> dict:
    """Mean, standard deviation and a normal-approximation 95% interval across folds.

    The interval is mean +/- 1.96 * standard error of the per-fold values.
    """
    out: dict = {"n_folds": len(reports), "interval": "mean +/- 1.96*SE over folds", "heads": {}}
    if not reports:
        return out
    for h in reports[0].heads:
        out["heads"][h] = {}
        for metric in ("precision", "recall", "f1", "ap"):
            vals = np.array([r.heads[h].macro[metric] for r in reports])
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            se = sd / math.sqrt(len(vals))
            m = float(vals.mean())
            out["heads"][h][metric] = {"mean": m, "std": sd,
                                       "ci95": [m - 1.96 * se, m + 1.96 * se]}
    out["overall"] = {metric: float(np.mean([out["heads"][h][metric]["mean"]
                                             for h in out["heads"]]))
                      for metric in ("f1", "ap")}
    return out
