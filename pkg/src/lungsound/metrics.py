"""ICBHI-style evaluation: SE/SP/AS/HS, crackle P+/Se/F1, majority voting.

Class 0 is the normal/healthy class for every task. Sensitivity counts only
abnormal units predicted as their exact class.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyPredictions, LengthMismatch
from .ingest import TASK_CLASSES


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


@dataclass
class MetricsReport:
    task: str
    confusion: np.ndarray  # rows: true label, cols: predicted
    SE: float
    SP: float
    AS: float
    HS: float
    n_units: int
    precision: float | None = None   # P+
    recall: float | None = None      # Se
    F1: float | None = None
    fold: int = 0
    run_seed: int = 0
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("confusion")
        d.pop("extra")
        d["confusion"] = ";".join(",".join(str(int(v)) for v in r) for r in self.confusion)
        return {**d, **self.extra}


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, t in zip(preds, labels):
        cm[int(t), int(p)] += 1
    return cm


def scores_from_confusion(cm: np.ndarray) -> tuple[float, float, float, float]:
    sp = _ratio(cm[0, 0], cm[0].sum())
    se = _ratio(np.trace(cm[1:, 1:]), cm[1:].sum())
    as_ = (se + sp) / 2
    hs = 2 * se * sp / (se + sp) if se + sp > 0 else 0.0
    return se, sp, as_, hs


def compute_metrics(preds: Sequence[int], labels: Sequence[int], task: str,
                    fold: int = 0, run_seed: int = 0) -> MetricsReport:
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    n_classes = len(TASK_CLASSES[task])
    cm = confusion_matrix(preds, labels, n_classes)
    se, sp, as_, hs = scores_from_confusion(cm)
    report = MetricsReport(task, cm, se, sp, as_, hs, int(cm.sum()), fold=fold, run_seed=run_seed)
    if task == "crackle2":
        tp = cm[1, 1]
        report.precision = _ratio(tp, cm[:, 1].sum())
        report.recall = _ratio(tp, cm[1].sum())
        pr, rc = report.precision, report.recall
        report.F1 = 2 * pr * rc / (pr + rc) if pr + rc > 0 else 0.0
    return report


def majority_vote(segment_predictions: Sequence[int],
                  tiebreak_probs: Sequence[Sequence[float]] | None = None) -> int:
    """Most frequent label; ties go to the tied label with the highest mean probability."""
    if len(segment_predictions) == 0:
        raise EmptyPredictions("nothing to vote on")
    counts = Counter(int(p) for p in segment_predictions)
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if len(tied) == 1 or tiebreak_probs is None:
        return tied[0]
    mean = np.asarray(tiebreak_probs, dtype=np.float64).mean(axis=0)
    return max(tied, key=lambda c: (mean[c], -c))


def aggregate_units(unit_ids: Sequence[str], seg_probs: np.ndarray) -> tuple[list[str], list[int]]:
    """Majority vote of segment argmax predictions grouped by unit (first-seen order)."""
    groups: dict[str, list[int]] = defaultdict(list)
    for i, u in enumerate(unit_ids):
        groups[u].append(i)
    units, preds = [], []
    for u, idx in groups.items():
        probs = seg_probs[idx]
        units.append(u)
        preds.append(majority_vote(probs.argmax(axis=1).tolist(), probs))
    return units, preds


def summarize(reports: Sequence[MetricsReport], keys=("SE", "SP", "AS", "HS")) -> dict:
    out = {}
    for k in keys:
        vals = np.array([getattr(r, k) for r in reports if getattr(r, k) is not None], dtype=float)
        if len(vals):
            out[f"{k}_mean"] = float(vals.mean())
            out[f"{k}_std"] = float(vals.std())
    return out
