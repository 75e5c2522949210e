"""Confusion matrix and the WAR / top-k / precision / F1 metrics (all in percent)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyEvaluation, LengthMismatch
from .labels import LABEL_NAMES, NUM_CLASSES


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true label, cols: predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion(predictions, targets, num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64).ravel()
    targs = np.asarray(targets, dtype=np.int64).ravel()
    if preds.shape != targs.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {targs.size} targets")
    for name, arr in (("prediction", preds), ("target", targs)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} values must lie in 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (targs, preds), 1)
    return ConfusionMatrix(counts)


def _require_samples(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise EmptyEvaluation("no samples evaluated")


def recall_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class recall; NaN where a class has no support."""
    support = cm.support
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm.counts) / support, np.nan)


def war(cm: ConfusionMatrix) -> float:
    """Support-weighted average recall over classes present in the targets.

    Weighting recall_c = tp_c / support_c by support_c / N cancels the
    support, so the sum is evaluated as sum(tp) / N to avoid rounding.
    """
    _require_samples(cm)
    return 100.0 * float(np.trace(cm.counts)) / cm.total


def top_k_accuracy(logits, targets, k: int) -> float:
    """Percent of rows whose target is among the k largest logits.

    Equal logits rank the lower class index first.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise LengthMismatch(f"logits {logits.shape} vs {targets.size} targets")
    if not 1 <= k <= logits.shape[1]:
        raise ValueError(f"k must be in 1..{logits.shape[1]}")
    if targets.size == 0:
        raise EmptyEvaluation("no samples evaluated")
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hits = (order == targets[:, None]).any(axis=1)
    return 100.0 * float(hits.mean())


def precision_f1(cm: ConfusionMatrix) -> tuple[float, float, dict]:
    """Macro precision and F1 over classes with nonzero support, plus per-class values."""
    _require_samples(cm)
    tp = np.diag(cm.counts).astype(np.float64)
    col = cm.counts.sum(axis=0)
    support = cm.support
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    present = support > 0
    per_class = {"precision": 100 * precision, "recall": 100 * recall, "f1": 100 * f1}
    return (
        100.0 * float(precision[present].mean()),
        100.0 * float(f1[present].mean()),
        per_class,
    )


@dataclass
class MetricReport:
    dataset: str
    n_samples: int
    war: float
    top_k_acc: dict[int, float]
    precision_macro: float
    f1_macro: float
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)
    note: str = ""

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["top_k_acc"] = {str(k): v for k, v in self.top_k_acc.items()}
        return rec


def evaluate(logits, targets, dataset: str = "", ks=(1, 2)) -> MetricReport:
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    preds = np.argmax(logits, axis=1) if logits.size else np.empty(0, dtype=np.int64)
    cm = confusion(preds, targets, logits.shape[1] if logits.ndim == 2 else NUM_CLASSES)
    prec, f1, per = precision_f1(cm)
    names = LABEL_NAMES if cm.counts.shape[0] == NUM_CLASSES else [str(i) for i in range(len(cm.counts))]
    return MetricReport(
        dataset=dataset,
        n_samples=cm.total,
        war=war(cm),
        top_k_acc={k: top_k_accuracy(logits, targets, k) for k in ks},
        precision_macro=prec,
        f1_macro=f1,
        per_class={
            name: {m: float(per[m][i]) for m in ("precision", "recall", "f1")}
            for i, name in enumerate(names)
        },
        confusion=cm.counts.tolist(),
    )
