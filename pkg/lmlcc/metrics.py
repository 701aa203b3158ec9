"""Confusion-matrix statistics, ROC curve and AUC.

Undefined statistics (zero denominators) are reported as None and listed in
``BasicMetrics.undefined`` instead of being coerced to zero.

"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import auc, confusion_matrix, roc_curve

from .errors import InsufficientDataError, ShapeError, ValidationError
from .preprocess import unit_to_hu

REPORT_COLUMNS = ['n', 'tp', 'tn', 'fp', 'fn', 'acc', 'pre', 'sen', 'spe',
                  'auc', 'threshold', 'learned_cuts', 'learned_cuts_hu']


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValidationError('confusion counts must be non-negative')

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class BasicMetrics:
    """Accuracy, precision, sensitivity and specificity; None if undefined."""
    acc: Optional[float]
    pre: Optional[float]
    sen: Optional[float]
    spe: Optional[float]

    @property
    def undefined(self) -> List[str]:
        return [k for k in ('acc', 'pre', 'sen', 'spe')
                if getattr(self, k) is None]


@dataclass
class EvalReport:
    """Evaluation of a classifier on one patch set.

    Attributes:
        counts: Confusion counts at threshold.
        metrics: Basic metrics from the counts.
        roc: (fpr, tpr) points from (0, 0) to (1, 1).
        auc: Area under the ROC curve.
        threshold: Probability threshold of the positive class.
        learned_cuts: Window cuts of the model in [0, 1], when it has any.

    """
    counts: ConfusionCounts
    metrics: BasicMetrics
    roc: List[Tuple[float, float]]
    auc: float
    threshold: float = 0.5
    learned_cuts: Optional[List[float]] = field(default=None)

    @property
    def learned_cuts_hu(self) -> Optional[List[float]]:
        if self.learned_cuts is None:
            return None

        return [float(c) for c in unit_to_hu(self.learned_cuts)]

    def to_frame(self) -> pd.DataFrame:
        """One-row metrics table."""
        def fmt(cuts):
            return '' if cuts is None else ';'.join(f'{c:.6g}' for c in cuts)

        row = {
            'n': self.counts.total, 'tp': self.counts.tp,
            'tn': self.counts.tn, 'fp': self.counts.fp, 'fn': self.counts.fn,
            'acc': self.metrics.acc, 'pre': self.metrics.pre,
            'sen': self.metrics.sen, 'spe': self.metrics.spe,
            'auc': self.auc, 'threshold': self.threshold,
            'learned_cuts': fmt(self.learned_cuts),
            'learned_cuts_hu': fmt(self.learned_cuts_hu)
        }

        return pd.DataFrame([row], columns=REPORT_COLUMNS)

    def summary(self) -> str:
        def pct(v):
            return 'undefined' if v is None else f'{100 * v:.2f}%'

        lines = [
            f'n={self.counts.total} tp={self.counts.tp} tn={self.counts.tn} '
            f'fp={self.counts.fp} fn={self.counts.fn}',
            f'accuracy {pct(self.metrics.acc)}, precision '
            f'{pct(self.metrics.pre)}, sensitivity {pct(self.metrics.sen)}, '
            f'specificity {pct(self.metrics.spe)}, AUC {self.auc:.4f}'
        ]

        if self.learned_cuts is not None:
            lines.append('cuts (HU): ' + ', '.join(
                f'{c:.1f}' for c in self.learned_cuts_hu))

        return '\n'.join(lines)


def _check_inputs(labels, probs) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    probs = np.asarray(probs, dtype=np.float64)

    if labels.shape != probs.shape or labels.ndim != 1:
        raise ShapeError(f'{labels.size} labels for {probs.size} '
                         'probabilities')
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError('labels must be 0 or 1')

    return labels.astype(int), probs


def confusion(labels: Sequence[int], probs: Sequence[float],
              threshold: float = 0.5) -> ConfusionCounts:
    """Counts with predicted = probability >= threshold."""
    labels, probs = _check_inputs(labels, probs)
    preds = (probs >= threshold).astype(int)

    tn, fp, fn, tp = confusion_matrix(labels, preds, labels=[0, 1]).ravel()

    return ConfusionCounts(int(tp), int(tn), int(fp), int(fn))


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def basic_metrics(c: ConfusionCounts) -> BasicMetrics:
    return BasicMetrics(
        acc=_ratio(c.tp + c.tn, c.total),
        pre=_ratio(c.tp, c.tp + c.fp),
        sen=_ratio(c.tp, c.tp + c.fn),
        spe=_ratio(c.tn, c.tn + c.fp)
    )


def roc_auc(labels: Sequence[int], probs: Sequence[float]
            ) -> Tuple[List[Tuple[float, float]], float]:
    """ROC points (one vertex per distinct score) and trapezoidal AUC.

    Raises:
        InsufficientDataError: Only one class present.

    """
    labels, probs = _check_inputs(labels, probs)

    if len(np.unique(labels)) < 2:
        raise InsufficientDataError('ROC needs at least one positive and one '
                                    'negative sample')

    fpr, tpr, _ = roc_curve(labels, probs, drop_intermediate=False)

    return list(zip(fpr.tolist(), tpr.tolist())), float(auc(fpr, tpr))


def evaluate_probs(labels: Sequence[int], probs: Sequence[float],
                   threshold: float = 0.5,
                   learned_cuts: Optional[Sequence[float]] = None
                   ) -> EvalReport:
    """Full report from labels and predicted probabilities."""
    counts = confusion(labels, probs, threshold)
    roc, area = roc_auc(labels, probs)

    return EvalReport(counts, basic_metrics(counts), roc, area, threshold,
                      None if learned_cuts is None else list(learned_cuts))


def write_report(report: EvalReport, csv_path: str):
    report.to_frame().to_csv(csv_path, index=False)


def write_roc(report: EvalReport, csv_path: str):
    pd.DataFrame(report.roc, columns=['fpr', 'tpr']).to_csv(csv_path,
                                                            index=False)
