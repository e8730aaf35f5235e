"""
Classification metrics built from a confusion matrix.

Rows of the matrix are gold classes and columns are predicted classes. The
per-class F1 is ``2 TP / (2 TP + FP + FN)``, which equals ``2PR / (P + R)``
and is 0 when that denominator vanishes. The weighted average F1 weights each
class by its gold support.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ClassIndexError


def _safe_ratio(numerator, denominator):
    numerator = np.asarray(numerator, dtype=np.float64)
    denominator = np.asarray(denominator, dtype=np.float64)
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=denominator > 0)
    return out


@dataclass(frozen=True)
class Metrics:
    confusion: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.confusion)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] == 0:
            raise ArgumentError(f'confusion matrix must be square and non-empty, got shape {matrix.shape}')
        if np.any(matrix < 0):
            raise ArgumentError('confusion counts must be non-negative')
        object.__setattr__(self, 'confusion', matrix.astype(np.int64))

    @property
    def n_classes(self):
        return self.confusion.shape[0]

    @property
    def total(self):
        return int(self.confusion.sum())

    @property
    def support(self):
        return self.confusion.sum(axis=1)

    @property
    def true_positives(self):
        return np.diag(self.confusion)

    @property
    def precision(self):
        return _safe_ratio(self.true_positives, self.confusion.sum(axis=0))

    @property
    def recall(self):
        return _safe_ratio(self.true_positives, self.support)

    @property
    def per_class_f1(self):
        tp = self.true_positives
        fp = self.confusion.sum(axis=0) - tp
        fn = self.support - tp
        return _safe_ratio(2 * tp, 2 * tp + fp + fn)

    @property
    def waf1(self):
        if self.total == 0:
            return 0.0
        return float(np.dot(self.support, self.per_class_f1) / self.total)

    @property
    def accuracy(self):
        if self.total == 0:
            return 0.0
        return float(self.true_positives.sum() / self.total)

    def to_dict(self, labels=None):
        labels = list(labels) if labels is not None else [str(k) for k in range(self.n_classes)]
        return {
            'waf1': self.waf1,
            'accuracy': self.accuracy,
            'n_samples': self.total,
            'labels': labels,
            'per_class': [
                {
                    'label': label,
                    'support': int(self.support[k]),
                    'precision': float(self.precision[k]),
                    'recall': float(self.recall[k]),
                    'f1': float(self.per_class_f1[k]),
                }
                for k, label in enumerate(labels)
            ],
            'confusion': self.confusion.tolist(),
        }

    @classmethod
    def from_predictions(cls, gold, predicted, n_classes):
        """
        Counts (gold, predicted) pairs.

        :raises ClassIndexError: an index lies outside ``0..n_classes-1``.
        """
        gold = np.asarray(gold, dtype=int).reshape(-1)
        predicted = np.asarray(predicted, dtype=int).reshape(-1)
        if gold.shape != predicted.shape:
            raise ArgumentError(f'{gold.size} gold labels but {predicted.size} predictions')
        for name, values in (('gold', gold), ('predicted', predicted)):
            if values.size and (values.min() < 0 or values.max() >= n_classes):
                raise ClassIndexError(f'{name} class index outside 0..{n_classes - 1}')
        matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(matrix, (gold, predicted), 1)
        return cls(matrix)
