'''
Confusion matrices and unweighted average recall.
'''
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rawspeech_app.constants import EMOTION_ORDER


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    '''counts[true, predicted]'''
    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)

        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f'Confusion matrix must be square, got shape {counts.shape}')
        if np.any(counts < 0):
            raise ValueError('Confusion counts cannot be negative')

        counts.setflags(write=False)
        object.__setattr__(self, 'counts', counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def recalls(self) -> np.ndarray:
        '''Per-class recall; NaN for classes without support'''
        support = self.support
        diag = np.diag(self.counts).astype(np.float64)
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(support > 0, diag / support, np.nan)

    def missing_classes(self) -> list[str]:
        names = class_names(self.n_classes)
        return [names[i] for i in np.flatnonzero(self.support == 0)]

    def tolist(self) -> list[list[int]]:
        return self.counts.tolist()


def class_names(n_classes: int) -> list[str]:
    if n_classes == len(EMOTION_ORDER):
        return [emotion.value for emotion in EMOTION_ORDER]
    return [str(i) for i in range(n_classes)]


def confusion_matrix(y_true, y_pred, n_classes: int = len(EMOTION_ORDER)) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)

    if y_true.shape != y_pred.shape:
        raise ValueError(f'Label/prediction length mismatch: {y_true.shape} vs {y_pred.shape}')
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes):
        raise ValueError(f'Labels must be in 0..{n_classes - 1}')

    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)

    return ConfusionMatrix(counts)


def uar(cm: ConfusionMatrix) -> float:
    '''
    Mean recall over classes that have support. Classes without support are
    left out of the mean (see `ConfusionMatrix.missing_classes`).
    '''
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(cm)

    if cm.support.sum() == 0:
        raise ValueError('UAR is undefined for an all-zero confusion matrix')

    recalls = cm.recalls()
    return float(np.mean(recalls[~np.isnan(recalls)]))
