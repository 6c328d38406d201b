"""AUC and accuracy over pooled valid target steps."""

import numpy as np
from sklearn import metrics

ACC_THRESHOLD = 0.5


class UndefinedMetricError(ValueError):
    """Raised when AUC is requested for a single-class label set."""


def roc_auc(predictions: np.ndarray, labels: np.ndarray) -> float:
    """
    Probability that a random positive outranks a random negative, ties
    counting one half.

    Raises:
        UndefinedMetricError: If the labels contain only one class.
        ValueError: If the inputs differ in length.
    """
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions but {labels.size} labels")
    if np.unique(labels).size < 2:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return float(metrics.roc_auc_score(labels, predictions))


def accuracy(predictions: np.ndarray, labels: np.ndarray, threshold: float = ACC_THRESHOLD) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if predictions.size == 0:
        raise ValueError("Accuracy of an empty prediction set")
    return float(metrics.accuracy_score(labels, (predictions >= threshold).astype(np.int64)))
