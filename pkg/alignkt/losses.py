"""Prediction and contrastive losses."""

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from alignkt.numcore import Tensor, as_tensor, clamp, cosine_similarity, softplus

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


def bce_loss(predictions: Tensor, targets: np.ndarray, valid: np.ndarray) -> Tensor:
    """
    Mean binary cross-entropy over valid target steps.

    Args:
        predictions: Probabilities, clamped to [1e-7, 1 - 1e-7].
        targets: 0/1 labels of the same shape.
        valid: Steps to score.

    Raises:
        ValueError: If no step is valid.
    """
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("No valid target steps to score")
    r = np.asarray(targets, dtype=np.float64)
    weight = valid.astype(np.float64)
    p = clamp(as_tensor(predictions), PROB_FLOOR, 1.0 - PROB_FLOOR)
    log_likelihood = p.log() * (r * weight) + (1.0 - p).log() * ((1.0 - r) * weight)
    return -(log_likelihood.sum() * (1.0 / count))


def pool_valid(x: Tensor, valid: np.ndarray) -> Tensor:
    """
    Mean over valid steps: (B, T, d) -> (B, d).

    Raises:
        ValueError: If a sequence has no valid step.
    """
    valid = np.asarray(valid, dtype=np.float64)
    counts = valid.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("Cannot pool a sequence with no valid steps")
    return (x * valid[..., None]).sum(axis=1) * (1.0 / counts)


def infonce(anchor: Tensor, positive: Tensor, negative: Tensor, temperature: float) -> Tensor:
    """
    Two-term InfoNCE averaged over the batch:

        -log(e^(sim(a,p)/tau) / (e^(sim(a,n)/tau) + e^(sim(a,p)/tau)))
          = softplus((sim(a,n) - sim(a,p)) / tau)

    Args:
        anchor, positive, negative: (B, d) or (d,) representations.
        temperature: tau > 0.

    Raises:
        ValueError: If tau <= 0 or a vector has zero norm.
    """
    if temperature <= 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")
    sim_pos = cosine_similarity(anchor, positive)
    sim_neg = cosine_similarity(anchor, negative)
    return softplus((sim_neg - sim_pos) * (1.0 / temperature)).mean()


@dataclass
class LossReport:
    """
    Components of the training objective; total = bce + cl_weight * (cl_c + cl_s).

    The *_value fields are plain floats for logging and the metrics file.
    """
    bce: Tensor
    cl_c: Tensor
    cl_s: Tensor
    total: Tensor
    cl_weight: float
    temperature: float
    values: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.values = {name: getattr(self, name).item() for name in ('bce', 'cl_c', 'cl_s', 'total')}


def total_loss(bce: Tensor, cl_c: Tensor, cl_s: Tensor, cl_weight: float,
               temperature: float) -> LossReport:
    """
    Combine the prediction loss with the weighted contrastive terms.

    Raises:
        ValueError: If cl_weight is negative.
    """
    if cl_weight < 0:
        raise ValueError(f"Contrastive weight must be non-negative, got {cl_weight}")
    bce, cl_c, cl_s = as_tensor(bce), as_tensor(cl_c), as_tensor(cl_s)
    total = bce + (cl_c + cl_s) * cl_weight
    return LossReport(bce=bce, cl_c=cl_c, cl_s=cl_s, total=total, cl_weight=cl_weight,
                      temperature=temperature)
