"""Synthetic interaction logs generated from known response rules."""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

from alignkt.dataio import REQUIRED_COLUMNS

logger = logging.getLogger(__name__)


class SynthRule(Enum):
    """Supported ground-truth response rules."""
    SEEN_BEFORE = "seen-before"
    ALWAYS_CORRECT = "always-correct"
    MASTERED_AFTER_K = "mastered-after-k"
    FOCUS_CONCEPT = "focus-concept"
    RANDOM = "random"


def generate_interactions(n_learners: int, seed: int = 0,
                          rule: Union[str, SynthRule] = SynthRule.SEEN_BEFORE,
                          n_concepts: int = 10, exercises_per_concept: int = 3,
                          min_len: int = 20, max_len: int = 200, k: int = 2,
                          focus_concept: int = 0, p_correct: float = 0.5) -> pd.DataFrame:
    """
    Generate an interaction log under a response rule.

    Rules:
        seen-before: correct iff the concept appeared earlier for this learner.
        always-correct: every response is 1 (single class, AUC is undefined).
        mastered-after-k: correct iff the concept was seen at least k times before.
        focus-concept: the focus concept is always correct, others are coin flips.
        random: independent Bernoulli(p_correct) responses.

    Args:
        n_learners: Number of learners, at least 1.
        seed: Seed for every random draw.
        rule: One of the rules above.
        n_concepts: Number of concepts.
        exercises_per_concept: Exercises attached to each concept.
        min_len: Minimum interactions per learner.
        max_len: Maximum interactions per learner.
        k: Exposure threshold for mastered-after-k.
        focus_concept: Concept id for focus-concept.
        p_correct: Success probability for the random rules.

    Returns:
        DataFrame with the standard interaction columns.

    Raises:
        ValueError: On invalid sizes or an unknown rule.
    """
    rule = SynthRule(rule)
    if n_learners < 1:
        raise ValueError(f"n_learners must be at least 1, got {n_learners}")
    if not 2 <= min_len <= max_len:
        raise ValueError(f"Need 2 <= min_len <= max_len, got {min_len}, {max_len}")
    if not 0 <= focus_concept < n_concepts:
        raise ValueError(f"focus_concept {focus_concept} outside [0, {n_concepts})")

    rng = np.random.default_rng(seed)
    rows = []
    for learner in range(n_learners):
        length = int(rng.integers(min_len, max_len + 1))
        exposures = np.zeros(n_concepts, dtype=np.int64)
        for order in range(length):
            concept = int(rng.integers(n_concepts))
            exercise = concept * exercises_per_concept + int(rng.integers(exercises_per_concept))
            coin = int(rng.random() < p_correct)
            if rule is SynthRule.SEEN_BEFORE:
                response = int(exposures[concept] > 0)
            elif rule is SynthRule.ALWAYS_CORRECT:
                response = 1
            elif rule is SynthRule.MASTERED_AFTER_K:
                response = int(exposures[concept] >= k)
            elif rule is SynthRule.FOCUS_CONCEPT:
                response = 1 if concept == focus_concept else coin
            else:
                response = coin
            exposures[concept] += 1
            rows.append((f"L{learner:05d}", order, exercise, concept, response))
    return pd.DataFrame(rows, columns=REQUIRED_COLUMNS)


def rule_manifest(rule: Union[str, SynthRule], **params: Any) -> Dict[str, Any]:
    return {'rule': SynthRule(rule).value, **params}


def write_synthetic(path: Union[str, Path], n_learners: int, seed: int = 0,
                    rule: Union[str, SynthRule] = SynthRule.SEEN_BEFORE, **kwargs: Any) -> Path:
    """
    Write a synthetic CSV plus a `<name>.rule.json` sidecar with the ground truth.

    Returns:
        Path of the sidecar.
    """
    path = Path(path)
    frame = generate_interactions(n_learners, seed=seed, rule=rule, **kwargs)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator='\n')
    sidecar = path.with_name(path.name + '.rule.json')
    with open(sidecar, 'w') as f:
        json.dump(rule_manifest(rule, n_learners=n_learners, seed=seed, **kwargs), f,
                  indent=2, sort_keys=True)
    logger.info("Wrote %d interactions for %d learners to %s", len(frame), n_learners, path)
    return sidecar
