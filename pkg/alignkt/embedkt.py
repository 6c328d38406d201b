"""
Concept and state embeddings with the modified Rasch-model supplement.

    c_t = (1 - a1) * c_t + a1 * mu_e * (d_c + f_diff(mu_e))
    s_t = (1 - a2) * s_t + a2 * mu_e * (d_s + f_diff(mu_e))

mu_e is a learnable per-exercise difficulty scalar and f_diff an affine map
from that scalar to d dimensions.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from alignkt.numcore import ParamStore, Tensor, gather_rows, reshape, where

INIT_STD = 0.02


@dataclass
class EmbeddingTables:
    """
    Embedding parameters. The [MASK] row is the last row of both the concept
    and the state table. The state table also serves the ideal states.
    """
    n_concepts: int
    n_exercises: int
    concept_table: Tensor
    state_table: Tensor
    variation_c: Optional[Tensor] = None
    variation_s: Optional[Tensor] = None
    difficulty: Optional[Tensor] = None
    fdiff_weight: Optional[Tensor] = None
    fdiff_bias: Optional[Tensor] = None

    @property
    def has_mrme(self) -> bool:
        return self.difficulty is not None

    @property
    def d(self) -> int:
        return self.concept_table.shape[1]


def create_tables(params: ParamStore, n_concepts: int, n_exercises: int, d: int,
                  rng: np.random.Generator, with_mrme: bool = True) -> EmbeddingTables:
    """Register embedding parameters; without M-RME only the two plain tables exist."""
    tables = EmbeddingTables(
        n_concepts=n_concepts,
        n_exercises=n_exercises,
        concept_table=params.add('embed.concept', rng.normal(0.0, INIT_STD, (n_concepts + 1, d))),
        state_table=params.add('embed.state', rng.normal(0.0, INIT_STD, (2 * n_concepts + 1, d))),
    )
    if with_mrme:
        tables.variation_c = params.add('mrme.var_concept', rng.normal(0.0, INIT_STD, (n_concepts, d)))
        tables.variation_s = params.add('mrme.var_state', rng.normal(0.0, INIT_STD, (2 * n_concepts, d)))
        tables.difficulty = params.add('mrme.difficulty', np.zeros(n_exercises))
        tables.fdiff_weight = params.add('mrme.fdiff_weight', rng.normal(0.0, INIT_STD, d))
        tables.fdiff_bias = params.add('mrme.fdiff_bias', np.zeros(d))
    return tables


def _blend(base_table: Tensor, variation: Optional[Tensor], ids: np.ndarray, exercises: np.ndarray,
           tables: EmbeddingTables, mask_id: int, a: float) -> Tensor:
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"Mixing weight must be in [0, 1], got {a}")
    ids = np.asarray(ids, dtype=np.int64)
    base = gather_rows(base_table, ids)
    if not tables.has_mrme:
        return base

    # [MASK] positions keep the plain mask row
    real = ids != mask_id
    mu = gather_rows(tables.difficulty, exercises)
    mu = reshape(mu, mu.shape + (1,))
    f_diff = mu * tables.fdiff_weight + tables.fdiff_bias
    supplement = mu * (gather_rows(variation, np.where(real, ids, 0)) + f_diff)
    blended = base * (1.0 - a) + supplement * a
    if real.all():
        return blended
    return where(real[..., None], blended, base)


def embed_concepts(concepts: np.ndarray, exercises: np.ndarray, tables: EmbeddingTables,
                   a1: float) -> Tensor:
    """
    Concept embeddings blended with the exercise supplement.

    Args:
        concepts: Concept ids (N_c is the [MASK] id).
        exercises: Exercise ids of the same shape.
        tables: Embedding parameters.
        a1: Supplement proportion in [0, 1].

    Returns:
        Tensor of shape concepts.shape + (d,).

    Raises:
        IndexError: If an id is out of range.
        ValueError: If a1 is outside [0, 1].
    """
    return _blend(tables.concept_table, tables.variation_c, concepts, exercises, tables,
                  tables.n_concepts, a1)


def embed_states(states: np.ndarray, exercises: np.ndarray, tables: EmbeddingTables,
                 a2: float) -> Tensor:
    """State embeddings, s = c + N_c * r, blended like embed_concepts (2 * N_c is [MASK])."""
    return _blend(tables.state_table, tables.variation_s, states, exercises, tables,
                  2 * tables.n_concepts, a2)


def ideal_state_ids(n_concepts: int) -> np.ndarray:
    """Ids of the all-mastered states, c + N_c for every concept c."""
    if n_concepts < 1:
        raise ValueError(f"n_concepts must be at least 1, got {n_concepts}")
    return np.arange(n_concepts, 2 * n_concepts, dtype=np.int64)


def embed_ideal_states(tables: EmbeddingTables, order: Optional[np.ndarray] = None) -> Tensor:
    """
    Rows of the state table for the ideal states (no exercise, no blending).

    Args:
        tables: Embedding parameters.
        order: Optional permutation of concept indices.

    Returns:
        Tensor of shape (N_c, d).
    """
    ids = ideal_state_ids(tables.n_concepts)
    if order is not None:
        ids = ids[np.asarray(order, dtype=np.int64)]
    return gather_rows(tables.state_table, ids)


def embed_concept_candidates(tables: EmbeddingTables, a1: float) -> Tensor:
    """
    Every concept embedding as it enters with a zero-difficulty exercise.

    Returns:
        Tensor of shape (N_c, d).
    """
    if not 0.0 <= a1 <= 1.0:
        raise ValueError(f"Mixing weight must be in [0, 1], got {a1}")
    base = gather_rows(tables.concept_table, np.arange(tables.n_concepts, dtype=np.int64))
    if not tables.has_mrme:
        return base
    return base * (1.0 - a1)
