"""
Interaction logs: CSV ingestion, windowing, batching and augmentation.

Input CSV (UTF-8, header required):
    learner_id,order,exercise_id,concept_id,response

One row is one (exercise, concept, response) triple. Exercises tagged with
several concepts must be expanded upstream into one row per concept.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ['learner_id', 'order', 'exercise_id', 'concept_id', 'response']
DEFAULT_MAX_LEN = 200

SeedLike = Union[None, int, Sequence[int], np.random.Generator]


class DataFormatError(ValueError):
    """Raised when an input file cannot be parsed; `line` is 1-based (header = 1)."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class Interaction:
    """One learner response, with dense exercise/concept ids."""
    learner_id: str
    exercise: int
    concept: int
    response: int
    order: int


@dataclass
class InteractionSequence:
    """
    One padded window of a learner's history.

    Padding occupies only a suffix of the window; `valid` marks real steps.
    """
    learner_id: str
    exercises: np.ndarray
    concepts: np.ndarray
    responses: np.ndarray
    valid: np.ndarray

    @property
    def length(self) -> int:
        return int(self.valid.sum())

    def interactions(self) -> List[Tuple[int, int, int]]:
        n = self.length
        return list(zip(self.exercises[:n].tolist(), self.concepts[:n].tolist(),
                        self.responses[:n].tolist()))


@dataclass
class DatasetSummary:
    learners: int
    windows: int
    n_exercises: int
    n_concepts: int
    interactions: int
    rejected_rows: int = 0

    @property
    def avg_length(self) -> float:
        return self.interactions / self.learners if self.learners else 0.0

    @property
    def concept_exercise_ratio(self) -> float:
        return self.n_concepts / self.n_exercises if self.n_exercises else 0.0

    def as_rows(self) -> List[Tuple[str, object]]:
        return [
            ('learners', self.learners),
            ('windows', self.windows),
            ('exercises (N_e)', self.n_exercises),
            ('concepts (N_c)', self.n_concepts),
            ('interactions', self.interactions),
            ('avg learner length', round(self.avg_length, 2)),
            ('concept/exercise ratio', round(self.concept_exercise_ratio, 4)),
            ('rejected rows', self.rejected_rows),
        ]


@dataclass
class LoadedInteractions:
    """Result of load_interactions."""
    learners: List[List[Interaction]]
    n_exercises: int
    n_concepts: int
    exercise_ids: List[str] = field(default_factory=list)
    concept_ids: List[str] = field(default_factory=list)
    rejected_rows: int = 0
    dropped_learners: int = 0


@dataclass
class Batch:
    """
    Stacked sequences of shape (B, T) plus derived state ids.

    States are s = c + N_c * r at real positions. The reserved [MASK] ids are
    N_c for concepts and 2 * N_c for states.
    """
    exercises: np.ndarray
    concepts: np.ndarray
    responses: np.ndarray
    states: np.ndarray
    valid: np.ndarray
    n_concepts: int
    learner_ids: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.exercises.shape[0])

    @property
    def length(self) -> int:
        return int(self.exercises.shape[1])

    @property
    def concept_mask_id(self) -> int:
        return self.n_concepts

    @property
    def state_mask_id(self) -> int:
        return 2 * self.n_concepts

    @property
    def target_mask(self) -> np.ndarray:
        """Valid prediction targets, steps 2..T (shape B x T-1)."""
        return self.valid[:, 1:]

    @property
    def targets(self) -> np.ndarray:
        return self.responses[:, 1:]

    @classmethod
    def from_sequences(cls, sequences: Sequence[InteractionSequence], n_concepts: int) -> 'Batch':
        if not sequences:
            raise ValueError("Cannot build a batch from zero sequences")
        exercises = np.stack([s.exercises for s in sequences]).astype(np.int64)
        concepts = np.stack([s.concepts for s in sequences]).astype(np.int64)
        responses = np.stack([s.responses for s in sequences]).astype(np.int64)
        valid = np.stack([s.valid for s in sequences]).astype(bool)
        return cls(exercises=exercises, concepts=concepts, responses=responses,
                   states=state_ids(concepts, responses, n_concepts),
                   valid=valid, n_concepts=n_concepts,
                   learner_ids=[s.learner_id for s in sequences])

    def copy(self) -> 'Batch':
        return replace(self, exercises=self.exercises.copy(), concepts=self.concepts.copy(),
                       responses=self.responses.copy(), states=self.states.copy(),
                       valid=self.valid.copy(), learner_ids=list(self.learner_ids))


def state_ids(concepts: np.ndarray, responses: np.ndarray, n_concepts: int) -> np.ndarray:
    """s = c + N_c * r."""
    return np.asarray(concepts, dtype=np.int64) + n_concepts * np.asarray(responses, dtype=np.int64)


def _dense_index(values: pd.Series) -> Tuple[np.ndarray, List[str]]:
    """Map raw ids to 0..n-1, numeric ids in numeric order, others lexicographically."""
    uniques = pd.unique(values)
    numeric = pd.to_numeric(pd.Series(uniques), errors='coerce')
    if numeric.notna().all():
        ordered = [u for _, u in sorted(zip(numeric.tolist(), uniques.tolist()))]
    else:
        ordered = sorted(uniques.tolist())
    lookup = {raw: i for i, raw in enumerate(ordered)}
    return values.map(lookup).to_numpy(dtype=np.int64), [str(u) for u in ordered]


def load_interactions(path: Union[str, Path]) -> LoadedInteractions:
    """
    Read an interaction log and group it by learner.

    Rows whose response is not 0 or 1 are rejected (counted, logged as a
    warning). Learners left with fewer than two interactions are dropped.

    Args:
        path: CSV file with header learner_id,order,exercise_id,concept_id,response.

    Returns:
        LoadedInteractions with per-learner lists sorted by order and the
        dense vocabulary sizes.

    Raises:
        DataFormatError: On a missing header column, an empty file or a
            non-integer order value (the offending line number is reported).
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.EmptyDataError:
        raise DataFormatError("File is empty", line=1)
    except pd.errors.ParserError as e:
        raise DataFormatError(f"CSV parse failure: {e}")

    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataFormatError(f"Missing header columns: {missing}", line=1)
    if frame.empty:
        raise DataFormatError("File has a header but no rows", line=2)

    frame = frame[REQUIRED_COLUMNS].apply(lambda col: col.str.strip())
    frame['line'] = np.arange(len(frame)) + 2

    order = pd.to_numeric(frame['order'], errors='coerce')
    bad_order = order.isna() | (order != order.round())
    if bad_order.any():
        first = frame.loc[bad_order, 'line'].iloc[0]
        raise DataFormatError(f"order must be an integer, got '{frame.loc[bad_order, 'order'].iloc[0]}'",
                              line=int(first))
    for column in ('exercise_id', 'concept_id', 'learner_id'):
        empty = frame[column] == ''
        if empty.any():
            raise DataFormatError(f"{column} is empty", line=int(frame.loc[empty, 'line'].iloc[0]))

    response = pd.to_numeric(frame['response'], errors='coerce')
    accepted = response.isin([0, 1])
    rejected = int((~accepted).sum())
    if rejected:
        logger.warning("Rejected %d rows with a response outside {0, 1}", rejected)
    frame = frame.loc[accepted].copy()
    frame['order'] = order[accepted].astype(np.int64)
    frame['response'] = response[accepted].astype(np.int64)

    # vocabularies only cover learners that stay
    short = frame.groupby('learner_id')['line'].transform('size') < 2
    dropped = int(frame.loc[short, 'learner_id'].nunique())
    frame = frame.loc[~short].copy()
    if dropped:
        logger.info("Dropped %d learners with fewer than 2 interactions", dropped)

    exercise, exercise_ids = _dense_index(frame['exercise_id'])
    concept, concept_ids = _dense_index(frame['concept_id'])
    frame['exercise'] = exercise
    frame['concept'] = concept

    frame = frame.sort_values(['learner_id', 'order', 'line'], kind='mergesort')
    learners: List[List[Interaction]] = []
    for learner_id, rows in frame.groupby('learner_id', sort=True):
        learners.append([
            Interaction(learner_id=str(learner_id), exercise=int(e), concept=int(c),
                        response=int(r), order=int(o))
            for e, c, r, o in zip(rows['exercise'], rows['concept'], rows['response'], rows['order'])
        ])

    return LoadedInteractions(learners=learners, n_exercises=len(exercise_ids),
                              n_concepts=len(concept_ids), exercise_ids=exercise_ids,
                              concept_ids=concept_ids, rejected_rows=rejected,
                              dropped_learners=dropped)


def window_sequences(learner: Sequence[Interaction], max_len: int = DEFAULT_MAX_LEN) -> List[InteractionSequence]:
    """
    Cut one learner's history into consecutive non-overlapping windows.

    The last window is right-padded; windows shorter than 2 are dropped.

    Raises:
        ValueError: If max_len < 2.
    """
    if max_len < 2:
        raise ValueError(f"max_len must be at least 2, got {max_len}")
    windows = []
    for start in range(0, len(learner), max_len):
        chunk = learner[start:start + max_len]
        if len(chunk) < 2:
            continue
        n = len(chunk)
        exercises = np.zeros(max_len, dtype=np.int64)
        concepts = np.zeros(max_len, dtype=np.int64)
        responses = np.zeros(max_len, dtype=np.int64)
        valid = np.zeros(max_len, dtype=bool)
        exercises[:n] = [i.exercise for i in chunk]
        concepts[:n] = [i.concept for i in chunk]
        responses[:n] = [i.response for i in chunk]
        valid[:n] = True
        windows.append(InteractionSequence(learner_id=chunk[0].learner_id, exercises=exercises,
                                           concepts=concepts, responses=responses, valid=valid))
    return windows


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def augment_positive(batch: Batch, rho_mask: float = 0.2, rho_swap: float = 0.1,
                     rng_seed: SeedLike = None) -> Batch:
    """
    Perturbed copy of a batch for the positive contrastive view.

    Per sequence of valid length n: floor(rho_swap * n) adjacent valid pairs
    are swapped, then floor(rho_mask * n) distinct valid positions get the
    [MASK] concept and state ids. Responses and padding are untouched.

    Raises:
        ValueError: If a rate is outside [0, 0.5].
    """
    for name, rate in (('rho_mask', rho_mask), ('rho_swap', rho_swap)):
        if not 0.0 <= rate <= 0.5:
            raise ValueError(f"{name} must be in [0, 0.5], got {rate}")
    rng = _rng(rng_seed)
    out = batch.copy()
    for b in range(out.size):
        n = int(out.valid[b].sum())
        n_swap = math.floor(rho_swap * n)
        if n_swap and n >= 2:
            starts = rng.choice(n - 1, size=min(n_swap, n - 1), replace=False)
            for i in starts:
                for arr in (out.exercises, out.concepts, out.responses, out.states):
                    arr[b, i], arr[b, i + 1] = arr[b, i + 1], arr[b, i]
        n_mask = math.floor(rho_mask * n)
        if n_mask:
            positions = rng.choice(n, size=n_mask, replace=False)
            out.concepts[b, positions] = out.concept_mask_id
            out.states[b, positions] = out.state_mask_id
    return out


def augment_negative(batch: Batch) -> Batch:
    """Flip every valid response and recompute the state ids."""
    out = batch.copy()
    out.responses = np.where(out.valid, 1 - out.responses, out.responses)
    real = out.concepts != out.concept_mask_id
    out.states = np.where(real, state_ids(out.concepts, out.responses, out.n_concepts), out.states)
    return out


def make_batches(sequences: Sequence[InteractionSequence], batch_size: int, n_concepts: int,
                 shuffle_seed: SeedLike = None) -> Iterator[Batch]:
    """
    Yield batches, shuffled when a seed is given; the last partial batch is kept.

    Raises:
        ValueError: If the dataset is empty or batch_size < 1.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    if len(sequences) == 0:
        raise ValueError("Cannot batch an empty dataset")
    order = np.arange(len(sequences))
    if shuffle_seed is not None:
        order = _rng(shuffle_seed).permutation(len(sequences))
    for start in range(0, len(order), batch_size):
        chunk = [sequences[i] for i in order[start:start + batch_size]]
        yield Batch.from_sequences(chunk, n_concepts)


@dataclass
class DataSplit:
    train: List[InteractionSequence]
    val: List[InteractionSequence]
    test: List[InteractionSequence]


def split_by_learner(sequences: Sequence[InteractionSequence], seed: int,
                     val_ratio: float = 0.08, test_ratio: float = 0.20) -> DataSplit:
    """
    Split windows 72/8/20 by learner so no learner spans two splits.

    Raises:
        ValueError: If there are fewer than three learners.
    """
    learners = sorted({s.learner_id for s in sequences})
    if len(learners) < 3:
        raise ValueError(f"Need at least 3 learners to split, got {len(learners)}")
    shuffled = np.random.default_rng(seed).permutation(len(learners))
    n_test = max(1, int(round(test_ratio * len(learners))))
    n_val = max(1, int(round(val_ratio * len(learners))))
    test_ids = {learners[i] for i in shuffled[:n_test]}
    val_ids = {learners[i] for i in shuffled[n_test:n_test + n_val]}
    split = DataSplit(train=[], val=[], test=[])
    for seq in sequences:
        if seq.learner_id in test_ids:
            split.test.append(seq)
        elif seq.learner_id in val_ids:
            split.val.append(seq)
        else:
            split.train.append(seq)
    return split


def build_windows(loaded: LoadedInteractions, max_len: int) -> List[InteractionSequence]:
    windows: List[InteractionSequence] = []
    for learner in loaded.learners:
        windows.extend(window_sequences(learner, max_len))
    return windows


def summarize(loaded: LoadedInteractions, windows: Sequence[InteractionSequence]) -> DatasetSummary:
    return DatasetSummary(learners=len(loaded.learners), windows=len(windows),
                          n_exercises=loaded.n_exercises, n_concepts=loaded.n_concepts,
                          interactions=sum(len(l) for l in loaded.learners),
                          rejected_rows=loaded.rejected_rows)
