"""
Training loop, evaluation and ablation runs.

Randomness comes from independent streams spawned from the run seed:
parameter init, augmentation and dropout. Epoch e shuffles with the seed
(seed, e), so runs with the same seed are reproducible end to end.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from alignkt.config import MANIFEST_FILE, RunManifest, TrainConfig
from alignkt.dataio import (Batch, DataSplit, InteractionSequence, augment_negative,
                            augment_positive, make_batches)
from alignkt.losses import LossReport, bce_loss, infonce, pool_valid, total_loss
from alignkt.metrics import UndefinedMetricError, accuracy, roc_auc
from alignkt.model import AlignKT
from alignkt.numcore import AdamState, NumericalError, Tensor, adam_step

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = 'checkpoint'
METRICS_FILE = 'metrics.csv'
METRICS_COLUMNS = ['epoch', 'bce', 'cl_c', 'cl_s', 'total', 'auc', 'acc']

VARIANTS: Dict[str, Dict[str, bool]] = {
    '-T': {'disable_tcba': True},
    '-CL': {'disable_cl': True},
    '-M-CL': {'disable_mrme': True, 'disable_cl': True},
    '-T-CL': {'disable_tcba': True, 'disable_cl': True},
    '-T-M-CL': {'disable_tcba': True, 'disable_mrme': True, 'disable_cl': True},
}


class TrainingAborted(RuntimeError):
    """Raised when a loss becomes non-finite; carries where it happened."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class EvalReport(BaseModel):
    """AUC and accuracy over valid target steps; auc is None only when allowed to be undefined."""
    auc: Optional[float]
    acc: float
    n_predictions: int


@dataclass
class EpochRecord:
    epoch: int
    bce: float
    cl_c: float
    cl_s: float
    total: float
    auc: Optional[float]
    acc: float


@dataclass
class TrainResult:
    model: AlignKT
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float('-inf')
    out_dir: Optional[Path] = None
    test_report: Optional[EvalReport] = None

    @property
    def checkpoint(self) -> Optional[Path]:
        return self.out_dir / CHECKPOINT_DIR if self.out_dir is not None else None


@dataclass
class RandomStreams:
    init: np.random.Generator
    augment: np.random.Generator
    dropout: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> 'RandomStreams':
        init, augment, drop = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(init=init, augment=augment, dropout=drop)


def compute_loss(model: AlignKT, batch: Batch, config: TrainConfig, training: bool = True,
                 rng: Optional[np.random.Generator] = None,
                 augment_rng: Optional[np.random.Generator] = None,
                 views: Optional[Tuple[Batch, Batch]] = None) -> LossReport:
    """
    Full training objective for one batch.

    With contrastive learning active, the positive view is the augmented
    batch and the negative view has every response flipped; both views skip
    the state retriever. Otherwise no view is built and both CL terms are 0.

    Args:
        model: The model.
        batch: Original batch.
        config: Run configuration (weights, temperature, augmentation rates).
        training: Enables dropout.
        rng: Dropout stream.
        augment_rng: Augmentation stream.
        views: Precomputed (positive, negative) batches.
    """
    out = model.forward(batch, training, rng)
    bce = bce_loss(out.predictions, batch.targets, batch.target_mask)
    if not config.cl_active:
        zero = Tensor(0.0)
        return total_loss(bce, zero, zero, config.cl_weight, config.temperature)

    if views is None:
        views = (augment_positive(batch, config.rho_mask, config.rho_swap, augment_rng),
                 augment_negative(batch))
    positive = model.frontend_forward(views[0], training, rng, retrieve=False)
    negative = model.frontend_forward(views[1], training, rng, retrieve=False)

    anchor = out.frontend
    cl_c = infonce(pool_valid(anchor.concept_context, anchor.target_valid),
                   pool_valid(positive.concept_context, positive.target_valid),
                   pool_valid(negative.concept_context, negative.target_valid), config.temperature)
    cl_s = infonce(pool_valid(anchor.preliminary_state, anchor.source_valid),
                   pool_valid(positive.preliminary_state, positive.source_valid),
                   pool_valid(negative.preliminary_state, negative.source_valid), config.temperature)
    return total_loss(bce, cl_c, cl_s, config.cl_weight, config.temperature)


def _score_batch(model: AlignKT, batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    predictions = model.predict_batch(batch)
    mask = batch.target_mask
    return predictions[mask], batch.targets[mask]


def evaluate(model: Union[AlignKT, str, Path], sequences: Sequence[InteractionSequence],
             batch_size: int = 64, workers: int = 1, allow_undefined: bool = False) -> EvalReport:
    """
    Score a model on every valid target step of `sequences`.

    Args:
        model: A model or a checkpoint directory.
        sequences: Windows to score.
        batch_size: Windows per forward pass.
        workers: Threads scoring batches; each builds its own graph.
        allow_undefined: Report auc=None instead of raising on one class.

    Raises:
        UndefinedMetricError: If labels are single-class and not allowed.
        FileNotFoundError: If a checkpoint directory is incomplete.
    """
    if not isinstance(model, AlignKT):
        model = AlignKT.from_checkpoint(model)
    batches = list(make_batches(sequences, batch_size, model.config.n_concepts))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda b: _score_batch(model, b), batches))
    else:
        results = [_score_batch(model, b) for b in batches]

    predictions = np.concatenate([p for p, _ in results])
    labels = np.concatenate([l for _, l in results])
    try:
        auc = roc_auc(predictions, labels)
    except UndefinedMetricError:
        if not allow_undefined:
            raise
        auc = None
    return EvalReport(auc=auc, acc=accuracy(predictions, labels), n_predictions=int(predictions.size))


def _append_metrics(path: Path, record: EpochRecord) -> None:
    frame = pd.DataFrame([asdict(record)], columns=METRICS_COLUMNS)
    frame.to_csv(path, mode='a', header=not path.exists(), index=False, lineterminator='\n')


def train(config: TrainConfig, split: DataSplit, n_concepts: int, n_exercises: int,
          out_dir: Optional[Union[str, Path]] = None,
          input_hashes: Optional[Dict[str, str]] = None, command: str = 'train') -> TrainResult:
    """
    Train with early stopping on validation AUC.

    Writes, when out_dir is given: manifest.json (before the first epoch),
    metrics.csv (one row per epoch) and checkpoint/ (best validation epoch).

    Args:
        config: Run configuration.
        split: Train/validation/test windows.
        n_concepts: N_c.
        n_exercises: N_e.
        out_dir: Output directory.
        input_hashes: sha256 of input files, recorded in the manifest.
        command: Command name recorded in the manifest.

    Returns:
        TrainResult holding the model restored to its best epoch.

    Raises:
        TrainingAborted: If a loss becomes non-finite.
        ValueError: If the training split is empty.
    """
    if not split.train:
        raise ValueError("Training split is empty")
    streams = RandomStreams.from_seed(config.seed)
    model = AlignKT(config.to_model_config(n_concepts, n_exercises), seed=streams.init)
    optimizer = AdamState(lr=config.lr)

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_path is not None:
        os.makedirs(out_path, exist_ok=True)
        metrics_path = out_path / METRICS_FILE
        if metrics_path.exists():
            metrics_path.unlink()
        RunManifest(command=command, config=config.flat(), seed=config.seed,
                    input_hashes=dict(input_hashes or {}),
                    artifacts={'checkpoint': str(out_path / CHECKPOINT_DIR),
                               'metrics': str(metrics_path)}).write(out_path / MANIFEST_FILE)

    result = TrainResult(model=model, out_dir=out_path)
    best_state = model.params.state_dict()
    waited = 0
    logger.info("Training on %d windows (%d validation), cl=%s tcba=%s mrme=%s",
                len(split.train), len(split.val), config.cl_active,
                not config.disable_tcba, not config.disable_mrme)

    for epoch in range(1, config.epochs + 1):
        sums = {'bce': 0.0, 'cl_c': 0.0, 'cl_s': 0.0, 'total': 0.0}
        n_batches = 0
        batches = make_batches(split.train, config.batch_size, n_concepts, shuffle_seed=[config.seed, epoch])
        for index, batch in enumerate(batches):
            try:
                report = compute_loss(model, batch, config, training=True, rng=streams.dropout,
                                      augment_rng=streams.augment)
                report.total.backward()
            except NumericalError as e:
                raise TrainingAborted(f"Non-finite values in the loss: {e}", epoch, index) from e
            adam_step(model.params, optimizer)
            for name in sums:
                sums[name] += report.values[name]
            n_batches += 1

        val = evaluate(model, split.val or split.train, config.batch_size, config.workers,
                       allow_undefined=True)
        record = EpochRecord(epoch=epoch, acc=val.acc, auc=val.auc,
                             **{k: v / n_batches for k, v in sums.items()})
        result.history.append(record)
        if metrics_path is not None:
            _append_metrics(metrics_path, record)
        logger.info("epoch %d: bce=%.4f cl_c=%.4f cl_s=%.4f total=%.4f val_auc=%s val_acc=%.4f",
                    epoch, record.bce, record.cl_c, record.cl_s, record.total,
                    'undefined' if val.auc is None else f'{val.auc:.4f}', val.acc)

        if val.auc is None:
            logger.warning("Validation AUC undefined at epoch %d; selecting on accuracy", epoch)
        score = val.auc if val.auc is not None else val.acc
        if score > result.best_score:
            result.best_score = score
            result.best_epoch = epoch
            best_state = model.params.state_dict()
            waited = 0
            if out_path is not None:
                model.save(out_path / CHECKPOINT_DIR)
        else:
            waited += 1
            if waited >= config.patience:
                logger.info("Early stopping at epoch %d (best epoch %d)", epoch, result.best_epoch)
                break

    model.params.load_state_dict(best_state)
    if split.test:
        result.test_report = evaluate(model, split.test, config.batch_size, config.workers,
                                      allow_undefined=True)
        logger.info("Test: auc=%s acc=%.4f", result.test_report.auc, result.test_report.acc)
    return result


def apply_variant(config: TrainConfig, variant: str) -> TrainConfig:
    """
    Config with an ablation variant's flags switched on.

    Raises:
        ValueError: On an unsupported variant name.
    """
    if variant not in VARIANTS:
        raise ValueError(f"Unsupported ablation variant '{variant}'. Valid variants: {', '.join(VARIANTS)}")
    return config.updated(VARIANTS[variant])


class AblationReport(BaseModel):
    base: EvalReport
    variants: Dict[str, EvalReport]

    def deltas(self) -> Dict[str, float]:
        """AUC change of each variant against the base run."""
        return {name: report.auc - self.base.auc for name, report in self.variants.items()}

    def table(self) -> Tuple[List[str], List[List[object]]]:
        headers = ['', 'AlignKT'] + list(self.variants)
        deltas = self.deltas()
        auc_row = ['AUC', f'{self.base.auc:.4f}'] + [f'{r.auc:.4f}' for r in self.variants.values()]
        delta_row = ['Δ', '-'] + [f'{deltas[name]:+.4f}' for name in self.variants]
        return headers, [auc_row, delta_row]


def run_ablation(base_config: TrainConfig, variants: Sequence[str], split: DataSplit, n_concepts: int,
                 n_exercises: int, out_dir: Optional[Union[str, Path]] = None) -> AblationReport:
    """
    Train the base configuration and each variant, scoring all on the test split.

    Raises:
        ValueError: On an unsupported variant or an empty test split.
        UndefinedMetricError: If test labels are single-class.
    """
    configs = {name: apply_variant(base_config, name) for name in variants}
    if not split.test:
        raise ValueError("Ablation needs a non-empty test split")
    out_path = Path(out_dir) if out_dir is not None else None

    def run(name: str, config: TrainConfig) -> EvalReport:
        run_dir = out_path / (name.lstrip('-') or 'base') if out_path is not None else None
        logger.info("Ablation run %s", name)
        result = train(config, split, n_concepts, n_exercises, run_dir, command=f'ablate {name}')
        return evaluate(result.model, split.test, config.batch_size, config.workers)

    base = run('base', base_config)
    return AblationReport(base=base, variants={name: run(name, cfg) for name, cfg in configs.items()})
