"""
Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 configuration error,
5 runtime failure.
"""

import functools
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
from tabulate import tabulate

from alignkt.config import (MANIFEST_FILE, PRESETS, ConfigError, RunManifest, TrainConfig, file_sha256,
                            manifest_path, resolve_config)
from alignkt.dataio import (Batch, DataFormatError, InteractionSequence, build_windows,
                            load_interactions, split_by_learner, summarize)
from alignkt.metrics import UndefinedMetricError
from alignkt.model import KNOWLEDGE_STATE_MODES, READOUT, AlignKT
from alignkt.numcore import NumericalError
from alignkt.storage import Storage
from alignkt.synth import SynthRule, write_synthetic
from alignkt.trainer import VARIANTS, TrainingAborted, evaluate, run_ablation, train

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'

EXIT_DATA = 3
EXIT_CONFIG = 4
EXIT_RUNTIME = 5

SPLITS = ('train', 'val', 'test', 'all')


def _exit_code(error: Exception) -> Optional[int]:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (TrainingAborted, NumericalError, UndefinedMetricError)):
        return EXIT_RUNTIME
    if isinstance(error, (DataFormatError, FileNotFoundError, LookupError)):
        return EXIT_DATA
    if isinstance(error, ValueError):
        return EXIT_CONFIG
    return None


def handles_errors(command: Callable) -> Callable:
    """Report known failures on stderr and exit with their code."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except Exception as e:
            code = _exit_code(e)
            if code is None:
                raise
            click.echo(f"Error: {e}", err=True)
            raise click.exceptions.Exit(code)
    return wrapper


def config_options(command: Callable) -> Callable:
    for option in reversed([
        click.option('--preset', type=click.Choice(sorted(PRESETS)), default=None,
                     help='Named hyperparameter preset.'),
        click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                     default=None, help='Flat key = value config file.'),
        click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                     help='Override one config key (repeatable).'),
        click.option('--epochs', type=int, default=None),
        click.option('--seed', type=int, default=None),
    ]):
        command = option(command)
    return command


def _load_cache(cache: str) -> Tuple[List[InteractionSequence], Dict[str, Any]]:
    return Storage().load_cache(cache)


def _input_hashes(cache: str, config_path: Optional[str] = None,
                  checkpoint: Optional[str] = None) -> Dict[str, str]:
    paths = Storage().cache_files(cache)
    if checkpoint:
        paths.extend(Storage().checkpoint_files(checkpoint))
    if config_path:
        paths.append(Path(config_path))
    return {str(p): file_sha256(p) for p in paths}


def _resolve(preset, config_path, overrides, epochs, seed, vocab: Dict[str, Any]) -> TrainConfig:
    return resolve_config(preset, config_path, list(overrides),
                          extra={'epochs': epochs, 'seed': seed, 'max_len': int(vocab['max_len'])})


def _write_manifest(command: str, options: Dict[str, Any], output: Path, seed: Optional[int] = None,
                    inputs: Optional[Dict[str, str]] = None, artifacts: Optional[Dict[str, Any]] = None) -> Path:
    """Record a finished command beside its output."""
    path = manifest_path(output)
    RunManifest(command=command, config=options, seed=seed, input_hashes=dict(inputs or {}),
                artifacts={name: str(p) for name, p in (artifacts or {}).items()}).write(path)
    logger.info("Wrote manifest %s", path)
    return path


@click.group()
@click.option('-v', '--verbose', is_flag=True, help='Debug logging.')
def cli(verbose: bool) -> None:
    """Knowledge tracing with aligned knowledge states."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


@cli.command()
@click.option('--learners', type=click.IntRange(min=1), required=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--rule', type=click.Choice([r.value for r in SynthRule]), default=SynthRule.SEEN_BEFORE.value,
              show_default=True)
@click.option('--out', type=click.Path(dir_okay=False), required=True)
@click.option('--concepts', type=click.IntRange(min=1), default=10, show_default=True)
@click.option('--exercises-per-concept', type=click.IntRange(min=1), default=3, show_default=True)
@click.option('--min-len', type=int, default=20, show_default=True)
@click.option('--max-len', type=int, default=200, show_default=True)
@click.option('--k', type=click.IntRange(min=0), default=2, show_default=True,
              help='Exposures needed by mastered-after-k.')
@click.option('--focus-concept', type=int, default=0, show_default=True)
@handles_errors
def synth(learners, seed, rule, out, concepts, exercises_per_concept, min_len, max_len, k, focus_concept):
    """Generate a synthetic interaction log."""
    sidecar = write_synthetic(out, learners, seed=seed, rule=rule, n_concepts=concepts,
                              exercises_per_concept=exercises_per_concept, min_len=min_len,
                              max_len=max_len, k=k, focus_concept=focus_concept)
    _write_manifest('synth', click.get_current_context().params, Path(out), seed=seed,
                    artifacts={'log': out, 'rule': sidecar})
    click.echo(f"Wrote {out} (rule recorded in {sidecar})")


@cli.command()
@click.option('--input', 'input_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--out', type=click.Path(file_okay=False), required=True)
@click.option('--max-len', type=click.IntRange(min=2), default=200, show_default=True)
@handles_errors
def preprocess(input_path, out, max_len):
    """Window an interaction CSV into a cache directory."""
    loaded = load_interactions(input_path)
    if not loaded.learners:
        raise DataFormatError("No learner has at least 2 valid interactions")
    windows = build_windows(loaded, max_len)
    summary = summarize(loaded, windows)
    vocab = {
        'n_exercises': loaded.n_exercises,
        'n_concepts': loaded.n_concepts,
        'max_len': max_len,
        'exercise_ids': loaded.exercise_ids,
        'concept_ids': loaded.concept_ids,
        'summary': {name: value for name, value in summary.as_rows()},
        'source_sha256': file_sha256(input_path),
    }
    Storage().save_cache(out, windows, vocab)
    _write_manifest('preprocess', click.get_current_context().params, Path(out),
                    inputs={input_path: vocab['source_sha256']}, artifacts={'cache': out})
    click.echo(tabulate(summary.as_rows(), headers=['statistic', 'value']))


@cli.command(name='train')
@click.option('--cache', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--out', type=click.Path(file_okay=False), required=True)
@config_options
@handles_errors
def train_command(cache, out, preset, config_path, overrides, epochs, seed):
    """Train a model; writes manifest, metrics log and best checkpoint."""
    windows, vocab = _load_cache(cache)
    config = _resolve(preset, config_path, overrides, epochs, seed, vocab)
    split = split_by_learner(windows, config.seed)
    result = train(config, split, vocab['n_concepts'], vocab['n_exercises'], out,
                   input_hashes=_input_hashes(cache, config_path))
    rows = [['best epoch', result.best_epoch], ['val score', f'{result.best_score:.4f}']]
    if result.test_report is not None:
        auc = result.test_report.auc
        rows += [['test AUC', 'undefined' if auc is None else f'{auc:.4f}'],
                 ['test ACC', f'{result.test_report.acc:.4f}']]
    click.echo(tabulate(rows, headers=['AlignKT', '']))
    click.echo(f"Checkpoint: {result.checkpoint}")


@cli.command(name='eval')
@click.option('--checkpoint', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--cache', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--split', 'split_name', type=click.Choice(SPLITS), default='test', show_default=True)
@click.option('--seed', type=int, default=None, help='Split seed (default: from the run manifest).')
@click.option('--batch-size', type=click.IntRange(min=1), default=64, show_default=True)
@click.option('--workers', type=click.IntRange(min=1), default=1, show_default=True)
@click.option('--out', type=click.Path(dir_okay=False), default=None,
              help='Report JSON (default: eval-<split>.json beside the checkpoint).')
@handles_errors
def eval_command(checkpoint, cache, split_name, seed, batch_size, workers, out):
    """Report AUC and ACC of a checkpoint; writes the report and its manifest."""
    windows, _ = _load_cache(cache)
    if seed is None:
        run_manifest = Path(checkpoint).parent / MANIFEST_FILE
        seed = RunManifest.read(run_manifest).seed if run_manifest.exists() else 0
    if split_name == 'all':
        sequences = windows
    else:
        sequences = getattr(split_by_learner(windows, seed), split_name)
    report = evaluate(checkpoint, sequences, batch_size=batch_size, workers=workers)
    click.echo(tabulate([[split_name, f'{report.auc:.4f}', f'{report.acc:.4f}', report.n_predictions]],
                        headers=['split', 'AUC', 'ACC', 'predictions']))
    report_path = Path(out) if out else Path(checkpoint).parent / f'eval-{split_name}.json'
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.model_dump_json(indent=2), encoding='utf-8')
    options = dict(click.get_current_context().params, seed=seed, out=str(report_path))
    _write_manifest('eval', options, report_path, seed=seed,
                    inputs=_input_hashes(cache, checkpoint=checkpoint), artifacts={'report': report_path})


@cli.command()
@click.option('--cache', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.option('--variant', 'variants', multiple=True, type=click.Choice(list(VARIANTS)),
              help='Ablation variant (repeatable; default: all).')
@config_options
@handles_errors
def ablate(cache, out, variants, preset, config_path, overrides, epochs, seed):
    """Train the base model and ablated variants; print AUC deltas."""
    windows, vocab = _load_cache(cache)
    config = _resolve(preset, config_path, overrides, epochs, seed, vocab)
    split = split_by_learner(windows, config.seed)
    report = run_ablation(config, list(variants) or list(VARIANTS), split, vocab['n_concepts'],
                          vocab['n_exercises'], out)
    headers, rows = report.table()
    click.echo(tabulate(rows, headers=headers))


@cli.command(name='export-state')
@click.option('--checkpoint', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--cache', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--learner', required=True)
@click.option('--window', type=click.IntRange(min=0), default=0, show_default=True,
              help='Window index when the learner has several.')
@click.option('--mode', type=click.Choice(KNOWLEDGE_STATE_MODES), default=READOUT, show_default=True)
@click.option('--out', type=click.Path(dir_okay=False), required=True)
@handles_errors
def export_state(checkpoint, cache, learner, window, mode, out):
    """Write a learner's per-step knowledge state (rows: steps, columns: concepts)."""
    windows, vocab = _load_cache(cache)
    mine = [w for w in windows if w.learner_id == learner]
    if not mine:
        raise LookupError(f"Learner '{learner}' is not in the cache")
    if window >= len(mine):
        raise LookupError(f"Learner '{learner}' has {len(mine)} window(s), no index {window}")
    model = AlignKT.from_checkpoint(checkpoint)
    matrix = model.knowledge_state_matrix(Batch.from_sequences([mine[window]], model.config.n_concepts), mode)
    frame = matrix.to_frame(vocab.get('concept_ids'))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, lineterminator='\n')
    _write_manifest('export-state', click.get_current_context().params, Path(out),
                    inputs=_input_hashes(cache, checkpoint=checkpoint), artifacts={'matrix': out})
    click.echo(f"Wrote {frame.shape[0]} x {frame.shape[1]} {mode} matrix to {out}")


def main() -> None:
    cli()


if __name__ == '__main__':
    main()
