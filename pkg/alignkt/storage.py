"""
On-disk containers for checkpoints and preprocessed window caches.

Both are directories holding a sorted, indented JSON manifest next to a raw
little-endian binary payload, so identical contents give identical bytes.

Checkpoint directory:
    config.json   ModelConfig fields
    params.json   [{"name", "shape", "dtype": "<f8", "offset"}], in registration order
    params.bin    concatenated parameter values, float64 little-endian

Cache directory:
    vocab.json    n_exercises, n_concepts, max_len, n_windows, learner id per
                  window, raw id lists, summary stats
    windows.bin   int64 little-endian array (n_windows, 4, max_len) holding
                  exercises, concepts, responses, valid
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from alignkt.dataio import InteractionSequence

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _write_json(path: Path, data: Dict[str, Any]) -> None:
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def _read_json(path: Path) -> Dict[str, Any]:
    with open(path, 'r') as f:
        return json.load(f)


class Storage:
    """
    Handles persistence of checkpoints and caches under explicit directories.
    """

    CONFIG_FILE = 'config.json'
    PARAMS_INDEX = 'params.json'
    PARAMS_BLOB = 'params.bin'
    VOCAB_FILE = 'vocab.json'
    WINDOWS_BLOB = 'windows.bin'

    def save_checkpoint(self, directory: PathLike, arrays: Dict[str, np.ndarray],
                        config: Dict[str, Any]) -> Path:
        """
        Save named parameter arrays and the model config.

        Args:
            directory: Checkpoint directory (created if needed).
            arrays: Parameter name to array, in registration order.
            config: ModelConfig as a plain dict.

        Returns:
            The checkpoint directory.
        """
        directory = Path(directory)
        os.makedirs(directory, exist_ok=True)

        index = []
        offset = 0
        with open(directory / self.PARAMS_BLOB, 'wb') as blob:
            for name, array in arrays.items():
                raw = np.ascontiguousarray(array, dtype='<f8').tobytes()
                index.append({'name': name, 'shape': list(np.shape(array)), 'dtype': '<f8',
                              'offset': offset})
                blob.write(raw)
                offset += len(raw)

        _write_json(directory / self.PARAMS_INDEX, {'params': index, 'total_bytes': offset})
        _write_json(directory / self.CONFIG_FILE, config)
        logger.debug("Saved %d parameters (%d bytes) to %s", len(index), offset, directory)
        return directory

    def load_checkpoint(self, directory: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        """
        Load a checkpoint.

        Returns:
            (arrays in stored order, config dict)

        Raises:
            FileNotFoundError: If the directory or a member file is missing.
            ValueError: If the payload size disagrees with the index.
        """
        directory = Path(directory)
        for member in (self.CONFIG_FILE, self.PARAMS_INDEX, self.PARAMS_BLOB):
            if not (directory / member).exists():
                raise FileNotFoundError(f"Checkpoint member '{member}' not found in {directory}")

        index = _read_json(directory / self.PARAMS_INDEX)
        payload = (directory / self.PARAMS_BLOB).read_bytes()
        if len(payload) != index['total_bytes']:
            raise ValueError(f"Checkpoint payload has {len(payload)} bytes, index says {index['total_bytes']}")

        arrays: Dict[str, np.ndarray] = {}
        for entry in index['params']:
            shape = tuple(entry['shape'])
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(payload, dtype='<f8', count=count, offset=entry['offset'])
            arrays[entry['name']] = values.reshape(shape).astype(np.float64)
        return arrays, _read_json(directory / self.CONFIG_FILE)

    def checkpoint_exists(self, directory: PathLike) -> bool:
        return (Path(directory) / self.PARAMS_INDEX).exists()

    def save_cache(self, directory: PathLike, windows: List[InteractionSequence],
                   vocab: Dict[str, Any]) -> Path:
        """
        Save windowed sequences and the vocabulary manifest.

        Args:
            directory: Cache directory (created if needed).
            windows: Windows, all of the same max_len.
            vocab: Must contain n_exercises, n_concepts and max_len.

        Returns:
            The cache directory.
        """
        directory = Path(directory)
        os.makedirs(directory, exist_ok=True)
        max_len = int(vocab['max_len'])

        block = np.zeros((len(windows), 4, max_len), dtype='<i8')
        for i, seq in enumerate(windows):
            block[i, 0] = seq.exercises
            block[i, 1] = seq.concepts
            block[i, 2] = seq.responses
            block[i, 3] = seq.valid.astype(np.int64)
        (directory / self.WINDOWS_BLOB).write_bytes(block.tobytes())

        manifest = dict(vocab)
        manifest['n_windows'] = len(windows)
        manifest['learner_ids'] = [seq.learner_id for seq in windows]
        _write_json(directory / self.VOCAB_FILE, manifest)
        return directory

    def load_cache(self, directory: PathLike) -> Tuple[List[InteractionSequence], Dict[str, Any]]:
        """
        Load a cache written by save_cache.

        Raises:
            FileNotFoundError: If the cache is incomplete.
        """
        directory = Path(directory)
        for member in (self.VOCAB_FILE, self.WINDOWS_BLOB):
            if not (directory / member).exists():
                raise FileNotFoundError(f"Cache member '{member}' not found in {directory}")

        vocab = _read_json(directory / self.VOCAB_FILE)
        n, max_len = int(vocab['n_windows']), int(vocab['max_len'])
        block = np.frombuffer((directory / self.WINDOWS_BLOB).read_bytes(), dtype='<i8')
        block = block.reshape(n, 4, max_len).astype(np.int64)

        windows = [InteractionSequence(learner_id=learner_id, exercises=block[i, 0].copy(),
                                       concepts=block[i, 1].copy(), responses=block[i, 2].copy(),
                                       valid=block[i, 3].astype(bool))
                   for i, learner_id in enumerate(vocab['learner_ids'])]
        return windows, vocab

    def cache_files(self, directory: PathLike) -> List[Path]:
        directory = Path(directory)
        return [directory / self.VOCAB_FILE, directory / self.WINDOWS_BLOB]

    def checkpoint_files(self, directory: PathLike) -> List[Path]:
        directory = Path(directory)
        return [directory / member for member in (self.CONFIG_FILE, self.PARAMS_INDEX, self.PARAMS_BLOB)]
