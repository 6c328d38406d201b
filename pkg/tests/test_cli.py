"""Tests for the command-line interface."""

import json
import os
import shutil
import tempfile

import pandas as pd
import pytest
from click.testing import CliRunner

from alignkt.cli import cli
from alignkt.config import RunManifest

TINY = ['--set', 'd=8', '--set', 'heads=2', '--set', 'L=5', '--set', 'batch_size=8', '--epochs', '1']


class TestCli:
    """End-to-end command runs on a small synthetic log"""

    @pytest.fixture
    def temp_dir(self):
        """Create a temporary working directory"""
        temp = tempfile.mkdtemp()
        yield temp
        shutil.rmtree(temp)

    @pytest.fixture
    def runner(self):
        return CliRunner()

    @pytest.fixture
    def cache(self, runner, temp_dir):
        """Synthesize and preprocess 20 seen-before learners"""
        csv_path = os.path.join(temp_dir, 'log.csv')
        cache_dir = os.path.join(temp_dir, 'cache')
        result = runner.invoke(cli, ['synth', '--learners', '20', '--seed', '1', '--out', csv_path,
                                     '--concepts', '5', '--exercises-per-concept', '2',
                                     '--min-len', '5', '--max-len', '10'])
        assert result.exit_code == 0, result.output
        result = runner.invoke(cli, ['preprocess', '--input', csv_path, '--out', cache_dir,
                                     '--max-len', '8'])
        assert result.exit_code == 0, result.output
        return cache_dir

    def test_synth_writes_rule_sidecar(self, runner, temp_dir):
        """Test synth writes the log and its ground-truth rule"""
        csv_path = os.path.join(temp_dir, 'log.csv')
        result = runner.invoke(cli, ['synth', '--learners', '3', '--rule', 'mastered-after-k',
                                     '--k', '3', '--out', csv_path, '--min-len', '4', '--max-len', '6'])

        assert result.exit_code == 0
        with open(csv_path + '.rule.json') as f:
            sidecar = json.load(f)
        assert sidecar['rule'] == 'mastered-after-k'
        assert sidecar['k'] == 3
        assert pd.read_csv(csv_path)['learner_id'].nunique() == 3

    def test_synth_manifest_reproduces_log(self, runner, temp_dir):
        """Test rerunning synth from its manifest options rewrites the same log"""
        first = os.path.join(temp_dir, 'first.csv')
        result = runner.invoke(cli, ['synth', '--learners', '4', '--seed', '7', '--out', first,
                                     '--min-len', '4', '--max-len', '9'])
        assert result.exit_code == 0, result.output
        manifest = RunManifest.read(first + '.manifest.json')

        second = os.path.join(temp_dir, 'second.csv')
        args = ['synth']
        for name, value in dict(manifest.config, out=second).items():
            args += ['--' + name.replace('_', '-'), str(value)]
        assert runner.invoke(cli, args).exit_code == 0

        assert manifest.command == 'synth'
        assert manifest.seed == 7
        assert manifest.artifacts['rule'] == first + '.rule.json'
        with open(first, 'rb') as a, open(second, 'rb') as b:
            assert a.read() == b.read()

    def test_preprocess_summary(self, runner, cache):
        """Test the cache vocabulary records sizes and the source hash"""
        with open(os.path.join(cache, 'vocab.json')) as f:
            vocab = json.load(f)

        assert vocab['n_concepts'] == 5
        assert vocab['max_len'] == 8
        assert len(vocab['source_sha256']) == 64
        assert vocab['summary']['learners'] == 20

    def test_preprocess_manifest(self, runner, cache, temp_dir):
        """Test the cache manifest records the options and the source hash"""
        manifest = RunManifest.read(os.path.join(cache, 'manifest.json'))
        with open(os.path.join(cache, 'vocab.json')) as f:
            vocab = json.load(f)

        assert manifest.command == 'preprocess'
        assert manifest.config['max_len'] == 8
        assert manifest.seed is None
        assert manifest.input_hashes == {os.path.join(temp_dir, 'log.csv'): vocab['source_sha256']}

    def test_preprocess_empty_file(self, runner, temp_dir):
        """Test an empty log exits with the data error code"""
        empty = os.path.join(temp_dir, 'empty.csv')
        open(empty, 'w').close()
        result = runner.invoke(cli, ['preprocess', '--input', empty, '--out', os.path.join(temp_dir, 'c')])

        assert result.exit_code == 3
        assert 'Error' in result.output

    def test_preprocess_missing_column(self, runner, temp_dir):
        """Test a missing header column exits with the data error code"""
        bad = os.path.join(temp_dir, 'bad.csv')
        with open(bad, 'w') as f:
            f.write("learner_id,order,exercise_id,response\na,1,e1,1\n")
        result = runner.invoke(cli, ['preprocess', '--input', bad, '--out', os.path.join(temp_dir, 'c')])

        assert result.exit_code == 3

    def test_unknown_config_key(self, runner, cache, temp_dir):
        """Test an unknown --set key exits with the config error code"""
        result = runner.invoke(cli, ['train', '--cache', cache, '--out', os.path.join(temp_dir, 'run'),
                                     '--set', 'gama=2'])

        assert result.exit_code == 4
        assert 'Valid keys' in result.output

    def test_out_of_range_config(self, runner, cache, temp_dir):
        """Test an invalid value exits with the config error code"""
        result = runner.invoke(cli, ['train', '--cache', cache, '--out', os.path.join(temp_dir, 'run'),
                                     '--set', 'a1=2.0'])

        assert result.exit_code == 4

    def test_usage_error(self, runner):
        """Test a missing required option is a usage error"""
        assert runner.invoke(cli, ['train']).exit_code == 2

    def test_train_eval_export(self, runner, cache, temp_dir):
        """Test a tiny run, then evaluation and knowledge-state export of its checkpoint"""
        run_dir = os.path.join(temp_dir, 'run')
        result = runner.invoke(cli, ['train', '--cache', cache, '--out', run_dir, '--seed', '2'] + TINY)
        assert result.exit_code == 0, result.output
        assert RunManifest.read(os.path.join(run_dir, 'manifest.json')).seed == 2

        checkpoint = os.path.join(run_dir, 'checkpoint')
        result = runner.invoke(cli, ['eval', '--checkpoint', checkpoint, '--cache', cache, '--split', 'all',
                                     '--workers', '2'])
        assert result.exit_code == 0, result.output
        assert 'AUC' in result.output
        evaluated = RunManifest.read(os.path.join(run_dir, 'eval-all.json.manifest.json'))
        assert evaluated.command == 'eval'
        assert evaluated.seed == 2
        assert os.path.join(checkpoint, 'params.bin') in evaluated.input_hashes
        with open(os.path.join(run_dir, 'eval-all.json')) as f:
            assert json.load(f)['n_predictions'] > 0

        state_path = os.path.join(temp_dir, 'state.csv')
        result = runner.invoke(cli, ['export-state', '--checkpoint', checkpoint, '--cache', cache,
                                     '--learner', 'L00000', '--out', state_path])
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(state_path, index_col='step')
        assert frame.shape[1] == 5
        assert frame.index[0] == 2
        assert ((frame.values > 0) & (frame.values < 1)).all()
        exported = RunManifest.read(state_path + '.manifest.json')
        assert exported.config['learner'] == 'L00000'
        assert exported.config['mode'] == 'readout'
        assert len(exported.input_hashes) == 5

        result = runner.invoke(cli, ['export-state', '--checkpoint', checkpoint, '--cache', cache,
                                     '--learner', 'nobody', '--out', state_path])
        assert result.exit_code == 3

    def test_ablate(self, runner, cache, temp_dir):
        """Test one ablation variant prints the AUC and delta rows"""
        result = runner.invoke(cli, ['ablate', '--cache', cache, '--out', os.path.join(temp_dir, 'abl'),
                                     '--variant=-T'] + TINY)

        assert result.exit_code == 0, result.output
        assert 'Δ' in result.output
        assert os.path.isdir(os.path.join(temp_dir, 'abl', 'T', 'checkpoint'))
