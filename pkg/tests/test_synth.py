import json
import os
import shutil
import tempfile

import pytest

from alignkt.dataio import load_interactions
from alignkt.synth import SynthRule, generate_interactions, write_synthetic


class TestGenerateInteractions:
    """Rule-based response generation"""

    def test_seen_before_rule(self):
        """Test response is 1 exactly when the concept appeared earlier"""
        frame = generate_interactions(5, seed=1, rule='seen-before', min_len=20, max_len=40)

        for _, rows in frame.groupby('learner_id'):
            seen = set()
            for concept, response in zip(rows['concept_id'], rows['response']):
                assert response == int(concept in seen)
                seen.add(concept)

    def test_mastered_after_k_rule(self):
        """Test response is 1 once the concept was seen k times"""
        frame = generate_interactions(3, seed=2, rule=SynthRule.MASTERED_AFTER_K, k=3)

        for _, rows in frame.groupby('learner_id'):
            counts = {}
            for concept, response in zip(rows['concept_id'], rows['response']):
                assert response == int(counts.get(concept, 0) >= 3)
                counts[concept] = counts.get(concept, 0) + 1

    def test_focus_concept_always_correct(self):
        """Test the focus concept is always answered correctly"""
        frame = generate_interactions(4, seed=3, rule='focus-concept', focus_concept=2)

        assert (frame.loc[frame['concept_id'] == 2, 'response'] == 1).all()
        assert frame.loc[frame['concept_id'] != 2, 'response'].nunique() == 2

    def test_always_correct(self):
        """Test always-correct gives a single class"""
        frame = generate_interactions(2, seed=0, rule='always-correct')

        assert set(frame['response']) == {1}

    def test_lengths_and_exercises(self):
        """Test lengths stay in range and exercises belong to their concept"""
        frame = generate_interactions(10, seed=4, min_len=5, max_len=8, exercises_per_concept=3)
        lengths = frame.groupby('learner_id').size()

        assert lengths.between(5, 8).all()
        assert (frame['exercise_id'] // 3 == frame['concept_id']).all()

    def test_same_seed_same_frame(self):
        """Test generation is deterministic"""
        first = generate_interactions(3, seed=9)
        second = generate_interactions(3, seed=9)

        assert first.equals(second)

    def test_unknown_rule(self):
        """Test an unknown rule name is rejected"""
        with pytest.raises(ValueError):
            generate_interactions(2, rule='coin')

    def test_invalid_sizes(self):
        """Test non-positive learner counts are rejected"""
        with pytest.raises(ValueError):
            generate_interactions(0)


class TestWriteSynthetic:
    """Synthetic files on disk"""

    @pytest.fixture
    def temp_dir(self):
        """Create a temporary directory"""
        temp = tempfile.mkdtemp()
        yield temp
        shutil.rmtree(temp)

    def test_writes_csv_and_sidecar(self, temp_dir):
        """Test the CSV loads and the sidecar names the rule"""
        path = os.path.join(temp_dir, 'synth.csv')
        sidecar = write_synthetic(path, 4, seed=0, rule='random')

        with open(sidecar) as f:
            rule = json.load(f)
        loaded = load_interactions(path)

        assert rule['rule'] == 'random'
        assert rule['n_learners'] == 4
        assert len(loaded.learners) == 4

    def test_same_seed_identical_file(self, temp_dir):
        """Test identical seeds give byte-identical files"""
        first = os.path.join(temp_dir, 'a.csv')
        second = os.path.join(temp_dir, 'b.csv')
        write_synthetic(first, 3, seed=5)
        write_synthetic(second, 3, seed=5)

        with open(first, 'rb') as f1, open(second, 'rb') as f2:
            assert f1.read() == f2.read()
