"""
The frontend-to-backend knowledge tracing model.

Frontend (causal, over a window of T steps, shifted by one):
    concept encoder    self-attention over concepts of steps 2..T
    state encoder      self-attention over states of steps 1..T-1
    state retriever    concepts query the strictly earlier states
Backend:
    ideal state encoder    order-free self-attention over the all-mastered states
    state retriever (PSR)  preliminary states query the ideal-state memory
Head:
    sigmoid(MLP([aligned state ; retrieved concept])) for steps 2..T

Slot j of every (B, T-1) output belongs to target step j+1 and source step j.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Set, Union

import numpy as np
import pandas as pd

from alignkt.attnkt import (EncoderBlock, EncoderConfig, MaskKind, ScoreKind, causal_mask,
                            padding_mask, temporal_distance)
from alignkt.config import ModelConfig
from alignkt.dataio import Batch
from alignkt.embedkt import (create_tables, embed_concept_candidates, embed_concepts, embed_ideal_states,
                             embed_states)
from alignkt.numcore import (ParamStore, Tensor, concat, dropout, gelu, no_grad, reshape,
                             sigmoid)
from alignkt.storage import Storage

logger = logging.getLogger(__name__)

READOUT = 'readout'
ATTENTION = 'attention'
KNOWLEDGE_STATE_MODES = (READOUT, ATTENTION)


@dataclass
class FrontendOutput:
    concept_context: Tensor
    preliminary_state: Tensor
    queried_concepts: Optional[Tensor]
    target_valid: np.ndarray
    source_valid: np.ndarray


@dataclass
class BackendOutput:
    aligned_state: Tensor
    ideal_state_memory: Tensor
    psr_attention: Tensor


@dataclass
class ModelOutput:
    predictions: Tensor
    frontend: FrontendOutput
    backend: BackendOutput


@dataclass
class KnowledgeStateMatrix:
    """
    Per-step mastery indicators, shape (B, T-1, N_c).

    Row j of a sequence describes the state after observing steps 1..j+1.
    """
    values: np.ndarray
    mode: str
    valid: np.ndarray

    def rows(self, index: int = 0) -> np.ndarray:
        """Valid rows of one sequence."""
        return self.values[index][self.valid[index]]

    def to_frame(self, concept_ids: Optional[List[str]] = None, index: int = 0) -> pd.DataFrame:
        rows = self.rows(index)
        columns = concept_ids if concept_ids is not None else [str(c) for c in range(rows.shape[1])]
        frame = pd.DataFrame(rows, columns=columns)
        frame.index = pd.RangeIndex(start=2, stop=2 + len(frame), name='step')
        return frame


def _mask_steps(x: Tensor, valid: np.ndarray) -> Tensor:
    return x * valid[..., None].astype(np.float64)


class AlignKT:
    """
    Model parameters plus the forward computations.

    Attributes:
        config: Architecture hyperparameters.
        params: Every learnable array, registered in a fixed order.
    """

    def __init__(self, config: ModelConfig, seed: Union[int, np.random.Generator] = 0):
        self.config = config
        self.params = ParamStore()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        d = config.d

        self.tables = create_tables(self.params, config.n_concepts, config.n_exercises, d, rng,
                                    with_mrme=not config.disable_mrme)

        frontend_scores = ScoreKind.NONE if config.disable_tcba else ScoreKind.TCBA

        def stack(prefix: str, score: ScoreKind, mask: MaskKind, self_attention: bool) -> List[EncoderBlock]:
            cfg = EncoderConfig(d=d, heads=config.heads, ffn_dim=config.ffn_mult * d,
                                dropout=config.dropout, attn_kind=score, mask_kind=mask,
                                self_attention=self_attention, memory_capacity=config.memory_capacity,
                                gamma_init=config.gamma_init)
            return [EncoderBlock(f'{prefix}.{i}', cfg, self.params, rng) for i in range(config.n_blocks)]

        self.concept_encoder = stack('frontend.concept', frontend_scores, MaskKind.CAU, True)
        self.state_encoder = stack('frontend.state', frontend_scores, MaskKind.CAU, True)
        self.state_retriever = stack('frontend.retriever', frontend_scores, MaskKind.CAU, False)
        self.ideal_encoder = stack('backend.ideal', ScoreKind.NONE, MaskKind.PAD, True)
        self.aligner = stack('backend.psr', ScoreKind.NONE, MaskKind.PAD, False)

        self.params.add('head.w1', rng.normal(0.0, 1.0 / np.sqrt(2 * d), (2 * d, d)))
        self.params.add('head.b1', np.zeros(d))
        self.params.add('head.w2', rng.normal(0.0, 1.0 / np.sqrt(d), (d, 1)))
        self.params.add('head.b2', np.zeros(1))

        logger.debug("Built model with %d parameter arrays (%d values)", len(self.params),
                     self.params.num_values())

    # ----- forward -----

    def frontend_forward(self, batch: Batch, training: bool = False,
                         rng: Optional[np.random.Generator] = None,
                         retrieve: bool = True) -> FrontendOutput:
        """
        Encode concepts and states of one batch.

        Args:
            batch: Padded batch with T >= 2.
            training: Enables dropout.
            rng: Dropout stream.
            retrieve: Also run the state retriever; contrastive views only
                need the two self-attention encoders.

        Raises:
            ValueError: If T < 2.
        """
        T = batch.length
        if T < 2:
            raise ValueError(f"Sequences need at least 2 steps, got {T}")
        cfg = self.config

        c = embed_concepts(batch.concepts[:, 1:], batch.exercises[:, 1:], self.tables, cfg.a1)
        s = embed_states(batch.states[:, :-1], batch.exercises[:, :-1], self.tables, cfg.a2)

        target_pos = np.arange(1, T)
        source_pos = np.arange(0, T - 1)
        target_valid = batch.valid[:, 1:]
        source_valid = batch.valid[:, :-1]

        concept_mask = causal_mask(target_pos, target_pos, target_valid)
        state_mask = causal_mask(source_pos, source_pos, source_valid)
        cross_mask = causal_mask(target_pos, source_pos, source_valid, strict=True)

        for block in self.concept_encoder:
            c, _ = block(c, c, concept_mask, temporal_distance(target_pos, target_pos), training, rng)
        for block in self.state_encoder:
            s, _ = block(s, s, state_mask, temporal_distance(source_pos, source_pos), training, rng)
        c = _mask_steps(c, target_valid)
        s = _mask_steps(s, source_valid)

        queried = None
        if retrieve:
            queried = c
            for block in self.state_retriever:
                queried, _ = block(queried, s, cross_mask, temporal_distance(target_pos, source_pos),
                                   training, rng)
            queried = _mask_steps(queried, target_valid)

        return FrontendOutput(concept_context=c, preliminary_state=s, queried_concepts=queried,
                              target_valid=target_valid, source_valid=source_valid)

    def backend_forward(self, frontend: FrontendOutput, training: bool = False,
                        rng: Optional[np.random.Generator] = None,
                        order: Optional[np.ndarray] = None) -> BackendOutput:
        """
        Align the preliminary states against the ideal-state memory.

        Args:
            frontend: Output of frontend_forward.
            training: Enables dropout.
            rng: Dropout stream.
            order: Optional permutation of concepts in the ideal-state memory.

        Returns:
            BackendOutput; psr_attention is the head-averaged PSR attention
            with one column per concept (in `order` when given).
        """
        n_c = self.config.n_concepts
        d = self.config.d
        memory = reshape(embed_ideal_states(self.tables, order), (1, n_c, d))
        memory_mask = padding_mask(np.ones((1, n_c), dtype=bool), n_c)
        for block in self.ideal_encoder:
            memory, _ = block(memory, memory, memory_mask, None, training, rng)

        state = frontend.preliminary_state
        b, t, _ = state.shape
        align_mask = padding_mask(np.ones((b, n_c), dtype=bool), t)
        attention = None
        for block in self.aligner:
            state, attention = block(state, memory, align_mask, None, training, rng)
        aligned = _mask_steps(state, frontend.source_valid)

        return BackendOutput(aligned_state=aligned, ideal_state_memory=reshape(memory, (n_c, d)),
                             psr_attention=attention.mean(axis=1))

    def _head(self, features: Tensor) -> Tensor:
        p = self.params
        hidden = gelu(features @ p['head.w1'] + p['head.b1'])
        return sigmoid(hidden @ p['head.w2'] + p['head.b2'])

    def predict(self, frontend: FrontendOutput, backend: BackendOutput, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Probability of a correct response at steps 2..T, shape (B, T-1)."""
        if frontend.queried_concepts is None:
            raise ValueError("predict needs a frontend pass with retrieve=True")
        features = concat([backend.aligned_state, frontend.queried_concepts], axis=-1)
        features = dropout(features, self.config.dropout, rng, training)
        out = self._head(features)
        return reshape(out, out.shape[:-1])

    def forward(self, batch: Batch, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> ModelOutput:
        frontend = self.frontend_forward(batch, training, rng)
        backend = self.backend_forward(frontend, training, rng)
        return ModelOutput(predictions=self.predict(frontend, backend, training, rng),
                           frontend=frontend, backend=backend)

    def predict_batch(self, batch: Batch) -> np.ndarray:
        """Evaluation-mode probabilities as a plain array."""
        with no_grad():
            return self.forward(batch).predictions.data.copy()

    def knowledge_state_matrix(self, batch: Batch, mode: str = READOUT) -> KnowledgeStateMatrix:
        """
        Per-step mastery over every concept.

        readout: the predicted probability of a correct answer if the next
            exercise practised concept k, for every k. Each concept enters
            the concept encoder and the retriever exactly like a real next
            step with a zero-difficulty exercise.
        attention: the head-averaged PSR attention over the ideal states.

        Raises:
            ValueError: On an unknown mode.
        """
        if mode not in KNOWLEDGE_STATE_MODES:
            raise ValueError(f"Unknown knowledge-state mode '{mode}'. Valid modes: {', '.join(KNOWLEDGE_STATE_MODES)}")
        with no_grad():
            frontend = self.frontend_forward(batch, retrieve=False)
            backend = self.backend_forward(frontend)
            if mode == ATTENTION:
                values = backend.psr_attention.data.copy()
            else:
                values = self._readout(batch, frontend, backend)
        return KnowledgeStateMatrix(values=values, mode=mode, valid=frontend.source_valid.copy())

    def _readout(self, batch: Batch, frontend: FrontendOutput, backend: BackendOutput) -> np.ndarray:
        cfg = self.config
        n_c, d = cfg.n_concepts, cfg.d
        T = batch.length
        target_pos = np.arange(1, T)
        source_pos = np.arange(0, T - 1)
        target_valid = frontend.target_valid
        b = target_valid.shape[0]

        # layer inputs of the real concept sequence serve as keys for the candidates
        c = embed_concepts(batch.concepts[:, 1:], batch.exercises[:, 1:], self.tables, cfg.a1)
        concept_mask = causal_mask(target_pos, target_pos, target_valid)
        concept_distance = temporal_distance(target_pos, target_pos)
        layer_inputs = []
        for block in self.concept_encoder:
            layer_inputs.append(c)
            c, _ = block(c, c, concept_mask, concept_distance)

        candidates = embed_concept_candidates(self.tables, cfg.a1).data
        x = Tensor(np.broadcast_to(candidates, (b, T - 1, n_c, d)).copy())
        earlier = causal_mask(target_pos, target_pos, target_valid, strict=True).visibility
        for block, keys in zip(self.concept_encoder, layer_inputs):
            x = block.attend_candidates(x, keys, earlier, concept_distance, include_self=True)

        cross = causal_mask(target_pos, source_pos, frontend.source_valid, strict=True).visibility
        cross_distance = temporal_distance(target_pos, source_pos)
        for block in self.state_retriever:
            x = block.attend_candidates(x, frontend.preliminary_state, cross, cross_distance)

        state = np.broadcast_to(backend.aligned_state.data[:, :, None, :], (b, T - 1, n_c, d))
        out = self._head(Tensor(np.concatenate([state, x.data], axis=-1)))
        return out.data.reshape(b, T - 1, n_c)

    # ----- structure and persistence -----

    def architecture_paths(self) -> Set[str]:
        """Which optional paths exist: 'tcba', 'mrme' and 'cl'."""
        paths = set()
        if any(name.endswith('.gamma_raw') for name in self.params.names()):
            paths.add('tcba')
        if 'mrme.difficulty' in self.params:
            paths.add('mrme')
        if self.config.contrastive:
            paths.add('cl')
        return paths

    def save(self, directory: Union[str, Path]) -> Path:
        return Storage().save_checkpoint(directory, self.params.state_dict(), self.config.model_dump())

    @classmethod
    def from_checkpoint(cls, directory: Union[str, Path]) -> 'AlignKT':
        """
        Rebuild a model from a checkpoint directory.

        Raises:
            FileNotFoundError: If the checkpoint is incomplete.
            ValueError: If stored parameters do not match the stored config.
        """
        arrays, config = Storage().load_checkpoint(directory)
        model = cls(ModelConfig.model_validate(config))
        model.params.load_state_dict(arrays)
        return model
