"""
Attention building blocks shared by every encoder.

Masks are boolean visibility arrays of shape (B, T_q, T_k), True = visible.
Positions are absolute step indices, so an encoder over a shifted slice can
still express "strictly earlier" and compute temporal distances.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np

from alignkt.numcore import (ParamStore, Tensor, as_tensor, clamp, dropout, exp, gelu,
                             layer_norm, reshape, softmax_rows, transpose)

logger = logging.getLogger(__name__)

SCORE_FLOOR = 1e-2


class MaskKind(Enum):
    CAU = "causal"
    PAD = "padding"


class ScoreKind(Enum):
    TCBA = "tcba"
    NONE = "none"


@dataclass(frozen=True)
class AttentionMask:
    """Visibility of keys from queries."""
    kind: MaskKind
    visibility: np.ndarray

    @property
    def empty_rows(self) -> np.ndarray:
        return ~self.visibility.any(axis=-1)


def causal_mask(q_pos: np.ndarray, k_pos: np.ndarray, key_valid: np.ndarray,
                strict: bool = False) -> AttentionMask:
    """
    Causal mask combined with key padding.

    Args:
        q_pos: Absolute step of each query slot, shape (T_q,).
        k_pos: Absolute step of each key slot, shape (T_k,).
        key_valid: Real (non-padding) keys, shape (B, T_k).
        strict: Only keys strictly before the query are visible.

    Returns:
        AttentionMask of kind CAU with visibility (B, T_q, T_k).
    """
    q_pos = np.asarray(q_pos)
    k_pos = np.asarray(k_pos)
    if strict:
        allowed = k_pos[None, :] < q_pos[:, None]
    else:
        allowed = k_pos[None, :] <= q_pos[:, None]
    key_valid = np.asarray(key_valid, dtype=bool)
    return AttentionMask(MaskKind.CAU, allowed[None, :, :] & key_valid[:, None, :])


def padding_mask(key_valid: np.ndarray, n_queries: int) -> AttentionMask:
    """Every real key is visible from every query."""
    key_valid = np.asarray(key_valid, dtype=bool)
    visibility = np.broadcast_to(key_valid[:, None, :],
                                 (key_valid.shape[0], n_queries, key_valid.shape[1])).copy()
    return AttentionMask(MaskKind.PAD, visibility)


def temporal_distance(q_pos: np.ndarray, k_pos: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(q_pos)[:, None] - np.asarray(k_pos)[None, :]).astype(np.float64)


def scaled_scores(q: Tensor, k: Tensor) -> Tensor:
    """
    q_t . k_i / sqrt(d_head) over the last axis.

    Args:
        q: (..., T_q, d_head)
        k: (..., T_k, d_head)

    Returns:
        Scores of shape (..., T_q, T_k).
    """
    d_head = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    return (q @ transpose(k, axes)) * (1.0 / np.sqrt(d_head))


def tcba_multiplier(scores: Union[Tensor, np.ndarray], distance: np.ndarray, memory_capacity: int,
                    gamma: Union[Tensor, np.ndarray, float]) -> Tensor:
    """
    exp(-sin(min(|t-i|, L) / L) / (gamma * max(score, 1e-2))), always in (0, 1].

    Raises:
        ValueError: If memory_capacity < 1.
    """
    return exp(tcba_log_multiplier(scores, distance, memory_capacity, gamma))


def tcba_log_multiplier(scores: Union[Tensor, np.ndarray], distance: np.ndarray, memory_capacity: int,
                        gamma: Union[Tensor, np.ndarray, float]) -> Tensor:
    if memory_capacity < 1:
        raise ValueError(f"Memory capacity must be at least 1, got {memory_capacity}")
    decay = np.sin(np.minimum(np.asarray(distance, dtype=np.float64), memory_capacity) / memory_capacity)
    content = clamp(as_tensor(scores), low=SCORE_FLOOR)
    return -(decay / (as_tensor(gamma) * content))


def tcba_adjust(scores: Union[Tensor, np.ndarray], distance: np.ndarray, memory_capacity: int,
                gamma: Union[Tensor, np.ndarray, float]) -> Tensor:
    """
    Fold the time-and-content balanced decay into the attention scores.

    softmax(score + log m) equals the decayed weights alpha * m renormalized
    over the visible keys, but stays a distribution when every m underflows.

    Args:
        scores: Pre-softmax scores.
        distance: Temporal distances broadcastable to the score shape.
        memory_capacity: L; distances beyond it are truncated.
        gamma: Positive balance factor, broadcastable to the score shape.

    Returns:
        Adjusted scores to feed the masked softmax.
    """
    scores = as_tensor(scores)
    return scores + tcba_log_multiplier(scores, distance, memory_capacity, gamma)


@dataclass(frozen=True)
class EncoderConfig:
    d: int
    heads: int
    ffn_dim: int
    dropout: float = 0.1
    attn_kind: ScoreKind = ScoreKind.TCBA
    mask_kind: MaskKind = MaskKind.CAU
    self_attention: bool = True
    memory_capacity: int = 40
    gamma_init: float = 1.0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def d_head(self) -> int:
        return self.d // self.heads


class EncoderBlock:
    """
    Pre-norm attention block:
        x = q + Attn(LN(q), LN(kv))
        y = x + FFN(LN(x))
    Parameters live in a shared ParamStore under `prefix`.

    Only TCBA blocks carry a key bias.
    """

    def __init__(self, prefix: str, cfg: EncoderConfig, params: ParamStore, rng: np.random.Generator):
        self.prefix = prefix
        self.cfg = cfg
        self.params = params
        d, f = cfg.d, cfg.ffn_dim

        def linear(name: str, n_in: int, n_out: int, bias: bool = True) -> None:
            params.add(f'{prefix}.{name}_w', rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)))
            if bias:
                params.add(f'{prefix}.{name}_b', np.zeros(n_out))

        params.add(f'{prefix}.ln_q_gain', np.ones(d))
        params.add(f'{prefix}.ln_q_bias', np.zeros(d))
        if not cfg.self_attention:
            params.add(f'{prefix}.ln_kv_gain', np.ones(d))
            params.add(f'{prefix}.ln_kv_bias', np.zeros(d))
        linear('wq', d, d)
        linear('wk', d, d, bias=cfg.attn_kind is ScoreKind.TCBA)
        linear('wv', d, d)
        linear('wo', d, d)
        if cfg.attn_kind is ScoreKind.TCBA:
            params.add(f'{prefix}.gamma_raw', np.full(cfg.heads, np.log(cfg.gamma_init)))
        params.add(f'{prefix}.ln_ffn_gain', np.ones(d))
        params.add(f'{prefix}.ln_ffn_bias', np.zeros(d))
        linear('ffn1', d, f)
        linear('ffn2', f, d)

    def p(self, name: str) -> Tensor:
        return self.params[f'{self.prefix}.{name}']

    def _project(self, x: Tensor, name: str) -> Tensor:
        out = x @ self.p(f'{name}_w')
        if f'{self.prefix}.{name}_b' in self.params:
            out = out + self.p(f'{name}_b')
        return out

    def _normalize(self, q_in: Tensor, kv_in: Tensor) -> Tuple[Tensor, Tensor]:
        q_norm = layer_norm(q_in, self.p('ln_q_gain'), self.p('ln_q_bias'))
        if self.cfg.self_attention:
            kv_norm = q_norm if kv_in is q_in else layer_norm(kv_in, self.p('ln_q_gain'), self.p('ln_q_bias'))
        else:
            kv_norm = layer_norm(kv_in, self.p('ln_kv_gain'), self.p('ln_kv_bias'))
        return q_norm, kv_norm

    def _feed_forward(self, x: Tensor, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
        h = layer_norm(x, self.p('ln_ffn_gain'), self.p('ln_ffn_bias'))
        h = gelu(h @ self.p('ffn1_w') + self.p('ffn1_b')) @ self.p('ffn2_w') + self.p('ffn2_b')
        return x + dropout(h, self.cfg.dropout, rng, training)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return transpose(reshape(x, (b, t, self.cfg.heads, self.cfg.d_head)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, _, t, _ = x.shape
        return reshape(transpose(x, (0, 2, 1, 3)), (b, t, self.cfg.d))

    def gamma(self, ndim: int = 4) -> Optional[Tensor]:
        """Per-head balance factor shaped to broadcast over (B, heads, ...) scores."""
        if self.cfg.attn_kind is not ScoreKind.TCBA:
            return None
        return exp(reshape(self.p('gamma_raw'), (1, self.cfg.heads) + (1,) * (ndim - 2)))

    def _scores(self, scores: Tensor, distance: Optional[np.ndarray]) -> Tensor:
        if self.cfg.attn_kind is not ScoreKind.TCBA:
            return scores
        if distance is None:
            raise ValueError(f"Encoder '{self.prefix}' uses TCBA but got no temporal distances")
        return tcba_adjust(scores, distance, self.cfg.memory_capacity, self.gamma(scores.ndim))

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: AttentionMask,
                 distance: Optional[np.ndarray] = None, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
        """
        Run the block.

        Args:
            q_in: Queries (B, T_q, d).
            kv_in: Keys and values (B, T_k, d); pass q_in for self-attention.
            mask: Visibility (B, T_q, T_k).
            distance: Temporal distances (T_q, T_k), required for TCBA.
            training: Enables dropout.
            rng: Dropout stream.

        Returns:
            (output (B, T_q, d), attention weights (B, heads, T_q, T_k))

        Raises:
            ValueError: If TCBA is configured and no distances are given.
        """
        q_norm, kv_norm = self._normalize(q_in, kv_in)
        q = self._split_heads(self._project(q_norm, 'wq'))
        k = self._split_heads(self._project(kv_norm, 'wk'))
        v = self._split_heads(self._project(kv_norm, 'wv'))

        scores = self._scores(scaled_scores(q, k), distance)
        alpha = softmax_rows(scores, mask.visibility[:, None, :, :])

        attended = self._merge_heads(alpha @ v) @ self.p('wo_w') + self.p('wo_b')
        # rows with no visible key keep only the residual
        nonempty = (~mask.empty_rows)[:, :, None].astype(np.float64)
        attended = dropout(attended * nonempty, self.cfg.dropout, rng, training)
        return self._feed_forward(q_in + attended, training, rng), alpha

    def attend_candidates(self, x: Tensor, kv_in: Tensor, visibility: np.ndarray,
                          distance: Optional[np.ndarray] = None, include_self: bool = False) -> Tensor:
        """
        Evaluate P alternative queries per slot against fixed keys.

        Each candidate x[b, t, p] sees the keys visible from slot t and, with
        include_self, also its own key at distance 0. This is what slot t of
        a causal self-attention pass returns when its input is replaced by the
        candidate and the earlier inputs stay as they are. Evaluation only:
        no gradient flows through the result.

        Args:
            x: Candidate inputs (B, T_q, P, d).
            kv_in: Keys and values (B, T_k, d).
            visibility: Keys visible from each slot, (B, T_q, T_k).
            distance: Temporal distances (T_q, T_k), required for TCBA.
            include_self: Candidates also attend to themselves.

        Returns:
            Block outputs (B, T_q, P, d).
        """
        cfg = self.cfg
        b, t_q, n_cand, d = x.shape
        t_k = kv_in.shape[1]
        heads, d_head = cfg.heads, cfg.d_head

        q_norm, kv_norm = self._normalize(x, kv_in)
        q = self._project(q_norm, 'wq').data.reshape(b, t_q, n_cand, heads, d_head)
        k = self._project(kv_norm, 'wk').data.reshape(b, t_k, heads, d_head)
        v = self._project(kv_norm, 'wv').data.reshape(b, t_k, heads, d_head)

        scores = np.einsum('bqphe,bkhe->bhqpk', q, k) / np.sqrt(d_head)
        visible = np.broadcast_to(np.asarray(visibility, dtype=bool)[:, None, :, None, :], scores.shape)
        if distance is not None:
            distance = np.broadcast_to(np.asarray(distance, dtype=np.float64)[None, None, :, None, :],
                                       scores.shape)
        if include_self:
            own_k = self._project(q_norm, 'wk').data.reshape(b, t_q, n_cand, heads, d_head)
            own_v = self._project(q_norm, 'wv').data.reshape(b, t_q, n_cand, heads, d_head)
            own = np.einsum('bqphe,bqphe->bhqp', q, own_k) / np.sqrt(d_head)
            scores = np.concatenate([scores, own[..., None]], axis=-1)
            visible = np.concatenate([visible, np.ones(own.shape + (1,), dtype=bool)], axis=-1)
            if distance is not None:
                distance = np.concatenate([distance, np.zeros(own.shape + (1,))], axis=-1)

        alpha = softmax_rows(self._scores(Tensor(scores), distance), visible).data
        out = np.einsum('bhqpk,bkhe->bqphe', alpha[..., :t_k], v)
        if include_self:
            out = out + np.moveaxis(alpha[..., t_k], 1, 3)[..., None] * own_v

        attended = Tensor(out.reshape(b, t_q, n_cand, d)) @ self.p('wo_w') + self.p('wo_b')
        nonempty = visible.any(axis=-1)[:, 0, :, :, None].astype(np.float64)
        return self._feed_forward(x + attended * nonempty, False, None)


def encoder_block(q_in: Tensor, kv_in: Tensor, block: EncoderBlock, mask: AttentionMask,
                  distance: Optional[np.ndarray] = None, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    return block(q_in, kv_in, mask, distance=distance, training=training, rng=rng)
