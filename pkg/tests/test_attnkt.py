import numpy as np
import pytest

from alignkt.attnkt import (AttentionMask, EncoderBlock, EncoderConfig, MaskKind, ScoreKind, causal_mask,
                            encoder_block, padding_mask, scaled_scores, tcba_adjust, tcba_multiplier,
                            temporal_distance)
from alignkt.numcore import ParamStore, Tensor, softmax_rows


def layer_norm_ref(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * gain + bias


def gelu_ref(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def reference_block(block, q_in, kv_in, visible, distance=None):
    """Loop-by-loop evaluation of an encoder block."""
    cfg = block.cfg
    p = lambda name: block.params[f'{block.prefix}.{name}'].data
    dh = cfg.d_head
    B, Tq, _ = q_in.shape
    Tk = kv_in.shape[1]
    out = np.zeros_like(q_in)
    for b in range(B):
        qn = layer_norm_ref(q_in[b], p('ln_q_gain'), p('ln_q_bias'))
        kvn = qn if cfg.self_attention else layer_norm_ref(kv_in[b], p('ln_kv_gain'), p('ln_kv_bias'))
        Q = qn @ p('wq_w') + p('wq_b')
        K = kvn @ p('wk_w')
        if cfg.attn_kind is ScoreKind.TCBA:
            K = K + p('wk_b')
        V = kvn @ p('wv_w') + p('wv_b')
        heads = np.zeros((Tq, cfg.d))
        for h in range(cfg.heads):
            sl = slice(h * dh, (h + 1) * dh)
            for t in range(Tq):
                vis = visible[b, t]
                if not vis.any():
                    continue
                s = np.array([Q[t, sl] @ K[i, sl] / np.sqrt(dh) for i in range(Tk)])
                m = max(s[i] for i in range(Tk) if vis[i])
                e = np.array([np.exp(s[i] - m) if vis[i] else 0.0 for i in range(Tk)])
                a = e / e.sum()
                if cfg.attn_kind is ScoreKind.TCBA:
                    gamma = np.exp(p('gamma_raw')[h])
                    L = cfg.memory_capacity
                    mult = np.array([np.exp(-np.sin(min(distance[t, i], L) / L) / (gamma * max(s[i], 1e-2)))
                                     for i in range(Tk)])
                    a = a * mult
                    a = a / a.sum()
                heads[t, sl] = sum(a[i] * V[i, sl] for i in range(Tk))
        att = heads @ p('wo_w') + p('wo_b')
        att[~visible[b].any(axis=-1)] = 0.0
        x = q_in[b] + att
        out[b] = x + gelu_ref(layer_norm_ref(x, p('ln_ffn_gain'), p('ln_ffn_bias')) @ p('ffn1_w')
                              + p('ffn1_b')) @ p('ffn2_w') + p('ffn2_b')
    return out


def make_block(attn_kind=ScoreKind.TCBA, self_attention=True, d=4, heads=2, seed=0, L=5):
    cfg = EncoderConfig(d=d, heads=heads, ffn_dim=4 * d, dropout=0.0, attn_kind=attn_kind,
                        mask_kind=MaskKind.CAU, self_attention=self_attention, memory_capacity=L)
    params = ParamStore()
    rng = np.random.default_rng(seed)
    block = EncoderBlock('enc', cfg, params, rng)
    for name, tensor in params.items():
        tensor.data = tensor.data + rng.normal(0.0, 0.3, tensor.shape)
    return block


class TestMasks:
    """Causal and padding visibility"""

    def test_causal_with_padding(self):
        """Test CAU hides the future and padded keys"""
        pos = np.arange(3)
        mask = causal_mask(pos, pos, np.array([[True, True, False]]))

        assert mask.kind is MaskKind.CAU
        assert mask.visibility[0].tolist() == [[True, False, False],
                                               [True, True, False],
                                               [True, True, False]]

    def test_strict_causal_on_shifted_positions(self):
        """Test targets 1..3 see only strictly earlier sources 0..2"""
        mask = causal_mask(np.arange(1, 4), np.arange(0, 3), np.ones((1, 3), dtype=bool), strict=True)

        assert mask.visibility[0].tolist() == [[True, False, False],
                                               [True, True, False],
                                               [True, True, True]]

    def test_padding(self):
        """Test PAD shows every real key to every query"""
        mask = padding_mask(np.array([[True, False, True]]), n_queries=2)

        assert mask.kind is MaskKind.PAD
        assert mask.visibility.shape == (1, 2, 3)
        assert mask.visibility[0, 1].tolist() == [True, False, True]

    def test_distance(self):
        """Test absolute step distances"""
        assert temporal_distance(np.array([1, 2]), np.array([0, 1])).tolist() == [[1, 0], [2, 1]]


class TestScaledScores:
    """Dot-product scores"""

    def test_zero_inputs(self):
        """Test zero queries give zero scores"""
        assert np.array_equal(scaled_scores(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4)))).data,
                              np.zeros((2, 3)))

    def test_scale(self):
        """Test q.k = 2 with d_head = 4 gives 1"""
        out = scaled_scores(Tensor([[1.0, 1.0, 0.0, 0.0]]), Tensor([[1.0, 1.0, 0.0, 0.0]]))

        assert out.data[0, 0] == pytest.approx(1.0)

    def test_against_loops(self):
        """Test a random 3x3 case against explicit sums"""
        rng = np.random.default_rng(0)
        q, k = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        out = scaled_scores(Tensor(q), Tensor(k)).data
        expected = [[sum(q[t, j] * k[i, j] for j in range(4)) / 2.0 for i in range(3)] for t in range(3)]

        assert np.allclose(out, expected, atol=1e-12)


class TestTCBA:
    """Time-and-content balanced decay"""

    def decayed(self, scores, visible, distance, L, gamma):
        return softmax_rows(tcba_adjust(scores, distance, L, gamma), visible).data

    def test_scalar_oracle(self):
        """Test 1000 random tuples against direct evaluation"""
        rng = np.random.default_rng(7)
        for _ in range(1000):
            alpha = rng.random()
            distance = int(rng.integers(0, 100))
            L = int(rng.integers(1, 80))
            gamma = rng.uniform(0.1, 10.0)
            qk = rng.uniform(-2.0, 2.0)
            expected = alpha * np.exp(-np.sin(min(distance, L) / L) / (gamma * max(qk, 1e-2)))
            out = alpha * tcba_multiplier(np.array([[qk]]), np.array([[distance]]), L, gamma).data[0, 0]

            assert out == pytest.approx(expected, rel=1e-12, abs=1e-300)

    def test_worked_example(self):
        """Test alpha = 0.5, distance = L, gamma * score = 1"""
        m = tcba_multiplier(np.array([[1.0]]), np.array([[40]]), 40, 1.0)

        assert 0.5 * m.data[0, 0] == pytest.approx(0.2155, abs=1e-4)

    def test_adjusted_scores_add_log_multiplier(self):
        """Test the adjusted score is score + log of the multiplier"""
        rng = np.random.default_rng(4)
        scores = rng.uniform(-2, 2, size=(4, 4))
        distance = rng.integers(0, 10, size=(4, 4))
        out = tcba_adjust(scores, distance, 6, 0.8).data

        expected = scores + np.log(tcba_multiplier(scores, distance, 6, 0.8).data)
        assert np.allclose(out, expected, atol=1e-12)

    def test_multiplier_bounds(self):
        """Test the multiplier lies in (0, 1] for any score"""
        rng = np.random.default_rng(1)
        scores = rng.uniform(-3, 3, size=(50, 50))
        distance = rng.integers(0, 60, size=(50, 50))
        m = tcba_multiplier(scores, distance, 40, 2.0).data

        assert (m > 0).all() and (m <= 1).all()

    def test_identity_at_zero_distance(self):
        """Test zero distance leaves the weight unchanged"""
        m = tcba_multiplier(np.array([0.7, -1.0]), np.array([0, 0]), 10, 0.5).data

        assert np.array_equal(m, [1.0, 1.0])

    def test_monotone_decay(self):
        """Test decay over distances 0..L for a fixed positive score"""
        L = 40
        m = tcba_multiplier(np.full(L + 1, 0.8), np.arange(L + 1), L, 1.0).data

        assert (np.diff(m) < 0).all()

    def test_distance_truncated_at_capacity(self):
        """Test distances beyond L behave like L"""
        m = tcba_multiplier(np.array([1.0, 1.0]), np.array([10, 500]), 10, 1.0).data

        assert m[0] == m[1]

    def test_matches_renormalized_product(self):
        """Test the decayed distribution equals alpha * m renormalized over visible keys"""
        rng = np.random.default_rng(2)
        visible = np.tril(np.ones((6, 6), dtype=bool))
        scores = rng.normal(size=(6, 6))
        distance = temporal_distance(np.arange(6), np.arange(6))
        out = self.decayed(scores, visible, distance, 4, 1.5)

        product = softmax_rows(Tensor(scores), visible).data * tcba_multiplier(scores, distance, 4, 1.5).data
        assert np.allclose(out, product / product.sum(axis=-1, keepdims=True), atol=1e-12)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert (out[~visible] == 0.0).all()

    def test_single_key_with_negative_score(self):
        """Test a lone visible key keeps weight 1 although its multiplier is e^-84"""
        out = self.decayed(np.array([[-0.3]]), np.array([[True]]), np.array([[1.0]]), 1, 1.0)

        assert out[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_far_keys_still_form_a_distribution(self):
        """Test rows whose multipliers all underflow still sum to 1"""
        rng = np.random.default_rng(5)
        scores = rng.uniform(-1.0, 0.005, size=(3, 8))
        distance = np.full((3, 8), 100.0)
        out = self.decayed(scores, np.ones((3, 8), dtype=bool), distance, 40, 0.5)

        assert np.all(np.isfinite(out))
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_large_gamma_is_plain_attention(self):
        """Test gamma -> infinity recovers plain weights"""
        rng = np.random.default_rng(3)
        visible = np.tril(np.ones((5, 5), dtype=bool))
        scores = rng.normal(size=(5, 5))
        out = self.decayed(scores, visible, temporal_distance(np.arange(5), np.arange(5)), 5, 1e6)

        assert np.allclose(out, softmax_rows(Tensor(scores), visible).data, atol=1e-3)

    def test_nearer_steps_get_more_weight(self):
        """Test identical content favors nearer steps"""
        visible = np.tril(np.ones((5, 5), dtype=bool))
        out = self.decayed(np.ones((5, 5)), visible, temporal_distance(np.arange(5), np.arange(5)), 10, 1.0)

        assert (np.diff(out[4]) > 0).all()

    def test_capacity_must_be_positive(self):
        """Test L < 1 is rejected"""
        with pytest.raises(ValueError):
            tcba_multiplier(np.array([1.0]), np.array([0]), 0, 1.0)


class TestEncoderBlock:
    """Generic encoder block"""

    def test_heads_must_divide_d(self):
        """Test d not divisible by heads is rejected"""
        with pytest.raises(ValueError):
            EncoderConfig(d=6, heads=4, ffn_dim=8)

    def test_matches_loop_reference_tcba(self):
        """Test causal TCBA self-attention against the loop reference"""
        block = make_block(ScoreKind.TCBA)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 4))
        pos = np.arange(4)
        valid = np.array([[True, True, True, True], [True, True, True, False]])
        mask = causal_mask(pos, pos, valid)
        distance = temporal_distance(pos, pos)
        out, _ = block(Tensor(x), Tensor(x), mask, distance)

        expected = reference_block(block, x, x, mask.visibility, distance)
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_matches_loop_reference_cross(self):
        """Test plain cross-attention against the loop reference"""
        block = make_block(ScoreKind.NONE, self_attention=False, seed=3)
        rng = np.random.default_rng(4)
        q, kv = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 3, 4))
        mask = padding_mask(np.array([[True, True, False]]), 2)
        out, _ = block(Tensor(q), Tensor(kv), mask)

        assert np.allclose(out.data, reference_block(block, q, kv, mask.visibility), atol=1e-12)

    def test_first_step_sees_only_itself(self):
        """Test the first causal query attends to key 1 only"""
        block = make_block(ScoreKind.TCBA)
        x = np.random.default_rng(5).normal(size=(1, 3, 4))
        pos = np.arange(3)
        _, attention = block(Tensor(x), Tensor(x), causal_mask(pos, pos, np.ones((1, 3), dtype=bool)),
                             temporal_distance(pos, pos))

        assert np.array_equal(attention.data[0, :, 0], np.tile([1.0, 0.0, 0.0], (2, 1)))

    def test_padded_keys_do_not_matter(self):
        """Test permuting padded key slots leaves the output bit-identical"""
        block = make_block(ScoreKind.NONE, self_attention=False, seed=6)
        rng = np.random.default_rng(6)
        q = rng.normal(size=(1, 2, 4))
        kv = rng.normal(size=(1, 4, 4))
        mask = padding_mask(np.array([[True, True, False, False]]), 2)
        shuffled = kv.copy()
        shuffled[0, 2], shuffled[0, 3] = kv[0, 3], kv[0, 2]
        first, _ = block(Tensor(q), Tensor(kv), mask)
        second, _ = block(Tensor(q), Tensor(shuffled), mask)

        assert np.array_equal(first.data, second.data)

    def test_fully_masked_row_is_residual_only(self):
        """Test a query with no visible key gets no attention contribution"""
        block = make_block(ScoreKind.NONE, self_attention=False, seed=8)
        rng = np.random.default_rng(8)
        q, kv = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 2, 4))
        visibility = np.array([[[True, True], [False, False]]])
        out, _ = block(Tensor(q), Tensor(kv), AttentionMask(MaskKind.PAD, visibility))
        p = lambda name: block.params[f'enc.{name}'].data
        x = q[0, 1]
        expected = x + gelu_ref(layer_norm_ref(x, p('ln_ffn_gain'), p('ln_ffn_bias')) @ p('ffn1_w')
                                + p('ffn1_b')) @ p('ffn2_w') + p('ffn2_b')

        assert np.allclose(out.data[0, 1], expected, atol=1e-12)

    def test_causality_bit_exact(self):
        """Test perturbing later steps never changes earlier outputs"""
        block = make_block(ScoreKind.TCBA, seed=9)
        rng = np.random.default_rng(9)
        pos = np.arange(6)
        mask = causal_mask(pos, pos, np.ones((1, 6), dtype=bool))
        distance = temporal_distance(pos, pos)
        x = rng.normal(size=(1, 6, 4))
        base, _ = block(Tensor(x), Tensor(x), mask, distance)
        for t in range(5):
            perturbed = x.copy()
            perturbed[0, t + 1:] += rng.normal(size=(5 - t, 4))
            out, _ = block(Tensor(perturbed), Tensor(perturbed), mask, distance)

            assert np.array_equal(out.data[0, :t + 1], base.data[0, :t + 1])

    def test_tcba_needs_distances(self):
        """Test a TCBA block without distances fails"""
        block = make_block(ScoreKind.TCBA)
        x = Tensor(np.zeros((1, 2, 4)))
        pos = np.arange(2)
        with pytest.raises(ValueError):
            block(x, x, causal_mask(pos, pos, np.ones((1, 2), dtype=bool)))

    def test_gamma_parameters_per_head(self):
        """Test TCBA blocks own one gamma per head, plain blocks none"""
        tcba = make_block(ScoreKind.TCBA, heads=2)
        plain = make_block(ScoreKind.NONE)

        assert tcba.params['enc.gamma_raw'].shape == (2,)
        assert 'enc.gamma_raw' not in plain.params

    def test_functional_form(self):
        """Test encoder_block runs the block it is given"""
        block = make_block(ScoreKind.TCBA, seed=13)
        x = Tensor(np.random.default_rng(13).normal(size=(1, 3, 4)))
        pos = np.arange(3)
        mask = causal_mask(pos, pos, np.ones((1, 3), dtype=bool))
        out, _ = encoder_block(x, x, block, mask, temporal_distance(pos, pos))

        assert np.array_equal(out.data, block(x, x, mask, temporal_distance(pos, pos))[0].data)

    def test_key_bias_only_with_tcba(self):
        """Test plain blocks carry no key bias, whose gradient would always be zero"""
        tcba = make_block(ScoreKind.TCBA)
        plain = make_block(ScoreKind.NONE, self_attention=False)

        assert 'enc.wk_b' in tcba.params
        assert 'enc.wk_b' not in plain.params
        assert 'enc.wq_b' in plain.params

    def test_plain_block_gradients_are_live(self):
        """Test every parameter of a plain cross block gets a gradient well above roundoff"""
        block = make_block(ScoreKind.NONE, self_attention=False, seed=10)
        rng = np.random.default_rng(10)
        q, kv = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 5, 4)))
        out, _ = block(q, kv, padding_mask(np.ones((2, 5), dtype=bool), 3))
        (out * Tensor(rng.normal(size=out.shape))).sum().backward()

        for name, tensor in block.params.items():
            assert np.abs(tensor.grad).max() > 1e-8, name


class TestCandidates:
    """Alternative queries against fixed keys"""

    def test_self_attention_candidate_matches_replaced_input(self):
        """Test a candidate equals the full causal pass with that slot replaced"""
        block = make_block(ScoreKind.TCBA, seed=11)
        rng = np.random.default_rng(11)
        pos = np.arange(5)
        valid = np.ones((1, 5), dtype=bool)
        distance = temporal_distance(pos, pos)
        x = rng.normal(size=(1, 5, 4))
        candidates = rng.normal(size=(1, 5, 3, 4))
        strict = causal_mask(pos, pos, valid, strict=True).visibility

        out = block.attend_candidates(Tensor(candidates), Tensor(x), strict, distance, include_self=True).data

        for t in range(5):
            for p in range(3):
                replaced = x.copy()
                replaced[0, t] = candidates[0, t, p]
                full, _ = block(Tensor(replaced), Tensor(replaced), causal_mask(pos, pos, valid), distance)
                assert np.allclose(out[0, t, p], full.data[0, t], atol=1e-10)

    def test_cross_candidates_match_block(self):
        """Test cross-attention candidates equal the block applied to each candidate column"""
        block = make_block(ScoreKind.TCBA, self_attention=False, seed=12)
        rng = np.random.default_rng(12)
        q_pos, k_pos = np.arange(1, 4), np.arange(0, 3)
        kv = rng.normal(size=(2, 3, 4))
        candidates = rng.normal(size=(2, 3, 2, 4))
        mask = causal_mask(q_pos, k_pos, np.array([[True, True, True], [True, True, False]]), strict=True)
        distance = temporal_distance(q_pos, k_pos)

        out = block.attend_candidates(Tensor(candidates), Tensor(kv), mask.visibility, distance).data

        for p in range(2):
            full, _ = block(Tensor(candidates[:, :, p]), Tensor(kv), mask, distance)
            assert np.allclose(out[:, :, p], full.data, atol=1e-10)
