import numpy as np
import pytest

from relpe.attention import (AttentionConfig, HeadWeights, attention_output,
                             attention_scores, init_head_weights,
                             multi_head_attention)
from relpe.posenc import Scheme, build_rel_table, frpe_vector
from relpe.tensor import Tensor, softmax


def reference_multi_head(x, weights, cfg, table=None, mask=None):
    """Loop-based direct-summation reference: no batching, explicit sums."""
    n, d = x.shape
    d_z = cfg.d_z
    head_outputs = np.zeros((n, cfg.num_heads * d_z))
    for h in range(cfg.num_heads):
        wq = weights.wq.data[:, h * d_z:(h + 1) * d_z]
        wk = weights.wk.data[:, h * d_z:(h + 1) * d_z]
        wv = weights.wv.data[:, h * d_z:(h + 1) * d_z]
        e = np.zeros((n, n))
        for i in range(n):
            q_i = x[i] @ wq
            for j in range(n):
                k_j = x[j] @ wk
                if table is not None:
                    k_j = k_j + table.row(j - i, "K")
                e[i, j] = q_i @ k_j / np.sqrt(d_z)
                if mask is not None and not mask[j]:
                    e[i, j] += -1e9
        for i in range(n):
            alpha = np.exp(e[i] - e[i].max())
            alpha /= alpha.sum()
            z_i = np.zeros(d_z)
            for j in range(n):
                v_j = x[j] @ wv
                if table is not None:
                    v_j = v_j + table.row(j - i, "V")
                z_i += alpha[j] * v_j
            head_outputs[i, h * d_z:(h + 1) * d_z] = z_i
    return head_outputs @ weights.wo.data + weights.bo.data


def make_weights(cfg, seed=0):
    return init_head_weights(cfg, np.random.default_rng(seed))


class TestAttentionScores:
    def test_zero_query_gives_zero_scores(self):
        table = build_rel_table(4, 4, Scheme.FRPE)
        q = Tensor(np.zeros((4, 4)))
        k = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
        scores = attention_scores(q, k, table)
        np.testing.assert_array_equal(scores.data, 0.0)

    def test_single_position_no_table(self):
        q = Tensor([[1.0, 2.0]])
        k = Tensor([[3.0, -1.0]])
        scores = attention_scores(q, k)
        assert scores.data[0, 0] == pytest.approx(1.0 / np.sqrt(2.0), rel=1e-15)

    def test_identity_rows_with_frpe_match_double_loop(self):
        table = build_rel_table(4, 2, Scheme.FRPE)
        q = Tensor(np.eye(2))
        k = Tensor(np.eye(2))
        scores = attention_scores(q, k, table)
        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                expected[i, j] = q.data[i] @ (k.data[j] + frpe_vector(j - i, 2)) / np.sqrt(2)
        np.testing.assert_allclose(scores.data, expected, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            attention_scores(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))))
        with pytest.raises(ValueError):
            attention_scores(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))),
                             build_rel_table(4, 8, Scheme.FRPE))


class TestAttentionOutput:
    def test_identity_alpha_returns_values(self):
        v = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        out = attention_output(Tensor(np.eye(3)), v)
        np.testing.assert_array_equal(out.data, v.data)

    def test_zero_values_uniform_alpha_averages_encodings(self):
        n, d_z = 3, 4
        table = build_rel_table(n, d_z, Scheme.FRPE)
        alpha = Tensor(np.full((n, n), 1.0 / n))
        out = attention_output(alpha, Tensor(np.zeros((n, d_z))), table)
        for i in range(n):
            expected = np.mean([frpe_vector(j - i, d_z) for j in range(n)], axis=0)
            np.testing.assert_allclose(out.data[i], expected, atol=1e-12)

    def test_random_case_matches_double_loop(self):
        rng = np.random.default_rng(2)
        n, d_z = 3, 4
        table = build_rel_table(n, d_z, Scheme.FRPE)
        alpha_raw = rng.random((n, n))
        alpha_raw /= alpha_raw.sum(axis=1, keepdims=True)
        v = rng.normal(size=(n, d_z))
        out = attention_output(Tensor(alpha_raw), Tensor(v), table)
        expected = np.zeros((n, d_z))
        for i in range(n):
            for j in range(n):
                expected[i] += alpha_raw[i, j] * (v[j] + frpe_vector(j - i, d_z))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestMultiHeadAttention:
    def test_single_position_softmax_collapses(self):
        cfg = AttentionConfig(num_heads=2, d_model=8, scheme=Scheme.FRPE)
        weights = make_weights(cfg)
        table = build_rel_table(1, cfg.d_z, Scheme.FRPE)
        x = np.random.default_rng(3).normal(size=(1, 8))
        out = multi_head_attention(Tensor(x), weights, cfg, table)
        a0 = frpe_vector(0, cfg.d_z)
        per_head = [x @ weights.wv.data[:, h * 4:(h + 1) * 4] + a0 for h in range(2)]
        expected = np.concatenate(per_head, axis=1) @ weights.wo.data + weights.bo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_masked_position_content_is_ignored(self):
        cfg = AttentionConfig(num_heads=2, d_model=8)
        weights = make_weights(cfg, seed=5)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 8))
        mask = np.array([True, True, False])
        out1 = multi_head_attention(Tensor(x), weights, cfg, mask=mask).data
        x2 = x.copy()
        x2[2] = rng.normal(size=8) * 50.0
        out2 = multi_head_attention(Tensor(x2), weights, cfg, mask=mask).data
        np.testing.assert_allclose(out1[:2], out2[:2], atol=1e-12)

    def test_masked_weight_is_negligible(self):
        cfg = AttentionConfig(num_heads=1, d_model=4)
        weights = make_weights(cfg, seed=7)
        x = Tensor(np.random.default_rng(8).normal(size=(3, 4)))
        q = x @ weights.wq
        k = x @ weights.wk
        mask = np.array([True, False, True])
        alpha = softmax(attention_scores(q, k, mask=mask), axis=-1).data
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(alpha[:, 1] < 1e-30)

    @pytest.mark.parametrize("scheme", [Scheme.NONE, Scheme.FRPE, Scheme.PRPE])
    def test_random_cases_match_reference(self, scheme):
        rng = np.random.default_rng(9)
        for trial in range(10):
            heads = int(rng.integers(1, 5))
            d_z = int(rng.integers(1, 5)) * 2
            n = int(rng.integers(1, 9))
            cfg = AttentionConfig(num_heads=heads, d_model=heads * d_z, scheme=scheme)
            weights = make_weights(cfg, seed=trial)
            table = (None if scheme is Scheme.NONE
                     else build_rel_table(n, d_z, scheme, rng_seed=trial, clip=3))
            x = rng.normal(size=(n, cfg.d_model))
            got = multi_head_attention(Tensor(x), weights, cfg, table).data
            expected = reference_multi_head(x, weights, cfg, table)
            np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_no_table_equals_vanilla_bit_for_bit(self):
        cfg = AttentionConfig(num_heads=2, d_model=8)
        weights = make_weights(cfg, seed=11)
        x = np.random.default_rng(12).normal(size=(5, 8))
        got = multi_head_attention(Tensor(x), weights, cfg).data

        # vanilla reference with the identical operation order
        d_z = cfg.d_z
        outs = []
        for h in range(cfg.num_heads):
            cols = slice(h * d_z, (h + 1) * d_z)
            q = x @ weights.wq.data[:, cols]
            k = x @ weights.wk.data[:, cols]
            v = x @ weights.wv.data[:, cols]
            scores = (q @ k.T) * (1.0 / np.sqrt(d_z))
            shifted = scores - scores.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            alpha = e / e.sum(axis=-1, keepdims=True)
            outs.append(alpha @ v)
        expected = np.concatenate(outs, axis=1) @ weights.wo.data + weights.bo.data
        np.testing.assert_array_equal(got, expected)

    def test_shift_equivariance_of_relative_scores(self):
        # identical token content at (i, j) and (i+s, j+s) gives equal scores
        rng = np.random.default_rng(13)
        base = rng.normal(size=(4, 8))
        x = np.concatenate([base, base], axis=0)  # period-4 content
        for scheme in (Scheme.FRPE, Scheme.PRPE):
            cfg = AttentionConfig(num_heads=2, d_model=8, scheme=scheme)
            weights = make_weights(cfg, seed=14)
            table = build_rel_table(8, cfg.d_z, scheme, rng_seed=1, clip=16)
            q = Tensor(x) @ weights.wq[:, :cfg.d_z]
            k = Tensor(x) @ weights.wk[:, :cfg.d_z]
            e = attention_scores(q, k, table).data
            s = 4
            for i in range(4):
                for j in range(4):
                    assert e[i, j] == pytest.approx(e[i + s, j + s], abs=1e-9)

    def test_gradients_flow_through_relative_banks(self):
        from relpe.gradcheck import check_gradients
        cfg = AttentionConfig(num_heads=2, d_model=8, scheme=Scheme.PRPE)
        weights = make_weights(cfg, seed=15)
        table = build_rel_table(6, cfg.d_z, Scheme.PRPE, rng_seed=2, clip=3)
        x = Tensor(np.random.default_rng(16).normal(size=(6, 8)))

        def loss():
            out = multi_head_attention(x, weights, cfg, table)
            return (out * out).sum()

        params = {**{f"attn.{k}": v for k, v in weights.parameters().items()},
                  **table.parameters()}
        report = check_gradients(loss, params, step=1e-5)
        assert report.max_relative_error < 1e-5
        assert report.per_parameter["relpos.bank_k"] >= 0  # banks were checked
