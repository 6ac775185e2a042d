"""Pointer-generator head tests, pinned against loop oracles."""

import numpy as np
import pytest

from pointergen import pointer as P
from pointergen import tensor as T
from oracles import check_gradients, loop_mixture, loop_scatter


def rand_head_inputs(rng, L_y=3, L_src=4, d=6, vocab=9, requires_grad=False):
    def t(shape):
        return T.Tensor(rng.standard_normal(shape), requires_grad=requires_grad)

    z_dec = t((L_y, d))
    z_res = t((L_y, d))
    reps = {"history": t((L_src, d)), "summary": t((L_src + 1, d)), "query": t((L_src, d))}
    ids = {
        "history": rng.integers(5, vocab, size=L_src),
        "summary": rng.integers(5, vocab, size=L_src + 1),
        "query": rng.integers(5, vocab, size=L_src),
    }
    w_gen = t((d, vocab))
    w_ctx = t((5 * d, 4))
    return z_dec, z_res, reps, ids, w_gen, w_ctx


class TestPointerDistribution:
    def test_single_source_position_gets_all_mass(self):
        rng = np.random.default_rng(0)
        z_dec = T.Tensor(rng.standard_normal((4, 5)))
        z_src = T.Tensor(rng.standard_normal((1, 5)))
        ptr = P.pointer_distribution(z_dec, z_src, [7])
        np.testing.assert_allclose(ptr.probs.values, np.ones((4, 1)), atol=0)

    def test_orthogonal_state_gives_uniform_row(self):
        z_dec = T.Tensor([[0.0, 0.0, 1.0]])
        z_src = T.Tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 3.0, 0.0]])
        ptr = P.pointer_distribution(z_dec, z_src, [5, 6, 7])
        np.testing.assert_allclose(ptr.probs.values, [[1 / 3] * 3], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        z_dec = T.Tensor(rng.standard_normal((6, 4)))
        z_src = T.Tensor(rng.standard_normal((5, 4)))
        ptr = P.pointer_distribution(z_dec, z_src, rng.integers(0, 9, size=5))
        np.testing.assert_allclose(ptr.probs.values.sum(axis=1), np.ones(6), atol=1e-12)

    def test_padding_mask_zeroes_positions(self):
        rng = np.random.default_rng(2)
        z_dec = T.Tensor(rng.standard_normal((3, 4)))
        z_src = T.Tensor(rng.standard_normal((5, 4)))
        mask = np.array([True, True, True, False, False])
        ptr = P.pointer_distribution(z_dec, z_src, np.arange(5), src_mask=mask)
        assert (ptr.probs.values[:, 3:] == 0.0).all()
        np.testing.assert_allclose(ptr.probs.values.sum(axis=1), np.ones(3), atol=1e-12)

    def test_all_padding_source_raises(self):
        z_dec = T.Tensor(np.zeros((2, 3)))
        z_src = T.Tensor(np.zeros((2, 3)))
        with pytest.raises(T.DegenerateRowError):
            P.pointer_distribution(z_dec, z_src, [0, 1], src_mask=np.zeros(2, dtype=bool))

    def test_id_count_must_match_rows(self):
        z_dec = T.Tensor(np.zeros((2, 3)))
        z_src = T.Tensor(np.zeros((4, 3)))
        with pytest.raises(T.ShapeError):
            P.pointer_distribution(z_dec, z_src, [1, 2])


class TestScatter:
    def test_hand_example(self):
        probs = T.Tensor([[0.5, 0.3, 0.2]])
        ptr = P.PointerDistribution(probs, np.array([5, 7, 5]))
        out = P.scatter_to_vocab(ptr, 10).values
        expected = np.zeros((1, 10))
        expected[0, 5], expected[0, 7] = 0.7, 0.3
        np.testing.assert_allclose(out, expected, atol=0)

    def test_matches_loop_oracle_exactly(self):
        rng = np.random.default_rng(3)
        raw = rng.random((4, 6))
        raw /= raw.sum(axis=1, keepdims=True)
        ids = rng.integers(0, 11, size=6)
        ptr = P.PointerDistribution(T.Tensor(raw), ids)
        got = P.scatter_to_vocab(ptr, 11).values
        np.testing.assert_array_equal(got, loop_scatter(raw, ids, 11))

    def test_off_source_ids_keep_zero_mass(self):
        rng = np.random.default_rng(4)
        raw = rng.random((3, 4))
        raw /= raw.sum(axis=1, keepdims=True)
        ids = np.array([2, 2, 5, 5])
        out = P.scatter_to_vocab(P.PointerDistribution(T.Tensor(raw), ids), 8).values
        untouched = [i for i in range(8) if i not in (2, 5)]
        assert (out[:, untouched] == 0.0).all()
        np.testing.assert_allclose(out.sum(axis=1), np.ones(3), atol=1e-12)

    def test_ids_must_fit_vocab(self):
        ptr = P.PointerDistribution(T.Tensor([[1.0]]), np.array([12]))
        with pytest.raises(T.ShapeError):
            P.scatter_to_vocab(ptr, 10)


class TestGenerationDistribution:
    def test_zero_weights_give_uniform(self):
        z = T.Tensor(np.random.default_rng(5).standard_normal((3, 4)))
        w = T.Tensor(np.zeros((4, 7)))
        out = P.generation_distribution(z, w).values
        np.testing.assert_allclose(out, np.full((3, 7), 1 / 7), atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        out = P.generation_distribution(
            T.Tensor(rng.standard_normal((5, 4))), T.Tensor(rng.standard_normal((4, 9)))
        ).values
        np.testing.assert_allclose(out.sum(axis=1), np.ones(5), atol=1e-12)


class TestMixtureScores:
    def test_zero_context_weights_give_quarter_each(self):
        rng = np.random.default_rng(7)
        z_dec, z_res, reps, ids, w_gen, w_ctx = rand_head_inputs(rng)
        scores = P.mixture_scores(
            reps["history"], reps["query"], reps["summary"], z_res, z_dec,
            T.Tensor(np.zeros((30, 4))),
        ).values
        np.testing.assert_allclose(scores, np.full((3, 4), 0.25), atol=1e-15)

    def test_shape_and_row_sums(self):
        rng = np.random.default_rng(8)
        z_dec, z_res, reps, ids, w_gen, w_ctx = rand_head_inputs(rng)
        scores = P.mixture_scores(
            reps["history"], reps["query"], reps["summary"], z_res, z_dec, w_ctx
        ).values
        assert scores.shape == (3, 4)
        np.testing.assert_allclose(scores.sum(axis=1), np.ones(3), atol=1e-12)

    def test_column_subset_renormalizes(self):
        rng = np.random.default_rng(9)
        z_dec, z_res, reps, ids, w_gen, w_ctx = rand_head_inputs(rng)
        scores = P.mixture_scores(
            reps["history"], reps["query"], reps["summary"], z_res, z_dec, w_ctx,
            active_columns=[P.CAP_COL, P.GEN_COL],
        ).values
        assert scores.shape == (3, 2)
        np.testing.assert_allclose(scores.sum(axis=1), np.ones(3), atol=1e-12)


class TestMixDistributions:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(10)
        dists_raw = []
        for _ in range(3):
            d = rng.random((4, 6))
            dists_raw.append(d / d.sum(axis=1, keepdims=True))
        s = rng.random((4, 3))
        s /= s.sum(axis=1, keepdims=True)
        got = P.mix_distributions([T.Tensor(d) for d in dists_raw], T.Tensor(s)).values
        np.testing.assert_allclose(got, loop_mixture(dists_raw, s), atol=1e-15)

    def test_endpoint_weight_selects_single_distribution(self):
        rng = np.random.default_rng(11)
        a = rng.random((2, 5)); a /= a.sum(axis=1, keepdims=True)
        b = rng.random((2, 5)); b /= b.sum(axis=1, keepdims=True)
        s = T.Tensor([[1.0, 0.0], [1.0, 0.0]])
        got = P.mix_distributions([T.Tensor(a), T.Tensor(b)], s).values
        np.testing.assert_allclose(got, a, atol=0)

    def test_identical_components_ignore_weights(self):
        rng = np.random.default_rng(12)
        d = rng.random((3, 4)); d /= d.sum(axis=1, keepdims=True)
        s1 = rng.random((3, 2)); s1 /= s1.sum(axis=1, keepdims=True)
        s2 = rng.random((3, 2)); s2 /= s2.sum(axis=1, keepdims=True)
        a = P.mix_distributions([T.Tensor(d), T.Tensor(d)], T.Tensor(s1)).values
        b = P.mix_distributions([T.Tensor(d), T.Tensor(d)], T.Tensor(s2)).values
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_column_count_mismatch_raises(self):
        d = T.Tensor(np.full((2, 3), 1 / 3))
        with pytest.raises(T.ShapeError):
            P.mix_distributions([d, d], T.Tensor(np.ones((2, 3)) / 3))


class TestComposedHead:
    def test_rows_sum_to_one_for_every_source_combination(self):
        rng = np.random.default_rng(13)
        combos = [(), ("summary",), ("query",), ("history",), ("summary", "query"),
                  ("history", "query"), ("summary", "history", "query")]
        for combo in combos:
            z_dec, z_res, reps, ids, w_gen, w_ctx = rand_head_inputs(rng)
            out = P.compose_output_distribution(
                z_dec, z_res, reps, ids, combo, w_gen, w_ctx, vocab_size=9
            ).values
            np.testing.assert_allclose(out.sum(axis=1), np.ones(3), atol=1e-9)
            assert (out >= 0).all()

    def test_no_sources_equals_generation_exactly(self):
        rng = np.random.default_rng(14)
        z_dec, z_res, reps, ids, w_gen, w_ctx = rand_head_inputs(rng)
        mixed = P.compose_output_distribution(
            z_dec, z_res, reps, ids, (), w_gen, w_ctx, vocab_size=9
        ).values
        pure = P.generation_distribution(z_dec, w_gen).values
        np.testing.assert_array_equal(mixed, pure)

    def test_unknown_source_rejected(self):
        rng = np.random.default_rng(15)
        z_dec, z_res, reps, ids, w_gen, w_ctx = rand_head_inputs(rng)
        with pytest.raises(ValueError):
            P.compose_output_distribution(
                z_dec, z_res, reps, ids, ("caption",), w_gen, w_ctx, vocab_size=9
            )

    def test_head_gradients(self):
        rng = np.random.default_rng(16)
        z_dec, z_res, reps, ids, w_gen, w_ctx = rand_head_inputs(rng, requires_grad=True)
        weight = T.Tensor(rng.standard_normal((3, 9)))
        params = [z_dec, z_res, reps["history"], reps["summary"], reps["query"], w_gen, w_ctx]

        def build():
            out = P.compose_output_distribution(
                z_dec, z_res, reps, ids, ("summary", "query"), w_gen, w_ctx, vocab_size=9
            )
            return T.sum_all(T.mul(out, weight))

        assert check_gradients(build, params) < 1e-4


def test_row_stochasticity_property_sweep():
    """Pointer, generation, and mixed rows all stay stochastic over many
    random instances (the 1e-6 contract, checked tighter here)."""
    rng = np.random.default_rng(17)
    for _ in range(100):
        L_y = int(rng.integers(1, 5))
        L_src = int(rng.integers(1, 6))
        d = int(rng.integers(2, 8))
        vocab = int(rng.integers(6, 14))
        z_dec = T.Tensor(rng.standard_normal((L_y, d)) * 3)
        z_src = T.Tensor(rng.standard_normal((L_src, d)) * 3)
        ids = rng.integers(0, vocab, size=L_src)
        ptr = P.pointer_distribution(z_dec, z_src, ids)
        scat = P.scatter_to_vocab(ptr, vocab)
        gen = P.generation_distribution(z_dec, T.Tensor(rng.standard_normal((d, vocab))))
        s = T.softmax_rows(T.Tensor(rng.standard_normal((L_y, 2))))
        mixed = P.mix_distributions([scat, gen], s)
        for m in (ptr.probs, scat, gen, mixed):
            np.testing.assert_allclose(m.values.sum(axis=1), np.ones(L_y), atol=1e-6)
