import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drift.model import (
    EmbeddingStore,
    GradientBundle,
    apply_gradients,
    init_embeddings,
    load_store,
    recommend_top_k,
    save_store,
    score_items,
    top_k_from_scores,
)


def store_from(users, items, lr=0.5):
    return EmbeddingStore(np.array(users, dtype=float), np.array(items, dtype=float), lr)


class TestInit:
    def test_small_store_is_reproducible_and_bounded(self):
        a = init_embeddings(1, 1, 4, seed=42)
        b = init_embeddings(1, 1, 4, seed=42)
        assert a.user_matrix.shape == (1, 4) and a.item_matrix.shape == (1, 4)
        assert np.array_equal(a.user_matrix, b.user_matrix)
        assert np.array_equal(a.item_matrix, b.item_matrix)
        for m in (a.user_matrix, a.item_matrix):
            assert np.all(np.abs(m) <= 0.5)

    def test_seed_changes_matrices(self):
        a = init_embeddings(3, 5, 2, seed=7)
        b = init_embeddings(3, 5, 2, seed=8)
        assert not np.array_equal(a.user_matrix, b.user_matrix)

    def test_mean_within_three_standard_errors(self):
        d = 16
        s = init_embeddings(100, 200, d, seed=1)
        n = 100 * d + 200 * d
        se = math.sqrt((1.0 / d) / 3.0 / n)  # uniform on [-a, a] has variance a^2/3
        allv = np.concatenate([s.user_matrix.ravel(), s.item_matrix.ravel()])
        assert abs(allv.mean()) <= 3 * se

    @pytest.mark.parametrize("args", [(0, 1, 1), (1, 0, 1), (1, 1, 0)])
    def test_zero_sizes_rejected(self, args):
        with pytest.raises(ValueError):
            init_embeddings(*args, seed=0)

    def test_learning_rate_bounds(self):
        with pytest.raises(ValueError):
            init_embeddings(1, 1, 1, seed=0, learning_rate=0.0)
        with pytest.raises(ValueError):
            init_embeddings(1, 1, 1, seed=0, learning_rate=1.5)


class TestScoring:
    def test_zero_user_scores_zero(self):
        s = store_from([[0.0, 0.0]], [[1, 2], [3, 4]])
        assert np.array_equal(score_items(s, 0), [0.0, 0.0])

    def test_scalar_product(self):
        s = store_from([[2.0]], [[1], [3], [-1]])
        assert score_items(s, 0).tolist() == [2.0, 6.0, -2.0]

    def test_matches_naive_loop(self):
        s = init_embeddings(4, 9, 3, seed=3)
        for u in range(4):
            scores = score_items(s, u)
            for i in range(9):
                naive = 0.0
                for j in range(3):
                    naive += s.item_matrix[i, j] * s.user_matrix[u, j]
                assert abs(scores[i] - naive) <= 1e-12

    def test_out_of_range_user(self):
        s = init_embeddings(2, 2, 2, seed=0)
        with pytest.raises(IndexError):
            score_items(s, 2)


class TestRecommend:
    def test_top1(self):
        assert top_k_from_scores([2, 6, -2], 1) == [1]

    def test_exclusion(self):
        assert top_k_from_scores([2, 6, -2], 2, exclude={1}) == [0, 2]

    def test_ties_by_index(self):
        assert top_k_from_scores([5, 5, 5], 2) == [0, 1]

    def test_fewer_eligible_than_k(self):
        assert top_k_from_scores([1, 2, 3], 5, exclude={0}) == [2, 1]

    def test_via_store(self):
        s = store_from([[2.0]], [[1], [3], [-1]])
        assert recommend_top_k(s, 0, 2) == [1, 0]

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.integers(-1000, 1000), min_size=1, max_size=30),
        st.integers(-8, 8),
        st.integers(1, 10),
    )
    def test_positive_rescaling_invariance(self, scores, exponent, k):
        # powers of two keep the scaled scores exact, so ties survive
        scores = np.array(scores, dtype=float)
        assert top_k_from_scores(scores, k) == top_k_from_scores(scores * 2.0**exponent, k)


class TestApply:
    def test_empty_bundle(self):
        s = init_embeddings(2, 3, 2, seed=0)
        before = s.copy()
        apply_gradients(s, GradientBundle.empty(0, 2))
        assert np.array_equal(s.user_matrix, before.user_matrix)
        assert np.array_equal(s.item_matrix, before.item_matrix)

    def test_single_user_step(self):
        s = store_from([[1.0, 1.0]], [[0.0, 0.0]], lr=0.5)
        apply_gradients(s, GradientBundle.from_pairs(0, [(0, [0.2, -0.4])], [], 2))
        assert np.allclose(s.user_matrix[0], [0.9, 1.2], atol=0, rtol=1e-15)

    def test_repeated_item_equals_sequential_oracle(self):
        s = init_embeddings(1, 3, 4, seed=5, learning_rate=0.3)
        g1, g2 = np.random.default_rng(0).normal(size=(2, 4))
        oracle = s.item_matrix.copy()
        oracle[1] = oracle[1] - 0.3 * g1
        oracle[1] = oracle[1] - 0.3 * g2
        apply_gradients(s, GradientBundle.from_pairs(0, [], [(1, g1), (1, g2)], 4))
        assert np.array_equal(s.item_matrix, oracle)

    def test_matches_row_by_row_loop_bitwise(self):
        rng = np.random.default_rng(11)
        s = init_embeddings(5, 7, 3, seed=2, learning_rate=0.1)
        uids = rng.integers(0, 5, 40)
        iids = rng.integers(0, 7, 80)
        b = GradientBundle(0, uids, rng.normal(size=(40, 3)), iids, rng.normal(size=(80, 3)))
        U, I = s.user_matrix.copy(), s.item_matrix.copy()
        for u, g in zip(uids, b.user_grads):
            U[u] = U[u] - 0.1 * g
        for i, g in zip(iids, b.item_grads):
            I[i] = I[i] - 0.1 * g
        apply_gradients(s, b)
        assert np.array_equal(s.user_matrix, U) and np.array_equal(s.item_matrix, I)

    def test_zero_gradient_is_identity(self):
        s = init_embeddings(3, 3, 2, seed=0)
        before = s.copy()
        apply_gradients(s, GradientBundle(0, np.array([0, 2]), np.zeros((2, 2)), np.array([1]), np.zeros((1, 2))))
        assert np.array_equal(s.user_matrix, before.user_matrix)
        assert np.array_equal(s.item_matrix, before.item_matrix)

    def test_dimension_mismatch(self):
        s = init_embeddings(1, 1, 2, seed=0)
        with pytest.raises(ValueError):
            apply_gradients(s, GradientBundle(0, np.array([0]), np.zeros((1, 3)), np.array([], dtype=int), np.zeros((0, 3))))

    def test_out_of_range_target(self):
        s = init_embeddings(1, 1, 2, seed=0)
        with pytest.raises(IndexError):
            apply_gradients(s, GradientBundle.from_pairs(0, [], [(4, [0.0, 0.0])], 2))

    def test_score_consistency_after_user_update(self):
        s = init_embeddings(3, 6, 4, seed=9, learning_rate=0.2)
        g = np.random.default_rng(1).normal(size=4)
        old = score_items(s, 1)
        apply_gradients(s, GradientBundle.from_pairs(0, [(1, g)], [], 4))
        new = score_items(s, 1)
        assert np.allclose(new, old - 0.2 * (s.item_matrix @ g), atol=1e-9, rtol=0)

    def test_determinism(self):
        rng = np.random.default_rng(3)
        b = GradientBundle(0, rng.integers(0, 4, 10), rng.normal(size=(10, 2)), rng.integers(0, 6, 10), rng.normal(size=(10, 2)))
        a1, a2 = init_embeddings(4, 6, 2, seed=1), init_embeddings(4, 6, 2, seed=1)
        for _ in range(3):
            apply_gradients(a1, b)
            apply_gradients(a2, b)
        assert a1.user_matrix.tobytes() == a2.user_matrix.tobytes()
        assert a1.item_matrix.tobytes() == a2.item_matrix.tobytes()


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        s = init_embeddings(3, 4, 5, seed=2, learning_rate=0.07)
        save_store(s, tmp_path / "s.bin")
        t = load_store(tmp_path / "s.bin")
        assert np.array_equal(s.user_matrix, t.user_matrix)
        assert np.array_equal(s.item_matrix, t.item_matrix)
        assert t.learning_rate == 0.07

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        save_store(init_embeddings(1, 1, 1, seed=0), p)
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_store(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "x.bin"
        save_store(init_embeddings(2, 2, 2, seed=0), p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_store(p)
