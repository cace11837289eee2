import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fastersts import tensor as tn
from fastersts.gradcheck import check
from fastersts.graph import (AdaptiveGraphBank, FastProjection, dense_graph_apply, fast_aggregate, fast_operator,
                             fast_project, flop_count, materialize_graphs)
from fastersts.tensor import DimensionError, Tensor


def bank(rng, N, d_e, H, shared=False):
    local = rng.standard_normal((N, d_e) if shared else (H, N, d_e))
    return AdaptiveGraphBank(Tensor(rng.standard_normal((N, d_e)), requires_grad=True),
                             Tensor(local, requires_grad=True))


def projection(rng, N, d_e, H=None):
    shape = (d_e, N) if H is None else (H, d_e, N)
    return FastProjection(Tensor(rng.standard_normal(shape), requires_grad=True),
                          Tensor(rng.standard_normal(N), requires_grad=True))


class TestBank:
    def test_zero_embeddings_give_uniform_graphs(self):
        b = AdaptiveGraphBank(Tensor(np.zeros((5, 2))), Tensor(np.zeros((3, 5, 2))))
        np.testing.assert_allclose(materialize_graphs(b).data, 0.2)

    def test_identical_local_embeddings_give_identical_graphs(self):
        rng = np.random.default_rng(0)
        e = rng.standard_normal((6, 2))
        b = AdaptiveGraphBank(Tensor(rng.standard_normal((6, 2))), Tensor(np.stack([e, e, e])))
        A = materialize_graphs(b).data
        np.testing.assert_array_equal(A[0], A[1])
        np.testing.assert_array_equal(A[1], A[2])

    def test_columns_sum_to_one(self):
        A = materialize_graphs(bank(np.random.default_rng(1), 4, 2, 3)).data
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9)

    def test_warns_when_factorization_cannot_help(self):
        with pytest.warns(UserWarning, match="d_e=4 >= N=4"):
            AdaptiveGraphBank(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))))

    def test_no_warning_for_small_d_e(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            AdaptiveGraphBank(Tensor(np.zeros((8, 2))), Tensor(np.zeros((2, 8, 2))))

    def test_local_shape_mismatch(self):
        with pytest.raises(DimensionError):
            AdaptiveGraphBank(Tensor(np.zeros((8, 2))), Tensor(np.zeros((2, 7, 2))))

    def test_init_bounds(self):
        b = AdaptiveGraphBank.init(50, 4, 3, np.random.default_rng(2))
        assert b.local.shape == (3, 50, 4)
        assert np.abs(b.global_embedding.data).max() <= 0.5
        assert AdaptiveGraphBank.init(50, 4, None, np.random.default_rng(2)).local.shape == (50, 4)


class TestFastAggregate:
    def test_uniform_graph_gives_node_mean(self):
        rng = np.random.default_rng(3)
        b = AdaptiveGraphBank(Tensor(np.zeros((6, 2))), Tensor(np.zeros((3, 6, 2))))
        x = rng.standard_normal((2, 6, 4, 3))
        out = fast_aggregate(b, Tensor(x)).data
        for k in range(2):
            np.testing.assert_allclose(out[:, k], x.mean(axis=1), atol=1e-14)

    def test_zero_input(self):
        out = fast_aggregate(bank(np.random.default_rng(4), 6, 2, 3), Tensor(np.zeros((1, 6, 2, 3))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        b = bank(rng, 6, 2, 3)
        x = rng.standard_normal((1, 6, 2, 3))
        want = oracles.aggregate(b.global_embedding.data, b.local.data, x)
        np.testing.assert_allclose(fast_aggregate(b, Tensor(x)).data, want, atol=1e-12)

    def test_shared_graph_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        b = bank(rng, 6, 2, 3, shared=True)
        x = rng.standard_normal((2, 6, 2, 3))
        want = oracles.aggregate(b.global_embedding.data, b.local.data, x)
        np.testing.assert_allclose(fast_aggregate(b, Tensor(x)).data, want, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            fast_aggregate(bank(np.random.default_rng(7), 6, 2, 3), Tensor(np.zeros((1, 6, 2, 4))))

    def test_embedding_gradients_are_nonzero_and_correct(self):
        rng = np.random.default_rng(8)
        b = bank(rng, 6, 2, 3)
        x = Tensor(rng.uniform(-2, 2, (2, 6, 2, 3)))
        R = Tensor(rng.standard_normal((2, 2, 2, 3)))
        fn = lambda: tn.sum_all(tn.hadamard(fast_aggregate(b, x), R))  # noqa: E731
        errs = check(fn, {"E": b.global_embedding, "e": b.local})
        assert max(errs.values()) < 1e-4
        assert np.abs(b.global_embedding.grad).max() > 0
        assert np.abs(b.local.grad).max() > 0


class TestFastProject:
    def test_identity_weight_passes_input_through(self):
        x = np.random.default_rng(9).standard_normal((1, 3, 2, 2))
        p = FastProjection(Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(fast_project(p, Tensor(x)).data, x)

    def test_bias_only(self):
        p = FastProjection(Tensor(np.zeros((2, 4))), Tensor([1.0, 2.0, 3.0, 4.0]))
        out = fast_project(p, Tensor(np.random.default_rng(10).standard_normal((2, 2, 3, 5)))).data
        for j in range(4):
            np.testing.assert_array_equal(out[:, j], j + 1.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        p = projection(rng, 6, 2)
        agg = rng.standard_normal((2, 2, 3, 4))
        want = oracles.project(p.weight.data, p.bias.data, agg)
        np.testing.assert_allclose(fast_project(p, Tensor(agg)).data, want, atol=1e-12)

    def test_per_channel_weight_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        p = projection(rng, 6, 2, H=4)
        agg = rng.standard_normal((2, 2, 3, 4))
        want = oracles.project(p.weight.data, p.bias.data, agg)
        np.testing.assert_allclose(fast_project(p, Tensor(agg)).data, want, atol=1e-12)

    def test_d_e_mismatch(self):
        with pytest.raises(DimensionError):
            fast_project(projection(np.random.default_rng(13), 6, 3), Tensor(np.zeros((1, 2, 1, 1))))


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(14).standard_normal((2, 4, 3, 2))
        np.testing.assert_array_equal(dense_graph_apply(Tensor(np.eye(4)), Tensor(x)).data, x)

    def test_ring_neighbour_mean(self):
        ring = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=float)
        adj = ring / ring.sum(axis=1, keepdims=True)
        x = np.array([0.0, 1.0, 2.0]).reshape(1, 3, 1, 1)
        out = dense_graph_apply(Tensor(adj), Tensor(x)).data.reshape(-1)
        np.testing.assert_allclose(out, [1.5, 1.0, 0.5])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(15)
        adj, x = rng.standard_normal((5, 5)), rng.standard_normal((2, 5, 2, 3))
        np.testing.assert_allclose(dense_graph_apply(Tensor(adj), Tensor(x)).data, oracles.dense_apply(adj, x),
                                   atol=1e-12)

    def test_non_square(self):
        with pytest.raises(DimensionError):
            dense_graph_apply(Tensor(np.zeros((4, 5))), Tensor(np.zeros((1, 5, 1, 1))))


def composed_vs_dense(rng, N, d_e, H, shared=False, per_channel_w=False, B=2, T=3):
    b = bank(rng, N, d_e, H, shared)
    p = projection(rng, N, d_e, H if per_channel_w else None)
    x = rng.standard_normal((B, N, T, H))
    fast = fast_project(p, fast_aggregate(b, Tensor(x))).data
    M = fast_operator(b, p)
    dense = np.empty_like(fast)
    for h in range(H):
        Mh = M[h] if M.shape[0] == H else M[0]
        dense[..., h] = dense_graph_apply(Tensor(Mh), Tensor(x[..., h:h + 1])).data[..., 0]
    dense += p.bias.data[None, :, None, None]
    return fast, dense


def test_composed_equals_dense_operator():
    fast, dense = composed_vs_dense(np.random.default_rng(16), 12, 3, 4)
    np.testing.assert_allclose(fast, dense, atol=1e-10)


def test_shared_and_per_channel_variants_equal_dense_operator():
    rng = np.random.default_rng(17)
    for shared, pcw in [(True, False), (False, True), (True, True)]:
        fast, dense = composed_vs_dense(rng, 10, 2, 3, shared, pcw)
        np.testing.assert_allclose(fast, dense, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 32), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_property_factorized_equals_dense(N, d_e, H, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fast, dense = composed_vs_dense(np.random.default_rng(seed), N, d_e, H, B=1, T=2)
    np.testing.assert_allclose(fast, dense, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 32), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_property_graphs_column_stochastic(N, d_e, H, seed):
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = AdaptiveGraphBank(Tensor(rng.normal(0, 5, (N, d_e))), Tensor(rng.normal(0, 5, (H, N, d_e))))
    A = materialize_graphs(b).data
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(A >= 0)


class TestFlops:
    def test_ratio_at_1000(self):
        dense = flop_count("dense", 1000, 8, 1, 1)
        fast = flop_count("fast", 1000, 8, 1, 1)
        assert (dense, fast) == (2_000_000, 32_000)
        assert dense / fast == 62.5

    def test_n_equal_d_e(self):
        assert flop_count("fast", 16, 16, 12, 32) == 2 * flop_count("dense", 16, 16, 12, 32)

    @pytest.mark.parametrize("N", [10, 100, 1000, 4096])
    def test_scaling(self, N):
        assert flop_count("fast", 2 * N, 8, 12, 32) == 2 * flop_count("fast", N, 8, 12, 32)
        assert flop_count("dense", 2 * N, 8, 12, 32) == 4 * flop_count("dense", N, 8, 12, 32)
        assert flop_count("fast", N, 8, 12, 32) // N == 4 * 8 * 12 * 32
        assert flop_count("dense", N, 8, 12, 32) // (N * N) == 2 * 12 * 32

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            flop_count("sparse", 10, 2, 1, 1)
