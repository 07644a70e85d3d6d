"""Indexing-module contracts: Sinkhorn solver, MLP/PQ/RQ assignment."""

import numpy as np
import pytest

from genidx import diffcore as dc
from genidx import indexer as ix
from genidx.ids import IdSpace

SMALL = IdSpace(length=2, codes_per_pos=4)
rng0 = np.random.default_rng(0)


def unit_rows(n, d, seed=0):
    v = np.random.default_rng(seed).standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestSinkhorn:
    def test_uniform_single_row(self):
        p = ix.sinkhorn_matrix(np.zeros((1, 8)), ix.SinkhornParams())
        np.testing.assert_allclose(p, 1.0 / 8, atol=1e-9)

    def test_cheap_permutation_concentrates(self):
        """One clearly cheapest entry per row on a feasible (square) matching
        concentrates nearly all row mass there at epsilon 0.003."""
        n = 8
        cost = np.ones((n, n))
        perm = np.random.default_rng(1).permutation(n)
        cost[np.arange(n), perm] = 0.0
        p = ix.sinkhorn_matrix(cost, ix.SinkhornParams(epsilon=0.003))
        assert (p[np.arange(n), perm] >= 0.99).all()

    def test_rows_and_columns_at_reference_parameters(self):
        """Random 32x256 costs, eps=0.003, 100 iterations: rows exactly
        conditional, columns within 1e-3 of the uniform batch/256 balance.

        Costs are drawn on a scale commensurate with epsilon (U[0, 0.5],
        the band produced by squared distances between unit-norm
        sub-vectors); balancing convergence slows as costs grow relative
        to epsilon.
        """
        for seed in (0, 1, 2):
            cost = np.random.default_rng(seed).random((32, 256)) * 0.5
            p = ix.sinkhorn_matrix(cost, ix.SinkhornParams(0.003, 100))
            assert (p >= 0).all()
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
            col_dev = np.abs(p.sum(axis=0) - 32 / 256).max()
            assert col_dev <= 1e-3, col_dev

    def test_columns_approach_balance_with_iterations(self):
        cost = np.random.default_rng(3).random((16, 64))
        devs = []
        for iters in (1, 10, 100):
            p = ix.sinkhorn_matrix(cost, ix.SinkhornParams(0.01, iters))
            devs.append(np.abs(p.sum(axis=0) - 16 / 64).max())
        assert devs[0] > devs[1] > devs[2]

    def test_row_shift_invariance(self):
        cost = np.random.default_rng(4).random((8, 16))
        shifted = cost + np.random.default_rng(5).random((8, 1)) * 3.0
        pa = ix.sinkhorn_matrix(cost, ix.SinkhornParams(0.05, 50))
        pb = ix.sinkhorn_matrix(shifted, ix.SinkhornParams(0.05, 50))
        np.testing.assert_allclose(pa, pb, atol=1e-9)

    def test_gradient_through_unroll(self):
        """The 100-step unroll is differentiable end to end."""
        c = dc.var("c")
        plan = ix.sinkhorn(c, 4, 6, ix.SinkhornParams(0.1, 25))
        probe = (plan * dc.const(np.random.default_rng(6).random((4, 6)))).sum()
        rep = dc.finite_diff_check(probe, {"c": np.random.default_rng(7).random((4, 6))})
        assert rep.max_rel_error < 1e-5, rep

    def test_extreme_costs_survive_log_domain(self):
        cost = np.array([[0.0, 1000.0, 2000.0]])
        p = ix.sinkhorn_matrix(cost, ix.SinkhornParams(0.003, 10))
        assert np.isfinite(p).all()

    def test_bad_params_rejected(self):
        with pytest.raises(ValueError):
            ix.SinkhornParams(epsilon=0.0)
        with pytest.raises(ValueError):
            ix.SinkhornParams(iterations=0)


@pytest.fixture(params=["mlp", "pq", "rq"])
def any_indexer(request):
    sink = ix.SinkhornParams(epsilon=0.05, iterations=40)
    idx = ix.make_indexer(request.param, dim=8, space=SMALL, sink=sink,
                          mlp_hidden=16)
    params = idx.init_params(np.random.default_rng(42))
    # non-degenerate mlp head for property tests
    if request.param == "mlp":
        r = np.random.default_rng(43)
        for i in range(SMALL.length):
            params[f"idx.p{i}.w2"] = r.standard_normal((16, 4)) * 0.5
    return idx, params


class TestAssignContract:
    """Shared property suite every implementation must satisfy."""

    def test_rows_are_simplexes(self, any_indexer):
        idx, params = any_indexer
        dist = idx.assign(params, unit_rows(5, 8, seed=1))
        assert dist.shape == (5, SMALL.length, SMALL.codes_per_pos)
        assert (dist >= 0).all()
        np.testing.assert_allclose(dist.sum(axis=-1), 1.0, atol=1e-6)

    def test_deterministic(self, any_indexer):
        idx, params = any_indexer
        e = unit_rows(4, 8, seed=2)
        np.testing.assert_array_equal(idx.assign(params, e),
                                      idx.assign(params, e))

    def test_gradient_wrt_input(self, any_indexer):
        idx, params = any_indexer
        e = dc.var("e")
        out = idx.build(e, 3)
        probe = (out.dist * dc.const(np.random.default_rng(8).random((3, 2, 4)))).sum()
        rep = dc.finite_diff_check(probe, {**params, "e": unit_rows(3, 8, seed=3)},
                                   wrt=["e"])
        assert rep.max_rel_error < 1e-4, rep

    def test_gradient_wrt_parameters(self, any_indexer):
        idx, params = any_indexer
        out = idx.build(dc.const(unit_rows(3, 8, seed=4)), 3)
        probe = (out.dist * dc.const(np.random.default_rng(9).random((3, 2, 4)))).sum()
        rep = dc.finite_diff_check(probe, params)
        assert rep.max_rel_error < 1e-4, rep


class TestMlp:
    def setup_method(self):
        self.idx = ix.MlpIndexer(8, SMALL, hidden=16, dropout=0.2)
        self.params = self.idx.init_params(np.random.default_rng(0))

    def test_equal_logits_give_uniform_rows(self):
        """A zeroed output layer makes every logit equal: uniform simplexes."""
        params = dict(self.params)
        for i in range(SMALL.length):
            params[f"idx.p{i}.w2"] = np.zeros_like(params[f"idx.p{i}.w2"])
            params[f"idx.p{i}.b2"] = np.zeros_like(params[f"idx.p{i}.b2"])
        dist = self.idx.assign(params, unit_rows(3, 8))
        np.testing.assert_allclose(dist, 1.0 / SMALL.codes_per_pos, atol=1e-12)

    def test_eval_mode_has_no_dropout(self):
        e = unit_rows(3, 8, seed=5)
        np.testing.assert_array_equal(self.idx.assign(self.params, e),
                                      self.idx.assign(self.params, e))

    def test_train_mode_dropout_reproducible_by_seed(self):
        e = unit_rows(3, 8, seed=6)
        a = self.idx.assign(self.params, e, train=True,
                            rng=np.random.default_rng(11))
        b = self.idx.assign(self.params, e, train=True,
                            rng=np.random.default_rng(11))
        np.testing.assert_array_equal(a, b)

    def test_train_mode_requires_rng(self):
        with pytest.raises(ValueError, match="rng"):
            self.idx.build(dc.const(unit_rows(2, 8)), 2, train=True)

    def test_argmax_invariant_under_monotone_logit_rescale(self):
        r = np.random.default_rng(12)
        params = dict(self.params)
        for i in range(SMALL.length):
            params[f"idx.p{i}.w2"] = r.standard_normal((16, 4))
        e = unit_rows(6, 8, seed=13)
        base = self.idx.assign(params, e).argmax(axis=-1)
        scaled = dict(params)
        for i in range(SMALL.length):
            scaled[f"idx.p{i}.w2"] = params[f"idx.p{i}.w2"] * 3.7
            scaled[f"idx.p{i}.b2"] = params[f"idx.p{i}.b2"] * 3.7
        np.testing.assert_array_equal(
            base, self.idx.assign(scaled, e).argmax(axis=-1))


class TestPq:
    def test_dim_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            ix.PqIndexer(10, IdSpace(4, 16))

    def test_centroid_input_concentrates_and_reconstructs(self):
        """A batch sitting exactly on distinct centroids (one per item,
        feasible matching at batch == V) concentrates each row and
        reconstructs the selected centroids bit-exactly."""
        space = IdSpace(length=2, codes_per_pos=4)
        idx = ix.PqIndexer(8, space, sink=ix.SinkhornParams(0.003, 100))
        params = idx.init_params(np.random.default_rng(1))
        cb0 = params["idx.g0.codebook"]
        cb1 = params["idx.g1.codebook"]
        e = np.concatenate([cb0, cb1], axis=1)        # item i on centroid i
        dist = idx.assign(params, e)
        assert (dist[np.arange(4), 0, np.arange(4)] >= 0.99).all()
        assert (dist[np.arange(4), 1, np.arange(4)] >= 0.99).all()
        out = idx.build(dc.const(e), 4)
        quant, mse = dc.forward_many([out.quantized, out.mse], params)
        np.testing.assert_array_equal(quant, e)       # bit-equal concatenation
        assert mse == 0.0

    def test_uniform_costs_give_uniform_rows(self):
        space = IdSpace(length=2, codes_per_pos=4)
        idx = ix.PqIndexer(8, space)
        params = idx.init_params(np.random.default_rng(2))
        # identical centroids -> every cost row is constant
        for g in range(2):
            params[f"idx.g{g}.codebook"] = np.tile(
                params[f"idx.g{g}.codebook"][:1], (4, 1))
        dist = idx.assign(params, unit_rows(32, 8, seed=7))
        np.testing.assert_allclose(dist, 0.25, atol=1e-9)

    def test_mse_nonnegative_and_positive_off_grid(self):
        idx = ix.PqIndexer(8, SMALL, sink=ix.SinkhornParams(0.05, 20))
        params = idx.init_params(np.random.default_rng(3))
        out = idx.build(dc.const(unit_rows(5, 8, seed=8)), 5)
        mse = dc.forward(out.mse, params)
        assert mse > 0.0

    def test_kmeans_init_covers_all_groups(self):
        idx = ix.PqIndexer(8, SMALL)
        params = idx.init_params(np.random.default_rng(4))
        embs = unit_rows(64, 8, seed=9)
        seeded = idx.init_from_embeddings(params, embs, np.random.default_rng(5))
        for g in range(SMALL.length):
            cb = seeded[f"idx.g{g}.codebook"]
            assert cb.shape == (4, 4)
            assert len(np.unique(cb.round(12), axis=0)) == 4


class TestRq:
    def test_exact_match_zeroes_residual(self):
        space = IdSpace(length=2, codes_per_pos=4)
        idx = ix.RqIndexer(8, space)
        params = idx.init_params(np.random.default_rng(6))
        e = params["idx.s0.codebook"][2][None, :]
        out = idx.build(dc.const(e), 1)
        first_residual = dc.forward(out.aux["residuals"][0], params)
        np.testing.assert_allclose(first_residual, 0.0, atol=1e-12)

    def test_quantized_is_sum_of_selected_vectors(self):
        idx = ix.RqIndexer(8, SMALL)
        params = idx.init_params(np.random.default_rng(7))
        e = unit_rows(6, 8, seed=10)
        out = idx.build(dc.const(e), 6)
        quant = dc.forward(out.quantized, params)
        # independent reconstruction by explicit nearest-vector loop
        residual = e.copy()
        total = np.zeros_like(e)
        for t in range(SMALL.length):
            cb = params[f"idx.s{t}.codebook"]
            d = ((residual[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
            picked = cb[d.argmin(axis=1)]
            total += picked
            residual -= picked
        np.testing.assert_array_equal(quant, total)

    def test_stagewise_error_nonincreasing_with_seeded_codebooks(self):
        """Reconstruction MSE per stage, measured by a brute-force loop,
        never increases when codebooks are seeded from the data residuals."""
        space = IdSpace(length=4, codes_per_pos=16)
        idx = ix.RqIndexer(16, space)
        e = unit_rows(200, 16, seed=11)
        params = idx.init_from_embeddings(
            idx.init_params(np.random.default_rng(8)), e,
            np.random.default_rng(9))
        residual = e.copy()
        errors = []
        for t in range(space.length):
            cb = params[f"idx.s{t}.codebook"]
            d = ((residual[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
            residual = residual - cb[d.argmin(axis=1)]
            errors.append((residual ** 2).sum(axis=1).mean())
        assert all(errors[t + 1] <= errors[t] + 1e-12
                   for t in range(len(errors) - 1)), errors


class TestToDocid:
    def test_first_row_first_code(self):
        space = IdSpace(4, 256)
        dist = np.full((4, 256), 1.0 / 256)
        dist[0, 0] = 0.5
        assert ix.to_docid(dist, space)[0] == 1

    def test_last_row_last_code(self):
        space = IdSpace(4, 256)
        dist = np.zeros((4, 256))
        dist[:, 0] = 1.0
        dist[3, 0] = 0.0
        dist[3, 255] = 1.0
        assert ix.to_docid(dist, space)[3] == 1024

    def test_uniform_row_ties_to_slice_minimum(self):
        space = IdSpace(4, 256)
        dist = np.full((4, 256), 1.0 / 256)
        assert ix.to_docid(dist, space) == (1, 257, 513, 769)

    def test_batch_conversion(self):
        space = IdSpace(2, 4)
        dist = np.random.default_rng(10).random((5, 2, 4))
        ids = ix.to_docids(dist, space)
        assert len(ids) == 5
        assert all(space.is_valid(i) for i in ids)


class TestKmeansPP:
    def test_needs_enough_points(self):
        with pytest.raises(ValueError, match="at least"):
            ix.kmeans_pp(np.ones((3, 2)), 4, np.random.default_rng(0))

    def test_deterministic_and_spread(self):
        pts = np.random.default_rng(11).standard_normal((100, 4))
        a = ix.kmeans_pp(pts, 8, np.random.default_rng(1))
        b = ix.kmeans_pp(pts, 8, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)
        assert len(np.unique(a, axis=0)) == 8
