import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgtwr import Dataset, KernelSpec, ols
from mgtwr.errors import InvalidInputError
from mgtwr.kernels import GLOBAL, WeightEngine
from mgtwr.simulation import DgpConfig, gen_dataset
from mgtwr.tds import (
    BandwidthGrid,
    ScaleState,
    TdsConfig,
    backfit,
    backfit_fixed,
    build_grid,
    candidate_set,
    geometric_levels,
    importance_scores,
    steepest_descent_step,
    update_order,
)

from .conftest import make_dataset
from .oracles import backfit_loop, weight_matrix


def _grid(Ms=10, Mt=10):
    return BandwidthGrid(np.arange(Ms, 0, -1) * 10.0, np.arange(Mt, 0, -1) * 5.0)


class TestGrid:
    def test_three_levels(self):
        np.testing.assert_allclose(geometric_levels(100, 1, 3), [100, 10, 1])

    def test_adaptive_endpoints(self):
        ds = make_dataset(600, 4, seed=0)
        g = build_grid(ds, 20, KernelSpec())
        assert g.spatial[0] == 600
        assert g.spatial[-1] >= 6
        assert np.all(np.diff(g.spatial) < 0)
        assert np.all(g.spatial == np.round(g.spatial))

    def test_temporal_span(self):
        ds = make_dataset(200, 3, seed=1)
        g = build_grid(ds, 8, KernelSpec())
        assert g.temporal[0] == pytest.approx(ds.times.max() - ds.times.min())
        assert len(g.temporal) == 8
        gc = build_grid(ds, 8, KernelSpec(cyclic=True, cycle_length=365))
        assert gc.temporal[0] == pytest.approx(182.5)

    def test_spatial_only_has_single_temporal_level(self):
        g = build_grid(make_dataset(100, 3), 10, KernelSpec(temporal_family=None))
        assert len(g.temporal) == 1

    def test_every_level_non_degenerate(self):
        rng = np.random.default_rng(0)
        n = 1000
        ds = Dataset(rng.uniform(size=(n, 2)), rng.uniform(0, 365, n),
                     np.column_stack([np.ones(n), rng.standard_normal((n, 3))]), rng.standard_normal(n))
        spec = KernelSpec(spatial_family="bisquare", spatial_adaptive=False, temporal_family=None)
        g = build_grid(ds, 12, spec)
        eng = WeightEngine(ds.coords, ds.times, spec)
        for h in g.spatial[1:]:
            W = eng.weights(h, GLOBAL)
            assert np.count_nonzero(W > 0, axis=1).min() >= ds.K + 2

    def test_small_data_shortens_with_warning(self):
        ds = make_dataset(12, 3, seed=0)
        g = build_grid(ds, 20, KernelSpec())
        assert len(g.spatial) < 20
        assert len(np.unique(g.spatial)) == len(g.spatial)
        assert any("shortened" in w for w in g.warnings)

    def test_rejects_non_decreasing(self):
        with pytest.raises(InvalidInputError):
            BandwidthGrid([10.0, 10.0, 5.0], [3.0])

    def test_m_too_small(self):
        with pytest.raises(InvalidInputError):
            build_grid(make_dataset(50, 2), 2, KernelSpec())


class TestCandidateSet:
    def test_all_at_max(self):
        idx = np.zeros((3, 2), dtype=int)
        c = candidate_set(0, idx, _grid())
        assert sorted(c) == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_interior_full_product(self):
        idx = np.array([[4, 4], [8, 7], [2, 1]])
        assert len(candidate_set(0, idx, _grid())) == 16

    def test_cross_min_is_largest_index(self):
        idx = np.array([[3, 0], [5, 0], [7, 0]])
        cs = sorted({a for a, _ in candidate_set(0, idx, _grid())})
        assert cs == [2, 3, 4, 7]

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 4)), min_size=1, max_size=5), st.data())
    def test_contains_incumbent_and_bounded(self, rows, data):
        idx = np.array(rows)
        k = data.draw(st.integers(0, len(rows) - 1))
        c = candidate_set(k, idx, _grid(10, 5))
        assert tuple(idx[k]) in c
        assert len(c) <= 16
        assert all(0 <= a < 10 and 0 <= b < 5 for a, b in c)


def _state(ds, indices=None):
    b = ols(ds.X, ds.y)
    idx = np.zeros((ds.K, 2), dtype=int) if indices is None else np.array(indices)
    return ScaleState(idx, np.tile(b, (ds.n, 1)), ds.X)


class TestSteepestDescent:
    def test_pure_noise_keeps_max(self):
        rng = np.random.default_rng(0)
        n = 300
        ds = Dataset(rng.uniform(size=(n, 2)), rng.uniform(0, 365, n), np.ones((n, 1)), rng.standard_normal(n))
        spec = KernelSpec()
        g = build_grid(ds, 10, spec)
        eng = WeightEngine(ds.coords, ds.times, spec)
        pair, _, moved, _ = steepest_descent_step(0, _state(ds), ds.y, g, eng)
        assert pair == (0, 0) and not moved

    def test_decoupled_descent_keeps_temporal_max(self):
        # AICc may accept a mild temporal taper in some draws, so check frequency
        kept = []
        for seed in range(6):
            rng = np.random.default_rng(seed)
            n = 400
            coords = rng.uniform(size=(n, 2))
            x = rng.standard_normal(n)
            beta = 3 * np.sin(2 * np.pi * coords[:, 0])
            X = np.column_stack([np.ones(n), x])
            ds = Dataset(coords, rng.uniform(0, 365, n), X, beta * x + rng.standard_normal(n))
            fit = backfit(ds, KernelSpec(), TdsConfig(M=12, order_strategy="fixed_cyclic"))
            assert fit.indices[1, 0] > 0
            kept.append(fit.at_temporal_max(1) and fit.scale_kind(1) == "spatial_only")
        assert sum(kept) >= 4

    def test_parallel_equals_sequential(self):
        ds = make_dataset(150, 3, seed=3)
        spec = KernelSpec()
        g = build_grid(ds, 8, spec)
        state = _state(ds, [[3, 2], [5, 4], [1, 6]])
        eng = WeightEngine(ds.coords, ds.times, spec)
        a = steepest_descent_step(0, state, ds.y, g, eng, workers=1)
        b = steepest_descent_step(0, state, ds.y, g, WeightEngine(ds.coords, ds.times, spec), workers=4)
        assert a[0] == b[0] and a[1] == b[1]
        np.testing.assert_array_equal(a[3], b[3])


class TestImportance:
    def test_constant_coefficient(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(50)
        x = (x - x.mean()) / x.std()
        X = np.column_stack([np.ones(50), x])
        st_ = ScaleState(np.zeros((2, 2), dtype=int), np.tile([1.0, 2.5], (50, 1)), X)
        assert importance_scores(st_)[1] == pytest.approx(2.5 * np.abs(x).mean())

    def test_zero_goes_last_and_intercept_first(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(40), rng.standard_normal((40, 3))])
        beta = np.column_stack([np.zeros(40), np.zeros(40), np.full(40, 1.0), np.full(40, 3.0)])
        st_ = ScaleState(np.zeros((4, 2), dtype=int), beta, X)
        assert update_order("importance", st_, np.random.default_rng(0)) == [0, 3, 2, 1]

    def test_bruteforce(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([np.ones(30), rng.standard_normal((30, 2))])
        beta = rng.standard_normal((30, 3))
        st_ = ScaleState(np.zeros((3, 2), dtype=int), beta, X)
        expected = []
        for k in range(3):
            s = 1.0 if k == 0 else np.std(X[:, k])
            expected.append(sum(abs(beta[i, k] * X[i, k]) for i in range(30)) / 30 / s)
        np.testing.assert_allclose(importance_scores(st_), expected)

    def test_random_order_is_permutation(self):
        ds = make_dataset(30, 4)
        o = update_order("random", _state(ds), np.random.default_rng(5))
        assert sorted(o) == [0, 1, 2, 3]


class TestBackfit:
    def test_constant_dgp_all_global_is_ols(self):
        ds = make_dataset(300, 3, seed=5, coef=[1.0, -2.0, 0.5], noise=1.0)
        fit = backfit(ds, KernelSpec(), TdsConfig(M=10))
        assert all(fit.is_global(k) for k in range(3))
        np.testing.assert_allclose(fit.beta, np.tile(ols(ds.X, ds.y), (300, 1)), rtol=1e-8)

    def test_constant_dgp_mostly_global(self):
        # AICc admits chance local fits; they must stay close to OLS
        n_global, devs = 0, []
        for seed in range(10):
            ds = make_dataset(300, 3, seed=seed, coef=[1.0, -2.0, 0.5], noise=1.0)
            fit = backfit(ds, KernelSpec(), TdsConfig(M=10))
            n_global += sum(fit.is_global(k) for k in range(3))
            devs.append(np.sqrt(((fit.beta - ols(ds.X, ds.y)) ** 2).mean()))
        assert n_global / 30 >= 0.5
        assert max(devs) < 0.15

    @pytest.mark.parametrize("strategy", ["fixed_cyclic", "random", "importance"])
    def test_reproducible(self, strategy):
        ds = make_dataset(150, 3, seed=5)
        cfg = TdsConfig(M=10, order_strategy=strategy, seed=3)
        a, b = backfit(ds, KernelSpec(), cfg), backfit(ds, KernelSpec(), cfg)
        np.testing.assert_array_equal(a.beta, b.beta)
        assert a.trace == b.trace

    def test_final_indices_on_grid_and_log_records(self):
        ds = make_dataset(150, 3, seed=6)
        fit = backfit(ds, KernelSpec(), TdsConfig(M=10))
        assert fit.indices.min() >= 0
        assert fit.indices[:, 0].max() < len(fit.grid.spatial)
        assert fit.indices[:, 1].max() < len(fit.grid.temporal)
        rec = fit.log[0]
        assert {"sweep", "covariate", "old", "new", "aicc", "rmse", "moved"} <= set(rec)
        assert len(fit.rmse_history) == fit.n_sweeps + 1

    def test_rmse_violations_are_surfaced(self):
        ds = make_dataset(200, 3, seed=7)
        fit = backfit(ds, KernelSpec(), TdsConfig(M=10))
        rises = [b > a + 1e-9 for a, b in zip(fit.rmse_history, fit.rmse_history[1:])]
        assert sum(rises) == sum("RMSE rose" in w for w in fit.warnings)

    def test_non_convergence_flagged(self):
        ds = make_dataset(150, 3, seed=8)
        fit = backfit(ds, KernelSpec(), TdsConfig(M=10, max_iterations=1))
        assert not fit.converged and fit.n_sweeps == 1

    def test_backfit_fixed_matches_loop(self):
        ds = make_dataset(40, 3, seed=9)
        spec = KernelSpec()
        g = build_grid(ds, 6, spec)
        idx = np.array([[2, 1], [3, 0], [0, 2]])
        fit = backfit_fixed(ds, spec, g, idx)
        Ws = []
        for k in range(3):
            h_s, h_t = g.resolve(*idx[k])
            Ws.append(weight_matrix(ds.coords, ds.times, h_s, h_t, spec))
        np.testing.assert_allclose(fit.beta, backfit_loop(ds.X, ds.y, Ws), rtol=1e-7, atol=1e-8)

    def test_order_strategies_agree(self):
        sim = gen_dataset(DgpConfig(n=1000, seed=11))
        ds = sim.dataset.subset(sim.train)
        truth = sim.beta[sim.train]
        means = []
        for s in ("fixed_cyclic", "random", "importance"):
            fit = backfit(ds, KernelSpec(temporal_family=None), TdsConfig(order_strategy=s, seed=1))
            means.append(np.sqrt(((fit.beta - truth) ** 2).mean(axis=0)).mean())
        print("mean coefficient RMSE by schedule:", np.round(means, 5))
        assert max(means) - min(means) <= 1e-2
