import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from statsmodels.stats.multitest import multipletests

from mgtwr import Dataset, KernelSpec
from mgtwr.errors import InferenceDisabledError, InferenceInfeasibleError, InvalidInputError
from mgtwr.inference import accumulate_hat, exact_se, fdr_adjust, infer
from mgtwr.kernels import WeightEngine
from mgtwr.local_regression import smoother_matrix
from mgtwr.tds import TdsConfig, backfit, backfit_fixed, build_grid

from .conftest import make_dataset
from .oracles import by_bruteforce


@pytest.fixture(scope="module")
def multiscale():
    ds = make_dataset(150, 3, seed=11, noise=0.5)
    fit = backfit(ds, KernelSpec(), TdsConfig(M=10))
    return ds, fit


def _global_fit(ds):
    spec = KernelSpec()
    return backfit_fixed(ds, spec, build_grid(ds, 6, spec), np.zeros((ds.K, 2), dtype=int))


class TestAccumulateHat:
    def test_all_global_is_ols_hat(self):
        ds = make_dataset(50, 3, seed=1, coef=[1, 2, 3])
        fit = _global_fit(ds)
        led = accumulate_hat(fit, ds)
        H = ds.X @ np.linalg.solve(ds.X.T @ ds.X, ds.X.T)
        np.testing.assert_allclose(led.S, H, atol=1e-10)
        assert led.trS == pytest.approx(3.0)

    def test_single_covariate_is_smoother(self):
        rng = np.random.default_rng(0)
        n = 40
        ds = Dataset(rng.uniform(size=(n, 2)), rng.uniform(0, 100, n), np.ones((n, 1)), rng.standard_normal(n))
        spec = KernelSpec()
        g = build_grid(ds, 6, spec)
        fit = backfit_fixed(ds, spec, g, np.array([[3, 2]]))
        led = accumulate_hat(fit, ds)
        C = smoother_matrix(ds.X[:, 0], *g.resolve(3, 2), WeightEngine(ds.coords, ds.times, spec))
        np.testing.assert_allclose(led.S, C, atol=1e-12)

    def test_replay_reproduces_fitted_values(self):
        ds = make_dataset(60, 3, seed=2)
        fit = backfit(ds, KernelSpec(), TdsConfig(M=8))
        assert len(fit.trace) > 0
        led = accumulate_hat(fit, ds)
        np.testing.assert_allclose(led.S @ ds.y, ds.y - fit.residuals, atol=1e-6)
        for k in range(3):
            np.testing.assert_allclose(led.B[k] @ ds.y, fit.beta[:, k], atol=1e-6)

    def test_trace_bounds(self, multiscale):
        ds, fit = multiscale
        trS = accumulate_hat(fit, ds).trS
        assert ds.K - 1e-8 <= trS <= ds.n

    def test_cap(self):
        ds = make_dataset(60, 2, seed=3)
        with pytest.raises(InferenceDisabledError, match="prediction-only"):
            accumulate_hat(_global_fit(ds), ds, cap=50)


class TestExactSe:
    def test_all_global_matches_textbook_ols(self):
        import statsmodels.api as sm

        ds = make_dataset(80, 3, seed=4, coef=[1.0, 0.5, -1.0], noise=1.0)
        fit = _global_fit(ds)
        res = exact_se(accumulate_hat(fit, ds), fit)
        ref = sm.OLS(ds.y, ds.X).fit()
        np.testing.assert_allclose(res.se[0], ref.bse, rtol=1e-8)
        np.testing.assert_allclose(res.t_stats[0], ref.tvalues, rtol=1e-8)

    def test_all_global_methods_coincide(self):
        ds = make_dataset(80, 3, seed=5, coef=[1.0, 0.5, -1.0], noise=1.0)
        fit = _global_fit(ds)
        a = infer(fit, ds, "exact")
        b = infer(fit, ds, "local_approx")
        np.testing.assert_allclose(a.se, b.se, rtol=1e-10)
        np.testing.assert_allclose(a.p_fdr, b.p_fdr, rtol=1e-10)

    def test_single_covariate_local_equals_exact(self):
        rng = np.random.default_rng(6)
        n = 80
        coords = rng.uniform(size=(n, 2))
        ds = Dataset(coords, rng.uniform(0, 100, n), np.ones((n, 1)), np.sin(3 * coords[:, 0]) + rng.standard_normal(n))
        spec = KernelSpec()
        fit = backfit_fixed(ds, spec, build_grid(ds, 6, spec), np.array([[3, 1]]))
        np.testing.assert_allclose(infer(fit, ds, "exact").se, infer(fit, ds, "local_approx").se, rtol=1e-8)

    def test_df_penalty_widens(self, multiscale):
        ds, fit = multiscale
        led = accumulate_hat(fit, ds)
        a, b = exact_se(led, fit, p_f=0), exact_se(led, fit, p_f=20)
        assert b.sigma2_hat > a.sigma2_hat
        assert np.all(b.se >= a.se)

    def test_infeasible_df(self, multiscale):
        ds, fit = multiscale
        with pytest.raises(InferenceInfeasibleError):
            exact_se(accumulate_hat(fit, ds), fit, p_f=ds.n)

    def test_exact_wider_than_local(self, multiscale):
        ds, fit = multiscale
        ex = infer(fit, ds, "exact")
        la = infer(fit, ds, "local_approx")
        local = [k for k in range(ds.K) if not fit.is_global(k)]
        assert local
        for k in local:
            assert ex.se[:, k].mean() > la.se[:, k].mean()

    def test_zero_residual_se_flagged(self):
        ds = make_dataset(40, 2, seed=7, coef=[1.0, 2.0], noise=0.0)
        res = infer(_global_fit(ds), ds)
        assert np.allclose(res.se, 0.0, atol=1e-6)

    def test_t_reference(self, multiscale):
        ds, fit = multiscale
        n_res = infer(fit, ds, reference="normal")
        t_res = infer(fit, ds, reference="t")
        np.testing.assert_allclose(t_res.p_raw, 2 * stats.t.sf(np.abs(t_res.t_stats), t_res.df))
        assert np.all(t_res.p_raw >= n_res.p_raw - 1e-15)

    def test_result_invariants(self, multiscale):
        ds, fit = multiscale
        for method in ("exact", "local_approx"):
            r = infer(fit, ds, method)
            assert np.all(r.se > 0)
            assert np.all((r.p_raw >= 0) & (r.p_raw <= 1))
            assert np.all(r.p_fdr >= r.p_raw - 1e-15)
            rows = r.significance_table()
            assert [row["covariate"] for row in rows] == list(fit.names)
            assert rows[0]["pct_sig_10"] >= rows[0]["pct_sig_5"] >= rows[0]["pct_sig_1"]

    def test_unknown_method(self, multiscale):
        ds, fit = multiscale
        with pytest.raises(InvalidInputError):
            infer(fit, ds, "bootstrap")


class TestFdr:
    def test_all_ones(self):
        np.testing.assert_array_equal(fdr_adjust(np.ones(9)), 1.0)

    def test_single(self):
        assert fdr_adjust(np.array([0.03]))[0] == pytest.approx(0.03)

    def test_ten_hand_set(self):
        p = np.array([0.001, 0.008, 0.039, 0.041, 0.042, 0.06, 0.074, 0.205, 0.212, 0.216])
        np.testing.assert_allclose(fdr_adjust(p), by_bruteforce(p), rtol=1e-12)
        np.testing.assert_allclose(fdr_adjust(p), multipletests(p, method="fdr_by")[1], rtol=1e-12)

    @given(arrays(float, st.tuples(st.integers(1, 30), st.integers(1, 3)), elements=st.floats(0, 1)))
    def test_columnwise_matches_reference(self, P):
        out = fdr_adjust(P)
        for j in range(P.shape[1]):
            np.testing.assert_allclose(out[:, j], multipletests(P[:, j], method="fdr_by")[1], rtol=1e-10, atol=1e-15)
            order = np.argsort(P[:, j], kind="stable")
            assert np.all(np.diff(out[order, j]) >= -1e-15)
        assert np.all(out >= P - 1e-15)

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            fdr_adjust(np.array([0.5, 1.5]))
