import numpy as np
import pytest

import intravol.linmodels as lin
from intravol.features import normalize
from intravol.linmodels import (
    LassoConvergenceError,
    RankDeficientError,
    fit_lasso,
    fit_ols,
    kkt_residuals,
    lasso_lambda_max,
    lasso_objective,
    predict_linear,
    select_lasso_lambda,
)
from tests.conftest import make_matrix


def standardized(X, y, fit_rows=None, **kw):
    m = make_matrix(X, y, **kw)
    rows = np.arange(len(y)) if fit_rows is None else fit_rows
    return normalize(m, rows)


class TestOLS:
    def test_two_points_define_a_line(self):
        m = make_matrix(np.array([[0.0], [1.0]]), np.array([1.0, 3.0]))
        model = fit_ols(m)
        assert model.intercept == pytest.approx(1.0, abs=1e-12)
        assert model.coef[0] == pytest.approx(2.0, abs=1e-12)

    def test_constant_target(self):
        rng = np.random.default_rng(0)
        m = make_matrix(rng.standard_normal((20, 3)), np.full(20, 7.5))
        model = fit_ols(m)
        assert np.abs(model.coef).max() < 1e-12
        assert model.intercept == pytest.approx(7.5)

    def test_gradient_zero_and_perturbation_optimality(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((200, 5))
        y = X @ np.array([1.0, -2.0, 0.5, 0.0, 3.0]) + rng.standard_normal(200)
        m = make_matrix(X, y)
        model = fit_ols(m)
        resid = y - model.intercept - X @ model.coef
        assert np.abs(X.T @ resid).max() < 1e-8
        assert abs(resid.sum()) < 1e-8

        best = model.sse
        for _ in range(1000):
            beta = model.coef + rng.standard_normal(5) * 0.01
            alpha = model.intercept + rng.standard_normal() * 0.01
            sse = float(np.sum((y - alpha - X @ beta) ** 2))
            assert sse >= best - 1e-9

    def test_nested_model_sse_non_increasing(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((100, 4))
        y = rng.standard_normal(100)
        sses = []
        for k in range(1, 5):
            m = make_matrix(X[:, :k], y)
            sses.append(fit_ols(m).sse)
        assert all(a >= b - 1e-10 for a, b in zip(sses, sses[1:]))

    def test_duplicate_column_errors_with_names(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(30)
        m = make_matrix(np.column_stack([x, x]), rng.standard_normal(30),
                        columns=("a", "a_copy"))
        with pytest.raises(RankDeficientError, match="a_copy"):
            fit_ols(m)

    def test_near_singular_uses_jitter(self):
        # correlated at ~1e-8: numerically independent (QR sees full rank)
        # but ill-conditioned enough to trip the pivot check
        rng = np.random.default_rng(4)
        x = rng.standard_normal(1500)
        X = np.column_stack([x, x + 1e-8 * rng.standard_normal(1500)])
        m = make_matrix(X, rng.standard_normal(1500))
        model = fit_ols(m)
        assert model.jitter_used

    def test_too_few_rows(self):
        m = make_matrix(np.ones((3, 3)) + np.eye(3), np.zeros(3))
        with pytest.raises(ValueError, match="rows"):
            fit_ols(m)


class TestLasso:
    def test_zero_penalty_matches_ols(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((80, 6))
        y = X @ rng.standard_normal(6) + 0.1 * rng.standard_normal(80)
        m = standardized(X, y)
        ols = fit_ols(m)
        lasso = fit_lasso(m, 0.0)
        assert np.abs(ols.coef - lasso.coef).max() < 1e-6
        assert abs(ols.intercept - lasso.intercept) < 1e-6

    def test_lambda_max_shrinks_everything(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((60, 4))
        y = X @ np.array([2.0, -1.0, 0.5, 0.0]) + rng.standard_normal(60)
        m = standardized(X, y)
        lam = lasso_lambda_max(m)
        model = fit_lasso(m, lam)
        assert (model.coef == 0.0).all()
        below = fit_lasso(m, 0.99 * lam)
        assert (below.coef != 0.0).any()

    def test_kkt_conditions(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((100, 8))
        y = X @ rng.standard_normal(8) + rng.standard_normal(100)
        m = standardized(X, y)
        lam_max = lasso_lambda_max(m)
        for frac in (0.5, 0.1, 0.01):
            model = fit_lasso(m, frac * lam_max)
            scale = max(lam_max, 1.0)
            assert kkt_residuals(m, model).max() < 1e-6 * scale

    def test_objective_matches_grid_oracle(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((50, 3))
        y = X @ np.array([1.0, -0.5, 0.0]) + 0.3 * rng.standard_normal(50)
        m = standardized(X, y)
        lam = 0.3 * lasso_lambda_max(m)
        model = fit_lasso(m, lam)
        fit_obj = lasso_objective(m, model)

        # dense local grid around the fitted coefficients
        deltas = np.arange(-0.02, 0.0201, 0.002)
        best = np.inf
        for d0 in deltas:
            for d1 in deltas:
                for d2 in deltas:
                    beta = model.coef + np.array([d0, d1, d2])
                    resid = m.y - m.y.mean() - (m.X - m.X.mean(axis=0)) @ beta
                    obj = 0.5 * float(resid @ resid) + lam * np.abs(beta).sum()
                    best = min(best, obj)
        assert fit_obj <= best + 1e-6

    def test_objective_trace_non_increasing(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((120, 10))
        y = X @ rng.standard_normal(10) + rng.standard_normal(120)
        m = standardized(X, y)
        model = fit_lasso(m, 0.05 * lasso_lambda_max(m))
        trace = model.objective_trace
        assert (np.diff(trace) <= 1e-9).all()

    def test_non_convergence_error(self, monkeypatch):
        rng = np.random.default_rng(10)
        X = rng.standard_normal((50, 5))
        y = rng.standard_normal(50)
        m = standardized(X, y)
        monkeypatch.setattr(lin, "CD_MAX_SWEEPS", 1)
        with pytest.raises(LassoConvergenceError) as err:
            fit_lasso(m, 0.0)
        assert err.value.sweeps == 1

    def test_requires_standardized_columns(self):
        m = make_matrix(np.arange(40.0).reshape(20, 2) + 1, np.zeros(20))
        with pytest.raises(ValueError, match="standardized"):
            fit_lasso(m, 0.1)


class TestSelectLambda:
    def test_pure_noise_prefers_heavy_shrinkage(self):
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X = rng.standard_normal((120, 5))
            y = rng.standard_normal(120)
            m = standardized(X, y)
            path = select_lasso_lambda(m, folds=5)
            median_lam = np.median(path.lambdas)
            if path.selected_lambda >= median_lam:
                hits += 1
        assert hits >= 16

    def test_noiseless_signal_selects_grid_minimum(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((150, 4))
        beta = np.array([1.5, -2.0, 0.7, 0.3])
        m = standardized(X, X @ beta)
        path = select_lasso_lambda(m, folds=5)
        assert path.selected_lambda == pytest.approx(path.lambdas[-1])
        sel = path.selected_model
        recovered = sel.coef / m.norm.stds    # undo column scaling
        assert np.abs(recovered - beta).max() < 1e-3

    def test_fold_bounds_partition_in_order(self):
        assert lin._fold_bounds(10, 3) == [(0, 3), (3, 6), (6, 10)]
        bounds = lin._fold_bounds(103, 5)
        assert bounds[0][0] == 0 and bounds[-1][1] == 103
        assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))

    def test_nonzero_counts_monotone_at_endpoints(self):
        rng = np.random.default_rng(12)
        X = rng.standard_normal((150, 6))
        y = X @ rng.standard_normal(6) + rng.standard_normal(150)
        m = standardized(X, y)
        path = select_lasso_lambda(m, folds=5)
        counts = path.nonzero_counts()
        assert counts[0] <= counts[-1]
        assert counts[0] == 0 or path.lambdas[0] > 0

    def test_too_few_rows(self):
        m = standardized(np.random.default_rng(0).standard_normal((40, 2)),
                         np.zeros(40))
        with pytest.raises(ValueError, match="rows"):
            select_lasso_lambda(m, folds=5)


class TestPredict:
    def test_zero_coefficients_constant(self):
        rng = np.random.default_rng(13)
        m = make_matrix(rng.standard_normal((10, 3)), rng.standard_normal(10))
        model = lin.LinearModel(intercept=2.5, coef=np.zeros(3),
                                columns=m.columns, sse=0.0, n_obs=10)
        assert (predict_linear(model, m) == 2.5).all()

    def test_training_fit_reproduces_sse(self):
        rng = np.random.default_rng(14)
        m = make_matrix(rng.standard_normal((60, 4)), rng.standard_normal(60))
        model = fit_ols(m)
        resid = m.y - predict_linear(model, m)
        assert float(resid @ resid) == pytest.approx(model.sse, rel=1e-12)

    def test_dot_product_oracle(self):
        rng = np.random.default_rng(15)
        m = make_matrix(rng.standard_normal((30, 5)), rng.standard_normal(30))
        model = lin.LinearModel(intercept=0.3, coef=rng.standard_normal(5),
                                columns=m.columns, sse=0.0, n_obs=30)
        pred = predict_linear(model, m)
        for i in range(30):
            manual = 0.3 + sum(model.coef[j] * m.X[i, j] for j in range(5))
            assert abs(pred[i] - manual) < 1e-14

    def test_column_mismatch_lists_differences(self):
        rng = np.random.default_rng(16)
        m = make_matrix(rng.standard_normal((10, 2)), np.zeros(10),
                        columns=("a", "b"))
        model = lin.LinearModel(intercept=0.0, coef=np.zeros(2),
                                columns=("a", "c"), sse=0.0, n_obs=10)
        with pytest.raises(ValueError, match="'c'"):
            predict_linear(model, m)
