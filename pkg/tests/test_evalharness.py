import math

import numpy as np
import pytest

from intravol.evalharness import (
    Records,
    RecordStore,
    RollingSplit,
    RunSettings,
    dm_test,
    make_annual_splits,
    metrics,
    monthly_mse,
    newey_west_lrv,
    run_experiment,
)
from intravol.marketdata import SyntheticSpec, generate_synthetic_panel


def records_from(tickers, times, forecast, actual):
    order = np.lexsort((times, tickers))
    return Records(tickers=np.asarray(tickers)[order],
                   times=np.asarray(times, dtype="datetime64[m]")[order],
                   forecast=np.asarray(forecast, dtype=float)[order],
                   actual=np.asarray(actual, dtype=float)[order])


def day_times(n, start="2020-01-06T16:00"):
    return np.datetime64(start, "m") + (np.arange(n) * 1440).astype("timedelta64[m]")


class TestSplits:
    def test_worked_example(self):
        cal = np.arange(1008)
        sp = make_annual_splits(cal, 756, 1)[0]
        assert sp.train == (0, 505)
        assert sp.valid == (506, 755)
        assert sp.test == (756, 1006)

    def test_second_split_advances_one_test_year(self):
        cal = np.arange(1300)
        splits = make_annual_splits(cal, 756, 2)
        assert splits[1].train == (0, 756)
        assert splits[1].test == (1007, 1257)
        assert splits[1].train[1] - splits[0].train[1] == 251

    def test_tiling_without_gap_or_overlap(self):
        cal = np.arange(1510)
        splits = make_annual_splits(cal, 500, 4)
        for a, b in zip(splits, splits[1:]):
            assert b.test[0] == a.test[1] + 1

    def test_insufficient_history_message(self):
        with pytest.raises(ValueError, match="need"):
            make_annual_splits(np.arange(400), 300, 2)
        with pytest.raises(ValueError, match="training"):
            make_annual_splits(np.arange(600), 100, 1)

    def test_split_invariants(self):
        with pytest.raises(ValueError):
            RollingSplit(train=(0, 10), valid=(10, 20), test=(21, 30))
        with pytest.raises(ValueError):
            RollingSplit(train=(0, 10), valid=(12, 20), test=(21, 30))


class TestMetrics:
    def test_perfect_forecast(self):
        t = day_times(4)
        rec = records_from(["A"] * 4, t, [1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])
        m = metrics(rec)
        assert (m.mse, m.mape, m.r2) == (0.0, 0.0, 1.0)

    def test_two_point_example(self):
        t = day_times(2)
        rec = records_from(["A", "A"], t, [-3.0, -3.0], [-4.0, -2.0])
        m = metrics(rec)
        assert m.mse == pytest.approx(1.0)
        assert m.mape == pytest.approx((0.25 + 0.5) / 2)
        assert m.r2 == pytest.approx(0.0)

    def test_mean_forecast_gives_zero_r2(self):
        rng = np.random.default_rng(0)
        t = day_times(50)
        recs = []
        for ticker in ("A", "B", "C"):
            actual = rng.standard_normal(50) - 4
            recs.append(records_from([ticker] * 50, t,
                                     np.full(50, actual.mean()), actual))
        rec = records_from(
            np.concatenate([r.tickers for r in recs]),
            np.concatenate([r.times for r in recs]),
            np.concatenate([r.forecast for r in recs]),
            np.concatenate([r.actual for r in recs]))
        assert metrics(rec).r2 == pytest.approx(0.0, abs=1e-12)

    def test_matches_per_stock_oracle(self):
        rng = np.random.default_rng(1)
        tickers = np.repeat([f"S{i}" for i in range(5)], 40)
        times = np.tile(day_times(40), 5)
        actual = rng.standard_normal(200) - 4
        forecast = actual + 0.3 * rng.standard_normal(200)
        rec = records_from(tickers, times, forecast, actual)
        m = metrics(rec)

        mses, mapes, r2s = [], [], []
        for s in sorted(set(tickers)):
            sel = rec.tickers == s
            e = rec.forecast[sel] - rec.actual[sel]
            a = rec.actual[sel]
            mses.append(np.mean(e ** 2))
            mapes.append(np.mean(np.abs(e / a)))
            r2s.append(1 - np.sum(e ** 2) / np.sum((a - a.mean()) ** 2))
        assert m.mse == pytest.approx(np.mean(mses), abs=1e-12)
        assert m.mape == pytest.approx(np.mean(mapes), abs=1e-12)
        assert m.r2 == pytest.approx(np.mean(r2s), abs=1e-12)

    def test_zero_actual_excluded_from_mape(self):
        t = day_times(3)
        rec = records_from(["A"] * 3, t, [1.0, 1.0, 2.0], [0.0, 2.0, 4.0])
        m = metrics(rec)
        assert m.mape_excluded == 1
        assert m.mape == pytest.approx((0.5 + 0.5) / 2)

    def test_needs_two_records_per_stock(self):
        rec = records_from(["A"], day_times(1), [1.0], [1.0])
        with pytest.raises(ValueError, match=">= 2"):
            metrics(rec)

    def test_monthly_mse_grouping(self):
        t = np.array(["2020-01-10T16:00", "2020-01-20T16:00", "2020-02-10T16:00"],
                     dtype="datetime64[m]")
        rec = records_from(["A"] * 3, t, [1.0, 2.0, 5.0], [0.0, 0.0, 0.0])
        months, values = monthly_mse(rec)
        assert list(months.astype(str)) == ["2020-01", "2020-02"]
        assert values[0] == pytest.approx(2.5)
        assert values[1] == pytest.approx(25.0)


class TestDMTest:
    def test_identical_forecasts_degenerate(self):
        t = day_times(30)
        a = records_from(["A"] * 30, t, np.ones(30), np.zeros(30))
        res = dm_test(a, a)
        assert res.degenerate
        assert res.statistic == 0.0 and res.p_value == 1.0

    def test_antisymmetry(self):
        rng = np.random.default_rng(2)
        t = np.tile(day_times(60), 2)
        tickers = np.repeat(["A", "B"], 60)
        actual = rng.standard_normal(120)
        fa = actual + 0.5 * rng.standard_normal(120)
        fb = actual + 0.7 * rng.standard_normal(120)
        ra = records_from(tickers, t, fa, actual)
        rb = records_from(tickers, t, fb, actual)
        ab = dm_test(ra, rb)
        ba = dm_test(rb, ra)
        assert ab.statistic == pytest.approx(-ba.statistic, abs=1e-12)
        assert ab.p_value == pytest.approx(ba.p_value, abs=1e-12)

    def test_newey_west_oracle_on_fixture(self):
        # length-100 differential series with serial correlation
        rng = np.random.default_rng(3)
        d = np.cumsum(rng.standard_normal(100)) * 0.05 + 0.2
        T = 100
        bandwidth = int(math.floor(4.0 * (T / 100.0) ** (2.0 / 9.0)))

        dc = d - d.mean()
        gammas = [float(dc @ dc) / T]
        for k in range(1, bandwidth + 1):
            gammas.append(float(dc[k:] @ dc[:-k]) / T)
        lrv_oracle = gammas[0] + 2 * sum(
            (1 - k / (bandwidth + 1)) * gammas[k] for k in range(1, bandwidth + 1))
        assert abs(newey_west_lrv(d, bandwidth) - lrv_oracle) < 1e-10

        t = day_times(100)
        actual = np.zeros(100)
        fa = np.sqrt(1.0 + d)               # L(e_a) - L(e_b) = (1+d) - 1 = d
        ra = records_from(["A"] * 100, t, fa, actual)
        rb = records_from(["A"] * 100, t, np.ones(100), actual)
        res = dm_test(ra, rb)
        expected = d.mean() / math.sqrt(lrv_oracle / T)
        assert res.statistic == pytest.approx(expected, abs=1e-10)
        assert res.bandwidth == bandwidth

    def test_cross_sectional_average(self):
        t = day_times(40)
        tickers = np.repeat(["A", "B"], 40)
        times = np.tile(t, 2)
        actual = np.zeros(80)
        rng = np.random.default_rng(4)
        fa = rng.standard_normal(80)
        fb = rng.standard_normal(80)
        ra = records_from(tickers, times, fa, actual)
        rb = records_from(tickers, times, fb, actual)
        res = dm_test(ra, rb)
        # oracle: average the loss differential across the two stocks per day
        diff = (ra.forecast ** 2) - (rb.forecast ** 2)
        d = diff[:40] * 0 + (diff[ra.tickers == "A"] + diff[ra.tickers == "B"]) / 2
        bw = int(math.floor(4.0 * (40 / 100.0) ** (2.0 / 9.0)))
        expected = d.mean() / math.sqrt(newey_west_lrv(d, bw) / 40)
        assert res.statistic == pytest.approx(expected, abs=1e-10)

    def test_coverage_mismatch_rejected(self):
        t = day_times(10)
        ra = records_from(["A"] * 10, t, np.ones(10), np.zeros(10))
        rb = records_from(["B"] * 10, t, np.ones(10), np.zeros(10))
        with pytest.raises(ValueError, match="identical"):
            dm_test(ra, rb)

    def test_constant_nonzero_differential_errors(self):
        t = day_times(20)
        ra = records_from(["A"] * 20, t, np.full(20, 2.0), np.zeros(20))
        rb = records_from(["A"] * 20, t, np.full(20, 1.0), np.zeros(20))
        with pytest.raises(ValueError, match="variance"):
            dm_test(ra, rb)


@pytest.fixture(scope="module")
def small_run():
    panel = generate_synthetic_panel(SyntheticSpec(
        n_tickers=3, n_days=540, common_factor_loading=0.7, rng_seed=3))
    settings = RunSettings(horizons=(390,), models=("har-d", "ols"),
                           schemes=("single", "universal", "augmented"),
                           first_test_index=289, n_years=1, seed=17)
    return panel, settings, run_experiment(panel, settings)


class TestRunExperiment:
    def test_structural_completeness(self, small_run):
        _, _, (report, store, fitted) = small_run
        ols_keys = [k for k in report.metrics if k[0] == "ols"]
        assert len(ols_keys) == 3
        for key in ols_keys:
            m = report.metrics[key]
            assert np.isfinite([m.mse, m.mape, m.r2]).all()
        assert len(report.metrics) == 6

    def test_records_confined_to_test_window(self, small_run):
        panel, settings, (report, store, fitted) = small_run
        test_start = panel.calendar[settings.first_test_index]
        for key in store.groups():
            rec = store.select(*key)
            assert rec.times.astype("datetime64[D]").min() >= test_start

    def test_determinism(self, small_run):
        panel, settings, (report, store, fitted) = small_run
        report2, store2, _ = run_experiment(panel, settings)
        for key in store.groups():
            a, b = store.select(*key), store2.select(*key)
            assert (a.forecast == b.forecast).all()
            assert (a.actual == b.actual).all()
        for key, m in report.metrics.items():
            assert report2.metrics[key] == m

    def test_dm_pairs_present(self, small_run):
        _, _, (report, store, fitted) = small_run
        groups = {d.group for d in report.dm}
        assert "universal" in groups
        assert "single_vs_universal" in groups
        assert "universal_vs_augmented" in groups

    def test_fitted_models_and_cells(self, small_run):
        _, _, (report, store, fitted) = small_run
        assert "ols_universal_h390_s0" in fitted
        single = fitted["ols_single_h390_s0"]
        assert isinstance(single, dict) and len(single) == 3
        assert all(c.status == "ok" for c in report.cells)

    def test_failed_cell_recorded_not_fatal(self):
        panel = generate_synthetic_panel(SyntheticSpec(
            n_tickers=2, n_days=530, common_factor_loading=0.5, rng_seed=4))
        # 22 lookback days leave the training window empty for ols at h=390
        settings = RunSettings(horizons=(390,), models=("ols", "har"),
                               schemes=("universal",), first_test_index=275,
                               n_years=1, seed=0, lookback_days=260)
        report, store, fitted = run_experiment(panel, settings)
        statuses = {c.model: c.status for c in report.cells}
        assert statuses["ols"] == "failed"

    def test_daily_only_models_skipped_at_intraday_h(self):
        panel = generate_synthetic_panel(SyntheticSpec(
            n_tickers=2, n_days=540, common_factor_loading=0.5, rng_seed=5))
        settings = RunSettings(horizons=(65,), models=("shar",),
                               schemes=("universal",), first_test_index=280,
                               n_years=1, seed=0)
        report, store, fitted = run_experiment(panel, settings)
        assert report.cells[0].status == "skipped"

    def test_unknown_model_rejected_upfront(self):
        with pytest.raises(ValueError, match="unknown model"):
            RunSettings(horizons=(390,), models=("nonsense",),
                        schemes=("universal",), first_test_index=300)

    def test_store_round_trip(self, small_run, tmp_path):
        _, _, (report, store, fitted) = small_run
        path = tmp_path / "records.csv"
        store.export(path)
        loaded = RecordStore.load(path)
        assert loaded.groups() == store.groups()
        for key in store.groups():
            a, b = store.select(*key), loaded.select(*key)
            assert (a.forecast == b.forecast).all()
            assert (a.times == b.times).all()

    def test_parallel_jobs_identical(self):
        panel = generate_synthetic_panel(SyntheticSpec(
            n_tickers=2, n_days=530, common_factor_loading=0.5, rng_seed=6))
        settings = RunSettings(horizons=(390,), models=("har", "ols"),
                               schemes=("universal", "augmented"),
                               first_test_index=275, n_years=1, seed=9)
        r1, s1, _ = run_experiment(panel, settings, jobs=1)
        r2, s2, _ = run_experiment(panel, settings, jobs=2)
        assert s1.groups() == s2.groups()
        for key in s1.groups():
            assert (s1.select(*key).forecast == s2.select(*key).forecast).all()
        assert r1.metrics == r2.metrics
