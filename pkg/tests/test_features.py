import math

import numpy as np
import pytest

from intravol.features import (
    SchemeSpec,
    build_har_features,
    build_harq_features,
    build_intraday2daily_features,
    build_lag_features,
    build_shar_features,
    export_matrix,
    import_matrix,
    normalize,
)
from intravol.marketdata import MinutePanel, SyntheticSpec, generate_synthetic_panel
from intravol.rvcore import (
    ZERO_SUM_FLOOR,
    daily_auxiliaries,
    har_aggregates,
    market_rv,
    realized_volatility,
    rv_grid,
)
from tests.conftest import make_matrix

UNI = SchemeSpec("universal")
AUG = SchemeSpec("augmented")


@pytest.fixture(scope="module")
def ctx():
    panel = generate_synthetic_panel(SyntheticSpec(
        n_tickers=3, n_days=60, common_factor_loading=0.6, rng_seed=1))
    data = {
        "panel": panel,
        "rv30": realized_volatility(panel, 30),
        "rv65": realized_volatility(panel, 65),
        "rvd": realized_volatility(panel, 390),
        "aux": daily_auxiliaries(panel),
    }
    data["mkt30"] = market_rv(data["rv30"])
    data["mkt65"] = market_rv(data["rv65"])
    data["mktd"] = market_rv(data["rvd"])
    return data


class TestLagFeatures:
    def test_universal_273_columns(self, ctx):
        m = build_lag_features(ctx["rv30"], None, ctx["panel"].calendar, 30, UNI)
        assert m.n_columns == 273
        assert m.columns[0] == "rv_lag_1" and m.columns[-1] == "rv_lag_273"
        m.assert_no_lookahead()

    def test_augmented_doubles_columns(self, ctx):
        m = build_lag_features(ctx["rv30"], ctx["mkt30"], ctx["panel"].calendar, 30, AUG)
        assert m.n_columns == 546
        assert m.columns[273] == "mkt_lag_1"

    def test_daily_has_21_columns(self, ctx):
        m = build_lag_features(ctx["rvd"], None, ctx["panel"].calendar, 390, UNI)
        assert m.n_columns == 21

    def test_constant_series_rows_equal_target(self):
        panel = generate_synthetic_panel(SyntheticSpec(
            n_tickers=1, n_days=30, common_factor_loading=0.0, rng_seed=2))
        rvs = realized_volatility(panel, 390)
        const = {"T": type(rvs["SYN000"])(
            ticker="T", horizon=390, times=np.array(rvs["SYN000"].times),
            values=np.full(len(rvs["SYN000"]), -4.0),
            floored=np.zeros(len(rvs["SYN000"]), bool))}
        m = build_lag_features(const, None, panel.calendar, 390,
                               SchemeSpec("single", ticker="T"))
        assert (m.X == -4.0).all()
        assert (m.y == -4.0).all()

    def test_lag_values_match_series(self, ctx):
        m = build_lag_features(ctx["rv30"], None, ctx["panel"].calendar, 30,
                               SchemeSpec("single", ticker="SYN000"))
        grid = rv_grid(ctx["rv30"]["SYN000"], ctx["panel"].calendar)[0].reshape(-1)
        row = 5
        g = 273 + row          # row 5 targets flattened grid position 278
        assert m.y[row] == grid[g]
        assert (m.X[row] == grid[g - 1:g - 274:-1]).all()

    def test_scheme_algebra(self, ctx):
        uni = build_lag_features(ctx["rv30"], None, ctx["panel"].calendar, 30, UNI)
        aug = build_lag_features(ctx["rv30"], ctx["mkt30"], ctx["panel"].calendar, 30, AUG)
        single = build_lag_features(ctx["rv30"], None, ctx["panel"].calendar, 30,
                                    SchemeSpec("single", ticker="SYN001"))
        sel = uni.tickers == "SYN001"
        assert (uni.X[sel] == single.X).all()
        assert (uni.y[sel] == single.y).all()
        restricted = aug.select_columns(uni.columns)
        assert restricted.columns == uni.columns
        assert (restricted.X == uni.X).all()
        assert (restricted.times == uni.times).all()


class TestHarFeatures:
    def test_daily_is_plain_har(self, ctx):
        m = build_har_features(ctx["rvd"], None, None, ctx["panel"].calendar, 390, UNI)
        assert m.columns == ("rv_d", "rv_w", "rv_m")

    def test_intraday_adds_diurnal(self, ctx):
        m = build_har_features(ctx["rvd"], ctx["rv65"], None, ctx["panel"].calendar,
                               65, SchemeSpec("single", ticker="SYN000"))
        assert m.columns == ("diurnal", "rv_d", "rv_w", "rv_m")

    def test_augmented_adds_three_market_columns(self, ctx):
        m = build_har_features(ctx["rvd"], ctx["rv65"], ctx["mktd"],
                               ctx["panel"].calendar, 65, AUG)
        assert m.n_columns == 7
        assert m.columns[-3:] == ("mkt_rv_d", "mkt_rv_w", "mkt_rv_m")

    def test_hard_at_daily_identical_to_har(self, ctx):
        with_flag = build_har_features(ctx["rvd"], None, None, ctx["panel"].calendar,
                                       390, UNI, with_diurnal=True)
        without = build_har_features(ctx["rvd"], None, None, ctx["panel"].calendar,
                                     390, UNI, with_diurnal=False)
        assert with_flag.columns == without.columns
        assert (with_flag.X == without.X).all()
        assert (with_flag.y == without.y).all()

    def test_aggregates_match_rvcore_oracle(self, ctx):
        m = build_har_features(ctx["rvd"], None, None, ctx["panel"].calendar, 390,
                               SchemeSpec("single", ticker="SYN002"))
        series = ctx["rvd"]["SYN002"]
        for row in (0, 7, len(m.y) - 1):
            day = m.times[row].astype("datetime64[D]")
            rv_d, rv_w, rv_m = har_aggregates(series, day)
            assert m.X[row, 0] == pytest.approx(rv_d, abs=1e-14)
            assert m.X[row, 1] == pytest.approx(rv_w, abs=1e-14)
            assert m.X[row, 2] == pytest.approx(rv_m, abs=1e-14)


class TestSharFeatures:
    def test_columns_and_oracle(self, ctx):
        m = build_shar_features(ctx["rvd"], ctx["aux"], None, ctx["panel"].calendar,
                                SchemeSpec("single", ticker="SYN000"))
        assert m.columns == ("semi_rv_pos", "semi_rv_neg", "rv_w", "rv_m")
        cal = list(ctx["panel"].calendar)
        aux = ctx["aux"]
        for row in (0, 5):
            di = cal.index(m.times[row].astype("datetime64[D]"))
            assert m.X[row, 0] == aux.semi_pos[0, di - 1]
            assert m.X[row, 1] == aux.semi_neg[0, di - 1]

    def test_symmetric_returns_balance(self):
        rng = np.random.default_rng(3)
        half = rng.standard_normal((1, 30, 195)) * 1e-3
        returns = np.concatenate([half, -half], axis=2)
        panel = MinutePanel(tickers=("T",), calendar=np.array(
            generate_synthetic_panel(SyntheticSpec(1, 30, 0.0, rng_seed=0)).calendar),
            returns=returns, observed=np.ones(returns.shape, bool))
        aux = daily_auxiliaries(panel)
        assert np.allclose(aux.semi_pos, aux.semi_neg, atol=1e-12)
        daily = realized_volatility(panel, 390)
        m = build_shar_features(daily, aux, None, panel.calendar,
                                SchemeSpec("single", ticker="T"))
        assert np.allclose(m.X[:, 0], m.X[:, 1], atol=1e-12)

    def test_positive_only_day_carries_floor(self):
        rng = np.random.default_rng(4)
        returns = np.abs(rng.standard_normal((1, 30, 390))) * 1e-3
        panel = MinutePanel(tickers=("T",), calendar=np.array(
            generate_synthetic_panel(SyntheticSpec(1, 30, 0.0, rng_seed=0)).calendar),
            returns=returns, observed=np.ones(returns.shape, bool))
        aux = daily_auxiliaries(panel)
        daily = realized_volatility(panel, 390)
        m = build_shar_features(daily, aux, None, panel.calendar,
                                SchemeSpec("single", ticker="T"))
        assert np.allclose(m.X[:, 1], 0.5 * math.log(ZERO_SUM_FLOOR))


class TestHarqFeatures:
    def test_interaction_oracle(self, ctx):
        m = build_harq_features(ctx["rvd"], ctx["aux"], None, ctx["panel"].calendar,
                                SchemeSpec("single", ticker="SYN001"))
        assert m.columns == ("rv_d", "rq_x_rv_d", "rv_w", "rv_m")
        cal = list(ctx["panel"].calendar)
        for row in range(0, len(m.y), 7):
            di = cal.index(m.times[row].astype("datetime64[D]"))
            rq = ctx["aux"].quarticity[1, di - 1]
            assert m.X[row, 1] == pytest.approx(math.sqrt(rq) * m.X[row, 0], rel=1e-12)

    def test_doubled_returns_scaling(self, ctx):
        panel = ctx["panel"]
        doubled = MinutePanel(tickers=panel.tickers, calendar=np.array(panel.calendar),
                              returns=panel.returns * 2.0,
                              observed=np.array(panel.observed))
        aux2 = daily_auxiliaries(doubled)
        daily2 = realized_volatility(doubled, 390)
        base = build_harq_features(ctx["rvd"], ctx["aux"], None, panel.calendar,
                                   SchemeSpec("single", ticker="SYN000"))
        scaled = build_harq_features(daily2, aux2, None, panel.calendar,
                                     SchemeSpec("single", ticker="SYN000"))
        # doubling returns multiplies RQ by 16, sqrt(RQ) by 4, and shifts the
        # lagged log RV by log 2
        base_rvd = base.X[:, 0]
        base_sqrt_rq = base.X[:, 1] / base_rvd
        expected = 4.0 * base_sqrt_rq * (base_rvd + math.log(2.0))
        assert np.allclose(scaled.X[:, 1], expected, rtol=1e-10)

    def test_zero_quarticity_day(self):
        # a day of all-zero returns has RQ = 0, so rows whose lag day it is
        # carry an exactly-zero interaction entry
        returns = np.random.default_rng(5).standard_normal((1, 25, 390)) * 1e-3
        returns[0, 21] = 0.0
        panel = MinutePanel(tickers=("T",), calendar=np.array(
            generate_synthetic_panel(SyntheticSpec(1, 25, 0.0, rng_seed=0)).calendar),
            returns=returns, observed=np.ones(returns.shape, bool))
        aux = daily_auxiliaries(panel)
        assert aux.quarticity[0, 21] == 0.0
        daily = realized_volatility(panel, 390)
        m = build_harq_features(daily, aux, None, panel.calendar,
                                SchemeSpec("single", ticker="T"))
        days = [list(panel.calendar).index(d)
                for d in m.times.astype("datetime64[D]")]
        row = days.index(22)        # lag day 21 has RQ = 0
        assert m.X[row, 1] == 0.0
        lag_rq = aux.quarticity[0][np.array(days) - 1]
        assert np.allclose(m.X[:, 1], np.sqrt(lag_rq) * m.X[:, 0], rtol=1e-12)


class TestIntraday2Daily:
    def test_column_counts(self, ctx):
        m30 = build_intraday2daily_features(ctx["rv30"], ctx["rvd"], None, None,
                                            ctx["panel"].calendar, 30, UNI)
        assert m30.n_columns == 33
        assert m30.columns[0] == "intra_0930_1000"
        assert m30.columns[12] == "intra_1530_1600"
        assert m30.columns[13] == "daily_lag_1"

        mda = build_intraday2daily_features(ctx["rvd"], ctx["rvd"], None, None,
                                            ctx["panel"].calendar, 390, UNI)
        assert mda.n_columns == 21

        m65 = build_intraday2daily_features(ctx["rv65"], ctx["rvd"], ctx["mkt65"],
                                            ctx["mktd"], ctx["panel"].calendar, 65, AUG)
        assert m65.n_columns == 52

    def test_values_align(self, ctx):
        m = build_intraday2daily_features(ctx["rv30"], ctx["rvd"], None, None,
                                          ctx["panel"].calendar, 30,
                                          SchemeSpec("single", ticker="SYN000"))
        igrid = rv_grid(ctx["rv30"]["SYN000"], ctx["panel"].calendar)[0]
        dgrid = rv_grid(ctx["rvd"]["SYN000"], ctx["panel"].calendar)[0].reshape(-1)
        cal = list(ctx["panel"].calendar)
        row = 3
        di = cal.index(m.times[row].astype("datetime64[D]"))
        assert (m.X[row, :13] == igrid[di - 1]).all()
        assert m.y[row] == dgrid[di]
        assert (m.X[row, 13:] == dgrid[di - 2:di - 22:-1]).all()


class TestNormalize:
    def test_two_point_standardization(self):
        m = make_matrix(np.array([[1.0], [3.0]]), np.array([0.0, 1.0]))
        out = normalize(m, np.array([0, 1]))
        assert np.allclose(out.X.ravel(), [-1.0, 1.0])

    def test_constant_column_dropped(self, capsys):
        X = np.column_stack([np.ones(10), np.arange(10.0)])
        m = make_matrix(X, np.zeros(10), columns=("const", "ramp"))
        out = normalize(m, np.arange(10))
        assert out.columns == ("ramp",)
        assert out.norm.dropped == ("const",)
        assert "dropped degenerate columns" in capsys.readouterr().err

    def test_moments_after_normalization(self):
        rng = np.random.default_rng(6)
        m = make_matrix(rng.standard_normal((50, 4)) * 3 + 1, rng.standard_normal(50))
        fit = np.arange(30)
        out = normalize(m, fit)
        assert np.abs(out.X[:30].mean(axis=0)).max() < 1e-12
        assert np.abs(out.X[:30].std(axis=0) - 1).max() < 1e-12

    def test_all_degenerate_errors(self):
        m = make_matrix(np.ones((5, 2)), np.zeros(5))
        with pytest.raises(ValueError, match="degenerate"):
            normalize(m, np.arange(5))


class TestExportImport:
    def test_round_trip(self, ctx, tmp_path):
        m = build_har_features(ctx["rvd"], None, None, ctx["panel"].calendar, 390, UNI)
        path = tmp_path / "matrix.csv"
        export_matrix(m, path)
        loaded = import_matrix(path)
        assert loaded.columns == m.columns
        assert (loaded.X == m.X).all()
        assert (loaded.y == m.y).all()
        assert (loaded.times == m.times).all()
        assert (loaded.tickers == m.tickers).all()
