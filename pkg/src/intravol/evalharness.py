"""Rolling train/validation/test protocol, forecast metrics, and DM tests.

Splits expand the training window annually: validation is the 250 trading
days before the first test day, the test window is the next 251 days, and
consecutive splits advance by one 251-day test year. Hyperparameter-free
linear models merge train+validation for fitting; tuned models keep the
validation window for penalty selection or early stopping.

Metrics follow the average-of-per-stock-averages convention, and model pairs
are compared with a modified Diebold-Mariano test on the cross-sectional
average loss differential with a Newey-West long-run variance.
"""

from __future__ import annotations

import hashlib
import math
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import features as F
from . import linmodels as lin
from . import mlmodels as ml
from .marketdata import MinutePanel, winsorize_panel
from .rvcore import daily_auxiliaries, market_rv, realized_volatility
from .session import SESSION_MINUTES, fmt, format_timestamp, parse_timestamp

VALID_DAYS = 250
TEST_DAYS = 251


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class RollingSplit:
    """Inclusive day-index ranges into a trading calendar."""

    train: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]

    def __post_init__(self):
        t0, t1 = self.train
        v0, v1 = self.valid
        s0, s1 = self.test
        if not (t0 <= t1 < v0 <= v1 < s0 <= s1):
            raise ValueError("split ranges must be chronological and non-overlapping")
        if v0 != t1 + 1 or s0 != v1 + 1:
            raise ValueError("split ranges must be contiguous")


def make_annual_splits(calendar, first_test_index: int, n_years: int) -> list[RollingSplit]:
    """Expanding-train annual splits anchored at the calendar start."""
    n = len(calendar)
    ft = int(first_test_index)
    if n_years < 1:
        raise ValueError("n_years must be >= 1")
    required = ft + TEST_DAYS + TEST_DAYS * (n_years - 1)
    if ft < VALID_DAYS + 2:
        raise ValueError(
            f"first_test_index {ft} leaves no training days: need at least "
            f"{VALID_DAYS + 2} prior days, have {ft}"
        )
    if required > n:
        raise ValueError(
            f"calendar too short: {n_years} test year(s) from index {ft} need "
            f"{required} days, calendar has {n}"
        )
    splits = []
    for k in range(n_years):
        s0 = ft + TEST_DAYS * k
        splits.append(RollingSplit(
            train=(0, s0 - VALID_DAYS - 1),
            valid=(s0 - VALID_DAYS, s0 - 1),
            test=(s0, s0 + TEST_DAYS - 1),
        ))
    return splits


# ---------------------------------------------------------------------------
# forecast records

@dataclass(frozen=True)
class ForecastRecord:
    model: str
    scheme: str
    horizon: int
    ticker: str
    time: np.datetime64
    forecast: float
    actual: float


@dataclass(frozen=True)
class Records:
    """Columnar view of forecast records for one (model, scheme, horizon)."""

    tickers: np.ndarray
    times: np.ndarray
    forecast: np.ndarray
    actual: np.ndarray

    def __len__(self) -> int:
        return len(self.tickers)


class RecordStore:
    """Append-only forecast record store with deterministic final ordering."""

    COLUMNS = "model,scheme,h,ticker,timestamp,forecast,actual"

    def __init__(self):
        self._batches = []

    def append(self, model: str, scheme: str, horizon: int,
               tickers, times, forecast, actual) -> None:
        n = len(tickers)
        if not (len(times) == len(forecast) == len(actual) == n):
            raise ValueError("record batch arrays must share a length")
        if not np.isfinite(actual).all():
            raise ValueError("forecasts may only be scored against realized values")
        self._batches.append((model, scheme, int(horizon),
                              np.asarray(tickers), np.asarray(times),
                              np.asarray(forecast, dtype=float),
                              np.asarray(actual, dtype=float)))

    def groups(self) -> list[tuple[str, str, int]]:
        seen = []
        for b in self._batches:
            key = (b[0], b[1], b[2])
            if key not in seen:
                seen.append(key)
        return sorted(seen)

    def select(self, model: str, scheme: str, horizon: int) -> Records:
        parts = [b for b in self._batches
                 if (b[0], b[1], b[2]) == (model, scheme, int(horizon))]
        if not parts:
            raise KeyError(f"no records for {(model, scheme, horizon)}")
        tickers = np.concatenate([b[3] for b in parts])
        times = np.concatenate([b[4] for b in parts])
        fc = np.concatenate([b[5] for b in parts])
        ac = np.concatenate([b[6] for b in parts])
        order = np.lexsort((times, tickers))
        return Records(tickers=tickers[order], times=times[order],
                       forecast=fc[order], actual=ac[order])

    def iter_records(self):
        for model, scheme, horizon in self.groups():
            rec = self.select(model, scheme, horizon)
            for i in range(len(rec)):
                yield ForecastRecord(model, scheme, horizon, str(rec.tickers[i]),
                                     rec.times[i], float(rec.forecast[i]),
                                     float(rec.actual[i]))

    def export(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.COLUMNS + "\n")
            for model, scheme, horizon in self.groups():
                rec = self.select(model, scheme, horizon)
                for i in range(len(rec)):
                    fh.write(f"{model},{scheme},{horizon},{rec.tickers[i]},"
                             f"{format_timestamp(rec.times[i])},"
                             f"{fmt(rec.forecast[i])},{fmt(rec.actual[i])}\n")

    @classmethod
    def load(cls, path) -> "RecordStore":
        store = cls()
        rows: dict[tuple, list] = {}
        with open(path) as fh:
            header = fh.readline().strip()
            if header != cls.COLUMNS:
                raise ValueError(f"{path}: unexpected header {header!r}")
            for line in fh:
                model, scheme, h, ticker, ts, fc, ac = line.rstrip("\n").split(",")
                rows.setdefault((model, scheme, int(h)), []).append(
                    (ticker, parse_timestamp(ts), float(fc), float(ac)))
        for (model, scheme, h), entries in rows.items():
            store.append(
                model, scheme, h,
                np.array([e[0] for e in entries]),
                np.array([e[1] for e in entries], dtype="datetime64[m]"),
                np.array([e[2] for e in entries]),
                np.array([e[3] for e in entries]),
            )
        return store


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class Metrics:
    mse: float
    mape: float
    r2: float
    n_stocks: int
    mape_excluded: int = 0
    r2_excluded: int = 0


def metrics(records: Records) -> Metrics:
    """Per-stock averages of squared error, |error/actual|, and 1 - SSE/SST,
    averaged equally across stocks. Stocks need at least 2 records."""
    tickers = np.unique(records.tickers)
    mses, mapes, r2s = [], [], []
    mape_excluded = 0
    r2_excluded = 0
    for t in tickers:
        sel = records.tickers == t
        if sel.sum() < 2:
            raise ValueError(f"stock {t}: need >= 2 test records, have {int(sel.sum())}")
        err = records.forecast[sel] - records.actual[sel]
        actual = records.actual[sel]
        mses.append(float(np.mean(err ** 2)))
        nz = actual != 0.0
        mape_excluded += int((~nz).sum())
        if nz.any():
            mapes.append(float(np.mean(np.abs(err[nz] / actual[nz]))))
        sst = float(np.sum((actual - actual.mean()) ** 2))
        sse = float(np.sum(err ** 2))
        if sst == 0.0:
            if sse == 0.0:
                r2s.append(1.0)
            else:
                r2_excluded += 1
        else:
            r2s.append(1.0 - sse / sst)
    return Metrics(
        mse=float(np.mean(mses)), mape=float(np.mean(mapes)) if mapes else float("nan"),
        r2=float(np.mean(r2s)) if r2s else float("nan"),
        n_stocks=len(tickers), mape_excluded=mape_excluded, r2_excluded=r2_excluded,
    )


def monthly_mse(records: Records) -> tuple[np.ndarray, np.ndarray]:
    """Cross-stock average of per-stock MSE, month by month."""
    months = records.times.astype("datetime64[M]")
    uniq = np.unique(months)
    out = np.empty(len(uniq))
    for i, m in enumerate(uniq):
        sel = months == m
        per_stock = []
        for t in np.unique(records.tickers[sel]):
            tsel = sel & (records.tickers == t)
            err = records.forecast[tsel] - records.actual[tsel]
            per_stock.append(float(np.mean(err ** 2)))
        out[i] = float(np.mean(per_stock))
    return uniq, out


# ---------------------------------------------------------------------------
# Diebold-Mariano

@dataclass(frozen=True)
class DMResult:
    statistic: float
    p_value: float
    degenerate: bool
    bandwidth: int
    n_times: int


def _normal_sf(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def newey_west_lrv(d: np.ndarray, bandwidth: int) -> float:
    """Bartlett-kernel long-run variance of a series (not divided by T)."""
    T = len(d)
    dc = d - d.mean()
    lrv = float(dc @ dc) / T
    for k in range(1, min(bandwidth, T - 1) + 1):
        gamma = float(dc[k:] @ dc[:-k]) / T
        lrv += 2.0 * (1.0 - k / (bandwidth + 1.0)) * gamma
    return lrv


def dm_test(records_a: Records, records_b: Records, loss: str = "squared") -> DMResult:
    """Modified DM test on cross-sectional average loss differentials.

    d_t averages L(e_a) - L(e_b) over stocks at each timestamp, so a positive
    statistic means the second model outperforms the first. The variance of
    the mean differential uses a Newey-West estimate with bandwidth
    floor(4*(T/100)^(2/9)) and a two-sided normal p-value.
    """
    if loss == "squared":
        lfun = np.square
    elif loss == "absolute":
        lfun = np.abs
    else:
        raise ValueError("loss must be 'squared' or 'absolute'")
    if len(records_a) != len(records_b) or \
            not (records_a.tickers == records_b.tickers).all() or \
            not (records_a.times == records_b.times).all():
        raise ValueError("record sets must cover identical (ticker, timestamp) pairs")

    la = lfun(records_a.forecast - records_a.actual)
    lb = lfun(records_b.forecast - records_b.actual)
    diff = la - lb
    times, inverse = np.unique(records_a.times, return_inverse=True)
    counts = np.bincount(inverse)
    d = np.bincount(inverse, weights=diff) / counts
    T = len(d)
    if T < 2:
        raise ValueError("need at least 2 timestamps for a DM test")

    if (d == 0.0).all():
        return DMResult(statistic=0.0, p_value=1.0, degenerate=True,
                        bandwidth=0, n_times=T)
    bandwidth = int(math.floor(4.0 * (T / 100.0) ** (2.0 / 9.0)))
    lrv = newey_west_lrv(d, bandwidth)
    if lrv <= 0.0:
        raise ValueError("zero long-run variance with nonzero mean differential")
    stat = float(d.mean() / math.sqrt(lrv / T))
    return DMResult(statistic=stat, p_value=2.0 * _normal_sf(abs(stat)),
                    degenerate=False, bandwidth=bandwidth, n_times=T)


# ---------------------------------------------------------------------------
# experiment orchestration

MODEL_LAYOUTS = {
    "har": ("har", "ols_merged"),
    "har-d": ("har-d", "ols_merged"),
    "shar": ("shar", "ols_merged"),
    "harq": ("harq", "ols_merged"),
    "ols": ("lag", "ols_merged"),
    "lasso": ("lag", "lasso"),
    "gbt": ("lag", "gbt"),
    "mlp": ("lag", "mlp"),
    "lstm": ("lag", "lstm"),
    "i2d-ols": ("i2d", "ols_merged"),
    "i2d-lasso": ("i2d", "lasso"),
    "i2d-gbt": ("i2d", "gbt"),
    "i2d-mlp": ("i2d", "mlp"),
}
DAILY_ONLY_MODELS = {"shar", "harq"}
SCHEME_NAMES = ("single", "universal", "augmented")


@dataclass(frozen=True)
class WinsorizeSettings:
    enabled: bool = True
    lower: float = 0.005
    upper: float = 0.995
    fit: str = "train"           # 'train' | 'full'

    def __post_init__(self):
        if self.fit not in ("train", "full"):
            raise ValueError("winsorize fit must be 'train' or 'full'")


@dataclass(frozen=True)
class RunSettings:
    horizons: tuple[int, ...]
    models: tuple[str, ...]
    schemes: tuple[str, ...]
    first_test_index: int
    n_years: int = 1
    lookback_days: int = 21
    seed: int = 0
    winsorize: WinsorizeSettings = field(default_factory=WinsorizeSettings)
    gbt_cfg: ml.TrainConfig = field(default_factory=ml.TrainConfig)
    mlp_cfg: ml.TrainConfig = field(default_factory=ml.TrainConfig)
    lstm_cfg: ml.TrainConfig = field(default_factory=ml.TrainConfig)
    mlp_widths: tuple[int, ...] = (64, 32, 16)
    mlp_batch_norm: bool = True
    lstm_hidden: int = 32
    lstm_layers: int = 2
    market_scale: str = "log"
    lasso_grid_size: int = 50

    def __post_init__(self):
        if not (self.horizons and self.models and self.schemes):
            raise ValueError("need at least one horizon, model, and scheme")
        for m in self.models:
            if m not in MODEL_LAYOUTS:
                raise ValueError(f"unknown model {m!r}; choose from {sorted(MODEL_LAYOUTS)}")
        for s in self.schemes:
            if s not in SCHEME_NAMES:
                raise ValueError(f"unknown scheme {s!r}; choose from {SCHEME_NAMES}")
        for h in self.horizons:
            if SESSION_MINUTES % h != 0:
                raise ValueError(f"horizon {h} does not divide the session")


@dataclass
class CellResult:
    model: str
    scheme: str
    horizon: int
    split_index: int
    status: str                  # 'ok' | 'skipped' | 'failed'
    error: str = ""
    seconds: float = 0.0
    n_train: int = 0
    n_test: int = 0


@dataclass
class DMEntry:
    horizon: int
    group: str                   # scheme name or cross-scheme label
    model_a: str
    model_b: str
    statistic: float
    p_value: float
    degenerate: bool


@dataclass
class EvaluationReport:
    metrics: dict
    monthly: dict
    dm: list
    cells: list

    def metric_cells(self) -> int:
        return 3 * len(self.metrics)


def cell_seed(master: int, split_i: int, horizon: int, scheme: str, model: str,
              ticker: str = "") -> int:
    key = f"{master}|{split_i}|{horizon}|{scheme}|{model}|{ticker}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") % (2 ** 63)


class _SplitContext:
    """Lazy per-split caches: winsorized panel, RV series, raw matrices."""

    def __init__(self, panel: MinutePanel, settings: RunSettings, split: RollingSplit):
        self.settings = settings
        self.split = split
        if settings.winsorize.enabled:
            if settings.winsorize.fit == "train":
                window = (panel.calendar[split.train[0]], panel.calendar[split.train[1]])
            else:
                window = None
            self.panel = winsorize_panel(panel, settings.winsorize.lower,
                                         settings.winsorize.upper, fit_window=window)
        else:
            self.panel = panel
        self.calendar = self.panel.calendar
        self._rv = {}
        self._market = {}
        self._aux = None
        self._matrices = {}

    def rv(self, horizon: int):
        if horizon not in self._rv:
            self._rv[horizon] = realized_volatility(self.panel, horizon)
        return self._rv[horizon]

    def market(self, horizon: int):
        if horizon not in self._market:
            self._market[horizon] = market_rv(self.rv(horizon),
                                              scale=self.settings.market_scale)
        return self._market[horizon]

    def aux(self):
        if self._aux is None:
            self._aux = daily_auxiliaries(self.panel)
        return self._aux

    def matrix(self, horizon: int, layout: str, with_market: bool) -> F.FeatureMatrix:
        key = (horizon, layout, with_market)
        if key in self._matrices:
            return self._matrices[key]
        scheme = F.SchemeSpec("augmented" if with_market else "universal")
        lb = self.settings.lookback_days
        if layout == "lag":
            m = F.build_lag_features(self.rv(horizon), self.market(horizon)
                                     if with_market else None,
                                     self.calendar, horizon, scheme, lookback_days=lb)
        elif layout in ("har", "har-d"):
            m = F.build_har_features(
                self.rv(SESSION_MINUTES),
                self.rv(horizon) if horizon < SESSION_MINUTES else None,
                self.market(SESSION_MINUTES) if with_market else None,
                self.calendar, horizon, scheme,
                with_diurnal=(layout == "har-d"), lookback_days=lb)
        elif layout == "shar":
            m = F.build_shar_features(self.rv(SESSION_MINUTES), self.aux(),
                                      self.market(SESSION_MINUTES) if with_market else None,
                                      self.calendar, scheme)
        elif layout == "harq":
            m = F.build_harq_features(self.rv(SESSION_MINUTES), self.aux(),
                                      self.market(SESSION_MINUTES) if with_market else None,
                                      self.calendar, scheme)
        elif layout == "i2d":
            m = F.build_intraday2daily_features(
                self.rv(horizon), self.rv(SESSION_MINUTES),
                self.market(horizon) if with_market else None,
                self.market(SESSION_MINUTES) if with_market else None,
                self.calendar, horizon, scheme)
        else:
            raise ValueError(f"unknown layout {layout!r}")
        m.assert_no_lookahead()
        self._matrices[key] = m
        return m

    def day_masks(self, matrix: F.FeatureMatrix):
        days = matrix.days()
        cal = self.calendar
        sp = self.split
        train = (days >= cal[sp.train[0]]) & (days <= cal[sp.train[1]])
        valid = (days >= cal[sp.valid[0]]) & (days <= cal[sp.valid[1]])
        test = (days >= cal[sp.test[0]]) & (days <= cal[sp.test[1]])
        return train, valid, test


def _fit_predict(ctx: _SplitContext, matrix: F.FeatureMatrix, estimator: str,
                 seed: int, settings: RunSettings):
    """Normalize, fit one estimator, and forecast the test rows."""
    train_mask, valid_mask, test_mask = ctx.day_masks(matrix)
    if not test_mask.any():
        raise ValueError("no test rows after history filtering")
    fit_mask = train_mask | valid_mask if estimator == "ols_merged" else train_mask
    if not fit_mask.any():
        raise ValueError("no training rows after history filtering")

    norm = F.normalize(matrix, np.flatnonzero(fit_mask))
    train_m = norm.subset(train_mask)
    valid_m = norm.subset(valid_mask)
    test_m = norm.subset(test_mask)

    if estimator == "ols_merged":
        model = lin.fit_ols(norm.subset(fit_mask))
        pred = lin.predict_linear(model, test_m)
    elif estimator == "lasso":
        if valid_m.n_rows == 0:
            raise ValueError("validation window has no rows; penalty selection undefined")
        grid = lin.lambda_grid(lin.lasso_lambda_max(train_m),
                               size=settings.lasso_grid_size)
        history = []
        best = (np.inf, None)
        for lam in grid:
            cand = lin.fit_lasso(train_m, lam,
                                 warm_start=lin.path_warm_start(lam, history))
            history.append((lam, cand.coef))
            vmse = float(np.mean((lin.predict_linear(cand, valid_m) - valid_m.y) ** 2))
            if vmse < best[0]:
                best = (vmse, cand)
        model = best[1]
        pred = lin.predict_linear(model, test_m)
    elif estimator == "gbt":
        cfg = replace(settings.gbt_cfg, seed=seed)
        model = ml.fit_gbt(train_m, valid_m, cfg)
        pred = ml.predict(model, test_m)
    elif estimator == "mlp":
        cfg = replace(settings.mlp_cfg, seed=seed)
        model = ml.ensemble_fit(ml.fit_mlp, train_m, valid_m, cfg,
                                widths=settings.mlp_widths,
                                batch_norm=settings.mlp_batch_norm)
        pred = ml.predict(model, test_m)
    elif estimator == "lstm":
        cfg = replace(settings.lstm_cfg, seed=seed)
        model = ml.ensemble_fit(ml.fit_lstm, train_m, valid_m, cfg,
                                hidden=settings.lstm_hidden,
                                n_layers=settings.lstm_layers)
        pred = ml.predict(model, test_m)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return model, test_m, pred, int(fit_mask.sum())


def record_label(model_name: str, horizon: int) -> str:
    """Record/report label; intraday-to-daily models carry their feature
    frequency since their records always score daily targets."""
    if MODEL_LAYOUTS[model_name][0] == "i2d":
        return f"{model_name}-{horizon}m"
    return model_name


def _run_cell(ctx: _SplitContext, split_i: int, horizon: int, scheme_name: str,
              model_name: str, settings: RunSettings, store: RecordStore):
    layout, estimator = MODEL_LAYOUTS[model_name]
    target_h = SESSION_MINUTES if layout in ("shar", "harq", "i2d") else horizon
    label = record_label(model_name, horizon)
    with_market = scheme_name == "augmented"
    raw = ctx.matrix(horizon, layout, with_market)

    fitted = {}
    n_train = n_test = 0
    if scheme_name == "single":
        for ticker in sorted(set(raw.tickers)):
            sub = raw.subset(raw.tickers == ticker)
            seed = cell_seed(settings.seed, split_i, horizon, scheme_name,
                             model_name, ticker)
            model, test_m, pred, n_fit = _fit_predict(ctx, sub, estimator, seed, settings)
            fitted[ticker] = model
            n_train += n_fit
            n_test += test_m.n_rows
            store.append(label, scheme_name, target_h, test_m.tickers,
                         test_m.times, pred, test_m.y)
        result_model = fitted
    else:
        seed = cell_seed(settings.seed, split_i, horizon, scheme_name, model_name)
        model, test_m, pred, n_train = _fit_predict(ctx, raw, estimator, seed, settings)
        n_test = test_m.n_rows
        store.append(label, scheme_name, target_h, test_m.tickers,
                     test_m.times, pred, test_m.y)
        result_model = model
    return result_model, label, n_train, n_test


def _process_chunks(panel: MinutePanel, settings: RunSettings, splits,
                    chunk_list):
    """Run all model cells for a list of (split, horizon, scheme) chunks.

    Contexts (winsorized panel, RV series, matrices) are cached per split
    within one call, so a single worker pays the preparation cost once.
    """
    contexts = {}
    out = []
    for split_i, horizon, scheme_name in chunk_list:
        ctx = contexts.get(split_i)
        if ctx is None:
            ctx = contexts[split_i] = _SplitContext(panel, settings, splits[split_i])
        store = RecordStore()
        cells = []
        fitted = {}
        for model_name in settings.models:
            cell = CellResult(model_name, scheme_name, horizon, split_i, status="ok")
            if model_name in DAILY_ONLY_MODELS and horizon != SESSION_MINUTES:
                cell.status = "skipped"
                cell.error = "daily-only model at an intraday horizon"
                cells.append(cell)
                continue
            t0 = time.perf_counter()
            try:
                model, label, n_train, n_test = _run_cell(
                    ctx, split_i, horizon, scheme_name, model_name, settings, store)
                cell.n_train = n_train
                cell.n_test = n_test
                fitted[f"{label}_{scheme_name}_h{horizon}_s{split_i}"] = model
            except Exception as exc:       # cell failures never kill the run
                cell.status = "failed"
                cell.error = f"{type(exc).__name__}: {exc}"
                print(f"cell {model_name}/{scheme_name}/h{horizon} failed: "
                      f"{cell.error}", file=sys.stderr)
            cell.seconds = time.perf_counter() - t0
            cells.append(cell)
        out.append(((split_i, horizon, scheme_name), store._batches, cells, fitted))
    return out


def run_experiment(panel: MinutePanel, settings: RunSettings, jobs: int = 1):
    """Execute the full grid; returns (EvaluationReport, RecordStore, fitted).

    ``jobs > 1`` distributes (split, horizon, scheme) chunks over worker
    processes; results are identical to a sequential run because cell seeds
    derive from the grid position, not the execution order.
    """
    splits = make_annual_splits(panel.calendar, settings.first_test_index,
                                settings.n_years)
    chunks = [(si, h, sc)
              for si in range(len(splits))
              for h in settings.horizons
              for sc in settings.schemes]

    if jobs > 1 and len(chunks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        n_workers = min(jobs, len(chunks))
        buckets = [chunks[i::n_workers] for i in range(n_workers)]
        results = {}
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for part in pool.map(_process_chunks, [panel] * n_workers,
                                 [settings] * n_workers, [splits] * n_workers,
                                 buckets):
                for key, batches, cells, fitted in part:
                    results[key] = (batches, cells, fitted)
        ordered = [(key, *results[key]) for key in chunks]
    else:
        ordered = _process_chunks(panel, settings, splits, chunks)

    store = RecordStore()
    cells: list[CellResult] = []
    fitted: dict[str, object] = {}
    for _, batches, chunk_cells, chunk_fitted in ordered:
        store._batches.extend(batches)
        cells.extend(chunk_cells)
        fitted.update(chunk_fitted)

    report = evaluate_records(store)
    report.cells = cells
    return report, store, fitted


def evaluate_records(store: RecordStore) -> EvaluationReport:
    """Metrics, monthly MSE series, and all DM comparisons for a record store."""
    metric_map = {}
    monthly_map = {}
    for key in store.groups():
        rec = store.select(*key)
        metric_map[key] = metrics(rec)
        monthly_map[key] = monthly_mse(rec)

    dm_entries: list[DMEntry] = []
    groups = store.groups()
    horizons = sorted({k[2] for k in groups})
    for h in horizons:
        for scheme in SCHEME_NAMES:
            models = [k[0] for k in groups if k[1] == scheme and k[2] == h]
            for i, ma in enumerate(models):
                for mb in models[i + 1:]:
                    _try_dm(store, dm_entries, h, scheme, (ma, scheme), (mb, scheme))
        # same model across schemes, mirroring the cross-scheme comparison rows
        models_h = sorted({k[0] for k in groups if k[2] == h})
        for m in models_h:
            for sa, sb in (("single", "universal"), ("universal", "augmented")):
                if (m, sa, h) in groups and (m, sb, h) in groups:
                    _try_dm(store, dm_entries, h, f"{sa}_vs_{sb}", (m, sa), (m, sb))
    return EvaluationReport(metrics=metric_map, monthly=monthly_map,
                            dm=dm_entries, cells=[])


def _try_dm(store, entries, h, group, a, b):
    try:
        ra = store.select(a[0], a[1], h)
        rb = store.select(b[0], b[1], h)
        res = dm_test(ra, rb)
    except (ValueError, KeyError) as exc:
        print(f"dm skipped h={h} {a} vs {b}: {exc}", file=sys.stderr)
        return
    entries.append(DMEntry(horizon=h, group=group, model_a=a[0], model_b=b[0],
                           statistic=res.statistic, p_value=res.p_value,
                           degenerate=res.degenerate))
