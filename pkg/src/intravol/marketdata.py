"""Minute-bar ingestion, cleaning, and synthetic panel generation.

The central object is the :class:`MinutePanel`: per (ticker, day) a vector of
390 one-minute mid-price log returns on the fixed session grid, with a mask
for minutes where no return could be computed. Masked slots hold 0.0 and are
never imputed with nonzero values; downstream RV sums simply skip them.
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field

import numpy as np

from .session import (
    CLOSE_MINUTE,
    OPEN_MINUTE,
    SESSION_MINUTES,
    trading_days,
)

_HALF_DAY_CUTOFF = 13 * 60      # no quotes after 13:00 on a day => half day


class BarFileError(ValueError):
    """Raised for malformed minute-bar files (with the offending line number)."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MinutePanel:
    """Session-aligned minute log returns for a set of tickers.

    returns:  (n_tickers, n_days, 390) float64; masked slots are exactly 0.0
    observed: same shape, True where a return was computable
    """

    tickers: tuple[str, ...]
    calendar: np.ndarray          # datetime64[D], strictly increasing
    returns: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        nt, nd = len(self.tickers), len(self.calendar)
        if self.returns.shape != (nt, nd, SESSION_MINUTES):
            raise ValueError(f"returns shape {self.returns.shape} != ({nt}, {nd}, {SESSION_MINUTES})")
        if self.observed.shape != self.returns.shape:
            raise ValueError("observed mask shape mismatch")
        for arr in (self.calendar, self.returns, self.observed):
            _freeze(arr)

    @property
    def n_tickers(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return len(self.calendar)

    def ticker_index(self, ticker: str) -> int:
        try:
            return self.tickers.index(ticker)
        except ValueError:
            raise KeyError(f"unknown ticker {ticker!r}") from None


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted-structure synthetic panel generator.

    Minute returns follow r = sigma_day * diurnal[bucket] * eps with eps iid
    standard normal, and log sigma_day = mean + sqrt(rho)*f + sqrt(1-rho)*g
    where f (market-wide) and g (per ticker) are independent zero-mean AR(1)
    processes sharing (phi, innovation std).
    """

    n_tickers: int
    n_days: int
    common_factor_loading: float      # rho in [0, 1]
    logvol_mean: float = -7.0
    logvol_phi: float = 0.97
    logvol_innovation_std: float = 0.10
    diurnal_profile: tuple[float, ...] = (
        1.9, 1.4, 1.15, 1.0, 0.9, 0.85, 0.8, 0.8, 0.85, 0.9, 1.0, 1.15, 1.35,
    )
    rng_seed: int = 0
    start_date: str = "2015-01-02"

    def __post_init__(self):
        if self.n_tickers < 1 or self.n_days < 1:
            raise ValueError("n_tickers and n_days must be positive")
        if not 0.0 <= self.common_factor_loading <= 1.0:
            raise ValueError("common_factor_loading must lie in [0, 1]")
        if not abs(self.logvol_phi) < 1.0:
            raise ValueError("|logvol_phi| must be < 1")
        if self.logvol_innovation_std <= 0:
            raise ValueError("logvol_innovation_std must be positive")
        if len(self.diurnal_profile) != 13:
            raise ValueError("diurnal_profile needs 13 half-hour multipliers")
        if min(self.diurnal_profile) <= 0:
            raise ValueError("diurnal multipliers must be positive")


def _quality_report(counts: dict) -> None:
    lines = ["minute-bar quality report:"]
    for key, val in counts.items():
        lines.append(f"  {key} = {val}")
    print("\n".join(lines), file=sys.stderr)


def load_minute_bars(path, calendar=None) -> MinutePanel:
    """Load a delimited minute-bar file into a session-aligned return panel.

    Expected columns: ``ticker,date,time,bid,ask`` with a header row. Returns
    are mid-price log ratios between adjacent minute marks within a session;
    the 09:30 mid only serves as the base of the day's first return, so no
    overnight return ever enters the panel. Crossed quotes (bid > ask) and
    non-positive prices are rejected row-wise and tallied in a quality report
    on stderr; unparseable rows raise :class:`BarFileError` with the line
    number. Days whose latest quote is at or before 13:00 are rejected as
    half days.
    """
    mids: dict[str, dict] = {}
    n_rows = 0
    n_crossed = 0
    n_bad_price = 0
    n_out_of_calendar = 0
    n_duplicate = 0
    file_dates = set()
    cal_set = None
    if calendar is not None:
        calendar = np.asarray(calendar, dtype="datetime64[D]")
        cal_set = {str(d) for d in calendar}

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header] != ["ticker", "date", "time", "bid", "ask"]:
            raise BarFileError(f"{path}: expected header 'ticker,date,time,bid,ask', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise BarFileError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            ticker, date, tstr, bid_s, ask_s = row
            try:
                hh, mm = tstr.split(":")
                minute = int(hh) * 60 + int(mm)
                bid = float(bid_s)
                ask = float(ask_s)
            except ValueError as exc:
                raise BarFileError(f"{path}:{lineno}: malformed row: {exc}") from None
            n_rows += 1
            if not OPEN_MINUTE <= minute <= CLOSE_MINUTE:
                raise BarFileError(
                    f"{path}:{lineno}: time {tstr} outside the 09:30-16:00 session"
                )
            if cal_set is not None and date not in cal_set:
                n_out_of_calendar += 1
                continue
            file_dates.add(date)
            if bid <= 0 or ask <= 0:
                n_bad_price += 1
                continue
            if bid > ask:
                n_crossed += 1
                continue
            day_map = mids.setdefault(ticker, {})
            arr = day_map.get(date)
            if arr is None:
                arr = np.full(SESSION_MINUTES + 1, np.nan)
                day_map[date] = arr
            slot = minute - OPEN_MINUTE
            if not np.isnan(arr[slot]):
                n_duplicate += 1
            arr[slot] = 0.5 * (bid + ask)

    if not mids:
        raise BarFileError(f"{path}: no usable rows")

    if calendar is None:
        calendar = np.array(sorted(file_dates), dtype="datetime64[D]")

    # half-day check: a densely quoted morning with nothing after 13:00 is a
    # truncated session, not sparse data; sparse days are handled by masking
    for di, day in enumerate(calendar):
        minutes_seen = set()
        for day_map in mids.values():
            arr = day_map.get(str(day))
            if arr is not None:
                minutes_seen.update(int(i) + OPEN_MINUTE
                                    for i in np.flatnonzero(~np.isnan(arr)))
        if minutes_seen and max(minutes_seen) <= _HALF_DAY_CUTOFF \
                and len(minutes_seen) >= 100:
            raise BarFileError(
                f"{path}: {day} looks like a half day (dense quotes, none after "
                f"13:00); only full 390-minute sessions are supported"
            )

    tickers = tuple(sorted(mids))
    nt, nd = len(tickers), len(calendar)
    returns = np.zeros((nt, nd, SESSION_MINUTES))
    observed = np.zeros((nt, nd, SESSION_MINUTES), dtype=bool)
    n_masked_days = 0
    for ti, ticker in enumerate(tickers):
        day_map = mids[ticker]
        for di, day in enumerate(calendar):
            arr = day_map.get(str(day))
            if arr is None:
                n_masked_days += 1
                continue
            ok = ~np.isnan(arr)
            pair = ok[1:] & ok[:-1]
            if not pair.any():
                n_masked_days += 1
                continue
            idx = np.flatnonzero(pair)
            returns[ti, di, idx] = np.log(arr[1:][idx] / arr[:-1][idx])
            observed[ti, di, idx] = True

    _quality_report({
        "rows_parsed": n_rows,
        "rows_rejected_crossed_quote": n_crossed,
        "rows_rejected_nonpositive_price": n_bad_price,
        "rows_outside_calendar": n_out_of_calendar,
        "duplicate_minute_rows_last_wins": n_duplicate,
        "ticker_days_fully_masked": n_masked_days,
    })
    return MinutePanel(tickers=tickers, calendar=calendar, returns=returns, observed=observed)


def winsorize_panel(panel: MinutePanel, lower: float = 0.005, upper: float = 0.995,
                    fit_window=None) -> MinutePanel:
    """Clamp extreme returns to per-ticker empirical quantiles.

    Quantiles are estimated on returns whose day falls inside ``fit_window``
    (an inclusive (start_date, end_date) pair; None uses the full sample) and
    then clamp every unmasked return in the panel. Quantiles are order
    statistics (nearest-rank), which makes the operation idempotent: applying
    it twice changes nothing. Masked slots stay exactly 0.0.
    """
    if not 0.0 <= lower < upper <= 1.0:
        raise ValueError("need 0 <= lower < upper <= 1")
    if fit_window is None:
        window_mask = np.ones(panel.n_days, dtype=bool)
    else:
        start, end = (np.datetime64(fit_window[0], "D"), np.datetime64(fit_window[1], "D"))
        window_mask = (panel.calendar >= start) & (panel.calendar <= end)
        if not window_mask.any():
            raise ValueError(f"fit_window [{start}, {end}] matches no trading days")

    returns = np.array(panel.returns)
    for ti in range(panel.n_tickers):
        obs = panel.observed[ti][window_mask]
        sample = panel.returns[ti][window_mask][obs]
        if sample.size < 100:
            raise ValueError(
                f"ticker {panel.tickers[ti]!r}: only {sample.size} unmasked returns "
                f"in the fit window; need >= 100 for stable quantiles"
            )
        lo = np.quantile(sample, lower, method="nearest")
        hi = np.quantile(sample, upper, method="nearest")
        tmask = panel.observed[ti]
        returns[ti][tmask] = np.clip(panel.returns[ti][tmask], lo, hi)

    return MinutePanel(tickers=panel.tickers, calendar=np.array(panel.calendar),
                       returns=returns, observed=np.array(panel.observed))


def _ar1(rng: np.random.Generator, shape_prefix: tuple, n_days: int,
         phi: float, sd: float) -> np.ndarray:
    """Zero-mean stationary AR(1) path(s), last axis = days."""
    shocks = rng.standard_normal(shape_prefix + (n_days,))
    out = np.empty_like(shocks)
    out[..., 0] = shocks[..., 0] * sd / np.sqrt(1.0 - phi * phi)
    for t in range(1, n_days):
        out[..., t] = phi * out[..., t - 1] + sd * shocks[..., t]
    return out


def generate_synthetic_panel(spec: SyntheticSpec) -> MinutePanel:
    """Simulate a minute-return panel with a planted common volatility factor.

    Deterministic for a fixed ``rng_seed``: the draw order is the market
    factor path, then per-ticker idiosyncratic paths, then minute shocks.
    """
    rng = np.random.default_rng(spec.rng_seed)
    rho = spec.common_factor_loading
    f = _ar1(rng, (), spec.n_days, spec.logvol_phi, spec.logvol_innovation_std)
    g = _ar1(rng, (spec.n_tickers,), spec.n_days, spec.logvol_phi, spec.logvol_innovation_std)
    eps = rng.standard_normal((spec.n_tickers, spec.n_days, SESSION_MINUTES))

    logvol = spec.logvol_mean + np.sqrt(rho) * f[None, :] + np.sqrt(1.0 - rho) * g
    delta = np.repeat(np.asarray(spec.diurnal_profile), 30)
    returns = np.exp(logvol)[:, :, None] * delta[None, None, :] * eps

    calendar = trading_days(spec.start_date, spec.n_days)
    observed = np.ones(returns.shape, dtype=bool)
    tickers = tuple(f"SYN{i:03d}" for i in range(spec.n_tickers))
    return MinutePanel(tickers=tickers, calendar=calendar, returns=returns, observed=observed)
