"""Command-line entry point.

Subcommands: ``synth`` (write a synthetic minute-bar file), ``rv`` (compute
log RV series from bars), ``run`` (config-driven rolling experiment), and
``analyze`` (commonality, DM, sensitivity, interaction, time-of-day
coefficients, sentiment regression). Report paths write delimited text and,
unless figures are disabled, a rendered figure next to it.

Exit codes: 0 success, 1 validation error (bad arguments, config, or input
file), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, plots
from . import analysis as an
from .evalharness import RecordStore, RunSettings, WinsorizeSettings, run_experiment
from .features import import_matrix
from .linmodels import LinearModel
from .marketdata import BarFileError, SyntheticSpec, generate_synthetic_panel, load_minute_bars
from .mlmodels import TrainConfig
from .reporting import write_report_files
from .rvcore import MARKET_TICKER, export_rv, import_rv, market_rv, realized_volatility
from .serialization import load_model, save_model
from .session import SESSION_MINUTES, fmt, minute_mark_times

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

HALF_SPREAD = 5e-5


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


# ---------------------------------------------------------------------------
# key-value config files

def parse_kv_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _get(kv, key, default, cast):
    if key not in kv:
        return default
    raw = kv[key]
    try:
        if cast is bool:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r}") from None


def _get_list(kv, key, default, cast):
    if key not in kv:
        return default
    try:
        return tuple(cast(v.strip()) for v in kv[key].split(",") if v.strip())
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {kv[key]!r}") from None


def synthetic_spec_from_kv(kv, prefix="synthetic.", seed_override=None) -> SyntheticSpec:
    seed = _get(kv, prefix + "seed", _get(kv, "seed", 0, int), int)
    if seed_override is not None:
        seed = seed_override
    return SyntheticSpec(
        n_tickers=_get(kv, prefix + "n_tickers", 5, int),
        n_days=_get(kv, prefix + "n_days", 252, int),
        common_factor_loading=_get(kv, prefix + "rho", 0.7, float),
        logvol_mean=_get(kv, prefix + "logvol_mean", -7.0, float),
        logvol_phi=_get(kv, prefix + "logvol_phi", 0.97, float),
        logvol_innovation_std=_get(kv, prefix + "logvol_sd", 0.10, float),
        diurnal_profile=_get_list(kv, prefix + "diurnal",
                                  SyntheticSpec.__dataclass_fields__["diurnal_profile"].default,
                                  float),
        rng_seed=seed,
        start_date=_get(kv, prefix + "start", "2015-01-02", str),
    )


def _train_cfg(kv, prefix, seed) -> TrainConfig:
    return TrainConfig(
        learning_rate=_get(kv, f"{prefix}.learning_rate", 0.001, float),
        batch_size=_get(kv, f"{prefix}.batch_size", 1024, int),
        max_epochs=_get(kv, f"{prefix}.max_epochs", 100, int),
        patience=_get(kv, f"{prefix}.early_stopping_patience", 10, int),
        ensemble=_get(kv, f"{prefix}.ensemble", 10, int),
        seed=seed,
        gbt_learning_rate=_get(kv, "gbt.learning_rate", 0.1, float),
        gbt_max_depth=_get(kv, "gbt.max_depth", 10, int),
        gbt_early_stopping_rounds=_get(kv, "gbt.early_stopping_rounds", 10, int),
        gbt_round_budget=_get(kv, "gbt.round_budget", 2000, int),
    )


def run_settings_from_kv(kv, seed_override=None) -> RunSettings:
    seed = _get(kv, "seed", 0, int)
    if seed_override is not None:
        seed = seed_override
    first_test_day = _get(kv, "split.first_test_day", None, int)
    if first_test_day is None:
        raise ValidationError("config needs split.first_test_day (1-based day number)")
    widths = _get_list(kv, "mlp.hidden_widths", (64, 32, 16), int)
    n_hidden = _get(kv, "mlp.hidden_layers", len(widths), int)
    if n_hidden != len(widths):
        raise ValidationError(
            f"mlp.hidden_layers={n_hidden} disagrees with mlp.hidden_widths "
            f"({len(widths)} entries)")
    if _get(kv, "lstm.batch_norm", False, bool):
        raise ValidationError("lstm.batch_norm must be false")
    lstm_layers = _get(kv, "lstm.hidden_layers", 2, int)
    try:
        return RunSettings(
            horizons=_get_list(kv, "horizons", (390,), int),
            models=_get_list(kv, "models", ("har-d", "ols"), str),
            schemes=_get_list(kv, "schemes", ("single", "universal", "augmented"), str),
            first_test_index=first_test_day - 1,
            n_years=_get(kv, "split.n_years", 1, int),
            lookback_days=_get(kv, "lookback_days", 21, int),
            seed=seed,
            winsorize=WinsorizeSettings(
                enabled=_get(kv, "winsorize.enabled", True, bool),
                lower=_get(kv, "winsorize.lower", 0.005, float),
                upper=_get(kv, "winsorize.upper", 0.995, float),
                fit=_get(kv, "winsorize.fit", "train", str),
            ),
            gbt_cfg=_train_cfg(kv, "gbt", seed),
            mlp_cfg=_train_cfg(kv, "mlp", seed),
            lstm_cfg=_train_cfg(kv, "lstm", seed),
            mlp_widths=widths,
            mlp_batch_norm=_get(kv, "mlp.batch_norm", True, bool),
            lstm_hidden=_get(kv, "lstm.hidden_width", 32, int),
            lstm_layers=lstm_layers,
            market_scale=_get(kv, "market.scale", "log", str),
            lasso_grid_size=_get(kv, "lasso.grid_size", 50, int),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


# ---------------------------------------------------------------------------
# synth

def write_bar_file(panel, path, half_spread: float = HALF_SPREAD) -> None:
    """Render a minute panel as the delimited bar format.

    Prices rebuild each ticker's mid path from the returns (base 100.0,
    carried across days); masked minutes produce no rows.
    """
    with open(path, "w") as fh:
        fh.write("ticker,date,time,bid,ask\n")
        marks = [str(t)[11:16] for t in minute_mark_times(panel.calendar[0])]
        for ti, ticker in enumerate(panel.tickers):
            price = 100.0
            for di in range(panel.n_days):
                date = str(panel.calendar[di])
                obs = panel.observed[ti, di]
                rets = panel.returns[ti, di]
                mids = np.empty(SESSION_MINUTES + 1)
                mids[0] = price
                ok = np.empty(SESSION_MINUTES + 1, dtype=bool)
                ok[0] = obs.any()
                for l in range(SESSION_MINUTES):
                    mids[l + 1] = mids[l] * np.exp(rets[l])
                    ok[l + 1] = obs[l]
                if not obs.any():
                    continue
                for l in range(SESSION_MINUTES + 1):
                    if not ok[l]:
                        continue
                    mid = mids[l]
                    bid = mid * (1.0 - half_spread)
                    ask = mid * (1.0 + half_spread)
                    fh.write(f"{ticker},{date},{marks[l]},{fmt(bid)},{fmt(ask)}\n")
                price = mids[-1]


def cmd_synth(args) -> int:
    kv = parse_kv_file(args.spec) if args.spec else {}
    spec = synthetic_spec_from_kv(kv, seed_override=args.seed)
    panel = generate_synthetic_panel(spec)
    out = Path(args.out or "bars.csv")
    write_bar_file(panel, out)
    print(f"wrote {out} ({panel.n_tickers} tickers x {panel.n_days} days)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# rv

def cmd_rv(args) -> int:
    if SESSION_MINUTES % args.horizon != 0:
        raise ValidationError(
            f"horizon {args.horizon} does not divide the {SESSION_MINUTES}-minute "
            f"session; valid horizons include 10, 30, 65, 390")
    panel = load_minute_bars(args.bars)
    rvs = realized_volatility(panel, args.horizon)
    series = [rvs[t] for t in sorted(rvs)]
    if args.include_market:
        series.append(market_rv(rvs, scale=args.market_scale))
    out = Path(args.out or f"rv_h{args.horizon}.csv")
    export_rv(series, out)
    print(f"wrote {out} ({len(series)} series, horizon {args.horizon}m)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_run(args) -> int:
    if bool(args.config) == bool(args.manifest):
        raise ValidationError("run needs exactly one of --config or --manifest")
    if args.config:
        config_text = Path(args.config).read_text()
    else:
        doc = json.loads(Path(args.manifest).read_text())
        config_text = doc["config_text"]
        if args.seed is None:
            args.seed = doc["seed"]
    kv = {}
    for lineno, line in enumerate(config_text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        kv[key.strip()] = value.strip()

    settings = run_settings_from_kv(kv, seed_override=args.seed)
    source = _get(kv, "data.source", "synthetic", str)
    if source == "synthetic":
        panel = generate_synthetic_panel(synthetic_spec_from_kv(
            kv, seed_override=settings.seed))
    elif source == "file":
        path = _get(kv, "data.path", None, str)
        if not path:
            raise ValidationError("data.source=file needs data.path")
        panel = load_minute_bars(path)
    else:
        raise ValidationError(f"unknown data.source {source!r}")

    outdir = Path(args.out or "runout")
    figures = _get(kv, "figures", True, bool) and not args.no_figures
    report, store, fitted = run_experiment(panel, settings, jobs=args.jobs)

    written = write_report_files(report, store, outdir, figures=figures)
    models_dir = outdir / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    for key in sorted(fitted):
        model = fitted[key]
        if isinstance(model, dict):     # single scheme: per-ticker models
            for ticker in sorted(model):
                path = models_dir / f"{key}_{ticker}.model"
                save_model(model[ticker], path)
                written.append(path)
        else:
            path = models_dir / f"{key}.model"
            save_model(model, path)
            written.append(path)

    manifest = {
        "version": __version__,
        "seed": settings.seed,
        "config_text": config_text,
        "outputs": {str(p.relative_to(outdir)): _sha256(p) for p in sorted(written)},
        "cells": [{
            "model": c.model, "scheme": c.scheme, "h": c.horizon,
            "split": c.split_index, "status": c.status, "error": c.error,
            "seconds": round(c.seconds, 3), "n_train": c.n_train, "n_test": c.n_test,
        } for c in report.cells],
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    n_failed = sum(1 for c in report.cells if c.status == "failed")
    print(f"wrote {outdir}/ ({len(written)} files; {n_failed} failed cells)")
    return EXIT_RUNTIME if n_failed else EXIT_OK


# ---------------------------------------------------------------------------
# analyze

def _load_rv_panel(path):
    rvs = import_rv(path)
    market = rvs.pop(MARKET_TICKER, None)
    return rvs, market


def cmd_analyze(args) -> int:
    outdir = Path(args.out or "analysis")
    outdir.mkdir(parents=True, exist_ok=True)
    sub = args.analysis

    if sub == "commonality":
        rvs, market = _load_rv_panel(args.rv)
        if market is None and not args.leave_one_out:
            market = market_rv(rvs)
        horizon = next(iter(rvs.values())).horizon
        report = an.commonality(rvs, market, horizon, grouping=args.grouping,
                                include_self=not args.leave_one_out,
                                lead_lag=args.lead_lag)
        report.write_csv(outdir / "commonality_long.csv")
        report.write_summary(outdir / "commonality_summary.csv")
        if not args.no_figures:
            plots.commonality_figure(report, outdir / "commonality.png")
        if report.lead_lag:
            print("note: the lead-one market regressor is non-causal", file=sys.stderr)
        print(f"mean adjusted R^2: {report.mean_adj_r2():.4f}; wrote {outdir}/")
        return EXIT_OK

    if sub == "dm":
        store_a = RecordStore.load(args.records_a)
        store_b = RecordStore.load(args.records_b)
        ga, gb = store_a.groups(), store_b.groups()
        key_a = _pick_group(ga, args.model_a, "records-a")
        key_b = _pick_group(gb, args.model_b, "records-b")
        from .evalharness import dm_test
        res = dm_test(store_a.select(*key_a), store_b.select(*key_b))
        flag = " degenerate" if res.degenerate else ""
        line = (f"dm {key_a[0]}/{key_a[1]}/h{key_a[2]} vs {key_b[0]}/{key_b[1]}/"
                f"h{key_b[2]}: statistic={fmt(res.statistic)} p={fmt(res.p_value)}{flag}")
        print(line)
        (outdir / "dm.txt").write_text(line + "\n")
        return EXIT_OK

    if sub == "sensitivity":
        model, norm = load_model(args.model)
        if args.matrix:
            matrix = import_matrix(args.matrix)
        elif isinstance(model, LinearModel):
            matrix = None
        else:
            raise ValidationError("non-linear models need --matrix")
        if matrix is None:
            from .analysis import SensitivityProfile
            totals = np.abs(model.coef)
            if totals.sum() == 0:
                totals = np.ones_like(totals)
            profile = SensitivityProfile(columns=model.columns,
                                         values=totals / totals.sum())
        else:
            profile = an.sensitivity(model, matrix)
        profile.write_csv(outdir / "sensitivity.csv")
        if not args.no_figures:
            plots.sensitivity_figure(profile, outdir / "sensitivity.png")
        print(f"wrote {outdir}/sensitivity.csv")
        return EXIT_OK

    if sub == "interaction":
        model, _ = load_model(args.model)
        matrix = import_matrix(args.matrix)
        profile = an.interaction_profile(model, matrix, args.feature_j, args.feature_i)
        profile.write_csv(outdir / "interaction.csv")
        if not args.no_figures:
            plots.interaction_figure(profile, outdir / "interaction.png")
        print(f"wrote {outdir}/interaction.csv")
        return EXIT_OK

    if sub == "coefficients":
        model, _ = load_model(args.model)
        if not isinstance(model, LinearModel):
            raise ValidationError("time-of-day coefficients need a linear model")
        entries = an.time_of_day_coefficients(model)
        an.write_coefficients_csv(entries, outdir / "coefficients.csv")
        if not args.no_figures:
            plots.coefficients_figure(entries, outdir / "coefficients.png")
        print(f"wrote {outdir}/coefficients.csv ({len(entries)} buckets)")
        return EXIT_OK

    if sub == "sentiment":
        months, r2 = _read_commonality_summary(args.commonality)
        f_months, factors = _read_factor_file(args.factors)
        common = [m for m in months if m in f_months]
        if len(common) < len(months):
            print(f"sentiment: using {len(common)} of {len(months)} months with "
                  f"factor coverage", file=sys.stderr)
        r2_sel = np.array([r2[months.index(m)] for m in common])
        fac_sel = {name: np.array([vals[f_months.index(m)] for m in common])
                   for name, vals in factors.items()}
        report = an.sentiment_regression(r2_sel, fac_sel)
        report.write_csv(outdir / "sentiment.csv")
        print(f"adjusted R^2: {report.adj_r2:.4f}; wrote {outdir}/sentiment.csv")
        return EXIT_OK

    raise ValidationError(f"unknown analyze subcommand {sub!r}")


def _pick_group(groups, spec, which):
    if spec:
        parts = spec.split("/")
        if len(parts) != 3:
            raise ValidationError(f"--{which} filter must be model/scheme/horizon")
        key = (parts[0], parts[1], int(parts[2]))
        if key not in groups:
            raise ValidationError(f"{which}: no records for {key}; have {groups}")
        return key
    if len(groups) != 1:
        raise ValidationError(
            f"{which} holds {len(groups)} record groups; disambiguate with "
            f"--model-a/--model-b model/scheme/horizon")
    return groups[0]


def _read_commonality_summary(path):
    months, values = [], []
    with open(path) as fh:
        header = fh.readline()
        while header.startswith("#"):
            header = fh.readline()
        if header.strip().split(",")[:2] != ["group", "mean_adj_r2"]:
            raise ValidationError(f"{path}: expected a commonality summary file")
        for line in fh:
            fields = line.rstrip("\n").split(",")
            months.append(fields[0])
            values.append(float(fields[1]))
    return months, np.array(values)


def _read_factor_file(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[0] != "month":
            raise ValidationError(f"{path}: first column must be 'month'")
        names = header[1:]
        months, rows = [], []
        for line in fh:
            fields = line.rstrip("\n").split(",")
            months.append(fields[0])
            rows.append([float(v) for v in fields[1:]])
    data = np.array(rows)
    return months, {name: data[:, i] for i, name in enumerate(names)}


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the config/spec seed")
    common.add_argument("--jobs", type=int, default=None,
                        help="parallel experiment cells (default: CPU count)")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--no-figures", action="store_true",
                        help="skip figure rendering")

    parser = _Parser(prog="intravol",
                     description="Intraday realized-volatility forecasting toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", parents=[common],
                        help="generate a synthetic minute-bar file")
    p.add_argument("spec", nargs="?", help="key=value spec file (defaults apply)")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("rv", parents=[common],
                        help="compute log realized volatility from bars")
    p.add_argument("bars", help="minute-bar csv")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--include-market", action="store_true")
    p.add_argument("--market-scale", choices=("log", "raw"), default="log")
    p.set_defaults(func=cmd_rv)

    p = subs.add_parser("run", parents=[common],
                        help="run a config-driven rolling experiment")
    p.add_argument("--config", help="key=value experiment config")
    p.add_argument("--manifest", help="rerun from a previous manifest.json")
    p.set_defaults(func=cmd_run)

    p = subs.add_parser("analyze", help="post-hoc analyses on run outputs")
    asubs = p.add_subparsers(dest="analysis", required=True)

    a = asubs.add_parser("commonality", parents=[common])
    a.add_argument("--rv", required=True, help="rv csv (from the rv command)")
    a.add_argument("--grouping", choices=("monthly", "half-hour"), default="monthly")
    a.add_argument("--leave-one-out", action="store_true")
    a.add_argument("--lead-lag", action="store_true")
    a.set_defaults(func=cmd_analyze)

    a = asubs.add_parser("dm", parents=[common])
    a.add_argument("records_a")
    a.add_argument("records_b")
    a.add_argument("--model-a", help="filter: model/scheme/horizon")
    a.add_argument("--model-b", help="filter: model/scheme/horizon")
    a.set_defaults(func=cmd_analyze)

    a = asubs.add_parser("sensitivity", parents=[common])
    a.add_argument("--model", required=True)
    a.add_argument("--matrix", help="feature matrix csv (required for non-linear)")
    a.set_defaults(func=cmd_analyze)

    a = asubs.add_parser("interaction", parents=[common])
    a.add_argument("--model", required=True)
    a.add_argument("--matrix", required=True)
    a.add_argument("--feature-j", required=True)
    a.add_argument("--feature-i", required=True)
    a.set_defaults(func=cmd_analyze)

    a = asubs.add_parser("coefficients", parents=[common])
    a.add_argument("--model", required=True)
    a.set_defaults(func=cmd_analyze)

    a = asubs.add_parser("sentiment", parents=[common])
    a.add_argument("--commonality", required=True,
                   help="monthly commonality summary csv")
    a.add_argument("--factors", required=True,
                   help="csv: month,factor1,factor2,...")
    a.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.jobs is None:
            args.jobs = os.cpu_count() or 1
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BarFileError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:   # anything else is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
