"""Rendering of evaluation reports: text tables, delimited files, figures."""

from __future__ import annotations

from . import plots
from .evalharness import EvaluationReport, RecordStore, SCHEME_NAMES
from .session import fmt


def _fmt(x: float, width: int = 8, prec: int = 4) -> str:
    if x != x:
        return " " * (width - 3) + "nan"
    return f"{x:{width}.{prec}f}"


def render_report_text(report: EvaluationReport) -> str:
    """Readable metric tables per horizon plus pairwise DM panels."""
    lines = []
    keys = sorted(report.metrics)
    horizons = sorted({k[2] for k in keys})
    for h in horizons:
        models = sorted({k[0] for k in keys if k[2] == h})
        schemes = [s for s in SCHEME_NAMES
                   if any(k[1] == s and k[2] == h for k in keys)]
        lines.append(f"=== horizon {h}m ===")
        header = f"{'model':<14}" + "".join(
            f"{s + ':' + m:>16}" for s in schemes for m in ("mse", "mape", "r2"))
        lines.append(header)
        for model in models:
            row = [f"{model:<14}"]
            for s in schemes:
                met = report.metrics.get((model, s, h))
                if met is None:
                    row.extend([" " * 16] * 3)
                else:
                    row.append(_fmt(met.mse, 16, 6))
                    row.append(_fmt(met.mape, 16, 6))
                    row.append(_fmt(met.r2, 16, 4))
            lines.append("".join(row))
        lines.append("")

        for scheme in schemes:
            entries = [d for d in report.dm if d.horizon == h and d.group == scheme]
            if not entries:
                continue
            dm_models = sorted({d.model_a for d in entries} | {d.model_b for d in entries})
            lines.append(f"--- DM statistics, {scheme} (positive favors the column model) ---")
            lines.append(f"{'':<14}" + "".join(f"{m:>12}" for m in dm_models))
            table = {(d.model_a, d.model_b): d for d in entries}
            for ma in dm_models:
                row = [f"{ma:<14}"]
                for mb in dm_models:
                    d = table.get((ma, mb))
                    if d is None:
                        row.append(" " * 12)
                    else:
                        flag = "*" if (d.p_value < 0.05 and not d.degenerate) else " "
                        row.append(f"{d.statistic:>11.2f}{flag}")
                lines.append("".join(row))
            lines.append("")

        cross = [d for d in report.dm if d.horizon == h and "_vs_" in d.group]
        if cross:
            lines.append("--- DM statistics, cross-scheme (positive favors the second scheme) ---")
            for d in sorted(cross, key=lambda d: (d.group, d.model_a)):
                flag = "*" if (d.p_value < 0.05 and not d.degenerate) else ""
                lines.append(f"{d.group:<24} {d.model_a:<14} {d.statistic:>9.2f}{flag} "
                             f"(p={d.p_value:.4f})")
            lines.append("")

    failed = [c for c in report.cells if c.status == "failed"]
    skipped = [c for c in report.cells if c.status == "skipped"]
    if failed:
        lines.append("failed cells:")
        for c in failed:
            lines.append(f"  {c.model}/{c.scheme}/h{c.horizon}: {c.error}")
    if skipped:
        lines.append("skipped cells:")
        for c in skipped:
            lines.append(f"  {c.model}/{c.scheme}/h{c.horizon}: {c.error}")
    return "\n".join(lines) + "\n"


def write_report_files(report: EvaluationReport, store: RecordStore, outdir,
                       figures: bool = True) -> list:
    """Write report.txt, metrics.csv, dm.csv, monthly_mse.csv, records.csv
    and (optionally) the monthly-MSE figures. Returns the written paths."""
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    path = outdir / "report.txt"
    path.write_text(render_report_text(report))
    written.append(path)

    path = outdir / "metrics.csv"
    with open(path, "w") as fh:
        fh.write("model,scheme,h,mse,mape,r2,n_stocks\n")
        for (model, scheme, h), m in sorted(report.metrics.items()):
            fh.write(f"{model},{scheme},{h},{fmt(m.mse)},{fmt(m.mape)},{fmt(m.r2)},"
                     f"{m.n_stocks}\n")
    written.append(path)

    path = outdir / "dm.csv"
    with open(path, "w") as fh:
        fh.write("h,group,model_a,model_b,statistic,p_value,degenerate\n")
        for d in report.dm:
            fh.write(f"{d.horizon},{d.group},{d.model_a},{d.model_b},"
                     f"{fmt(d.statistic)},{fmt(d.p_value)},{int(d.degenerate)}\n")
    written.append(path)

    path = outdir / "monthly_mse.csv"
    with open(path, "w") as fh:
        fh.write("model,scheme,h,month,mse\n")
        for (model, scheme, h), (months, values) in sorted(report.monthly.items()):
            for mo, v in zip(months, values):
                fh.write(f"{model},{scheme},{h},{mo},{fmt(v)}\n")
    written.append(path)

    path = outdir / "records.csv"
    store.export(path)
    written.append(path)

    if figures:
        horizons = sorted({k[2] for k in report.monthly})
        for h in horizons:
            path = outdir / f"monthly_mse_h{h}.png"
            plots.monthly_mse_figure(report.monthly, h, path)
            written.append(path)
    return written
