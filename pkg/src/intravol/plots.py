"""Figure rendering for report outputs.

Every report path that writes delimited text can also render a matplotlib
figure next to it. All figures go through the Agg backend and a fixed style
so repeated runs produce byte-identical image files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

DPI = 130


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def monthly_mse_figure(monthly: dict, horizon: int, path) -> None:
    """Per-month MSE lines for every (model, scheme) at one horizon."""
    fig, ax = plt.subplots(figsize=(9, 4.5))
    for (model, scheme, h), (months, values) in sorted(monthly.items()):
        if h != horizon:
            continue
        ax.plot(months.astype("datetime64[D]"), values, marker=".",
                label=f"{model}/{scheme}")
    ax.set_ylabel("monthly MSE")
    ax.set_title(f"Out-of-sample MSE by month, horizon {horizon}m")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    _save(fig, path)


def commonality_figure(report, path) -> None:
    """Monthly commonality line (mean across tickers) or half-hour bars."""
    groups = report.groups()
    stats = report.group_mean_std()
    means = [stats[g][0] for g in groups]
    stds = [stats[g][1] for g in groups]
    fig, ax = plt.subplots(figsize=(9, 4.5))
    x = range(len(groups))
    if report.grouping == "half-hour":
        ax.bar(x, means, yerr=stds, capsize=3, color="tab:blue", alpha=0.8)
    else:
        ax.errorbar(x, means, yerr=stds, marker="o", capsize=2)
    step = max(1, len(groups) // 16)
    ax.set_xticks(list(x)[::step])
    ax.set_xticklabels(groups[::step], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("adjusted $R^2$")
    ax.set_title(f"Commonality in volatility ({report.grouping}, horizon {report.horizon}m)")
    ax.grid(alpha=0.3)
    _save(fig, path)


def sensitivity_figure(profile, path, top_k: int = 30) -> None:
    entries = profile.top(top_k)[::-1]
    names = [e[0] for e in entries]
    vals = [e[1] for e in entries]
    fig, ax = plt.subplots(figsize=(7, max(3, 0.22 * len(names))))
    ax.barh(range(len(names)), vals, color="tab:blue")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlabel("normalized sensitivity")
    ax.set_title("Predictor importance")
    ax.grid(alpha=0.3, axis="x")
    _save(fig, path)


def interaction_figure(profile, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for q, curve in zip(profile.quantiles, profile.curves):
        ax.plot(profile.grid, curve, label=f"{profile.feature_i} @ q={q:g}")
    ax.set_xlabel(profile.feature_j)
    ax.set_ylabel("prediction")
    ax.set_title(f"Interaction: {profile.feature_j} vs {profile.feature_i}")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


def coefficients_figure(entries, path) -> None:
    labels = [e[0] for e in entries]
    vals = [e[1] for e in entries]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(labels)), vals, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("coefficient (normalized units)")
    ax.set_title("Time-of-day coefficients")
    ax.grid(alpha=0.3, axis="y")
    _save(fig, path)
