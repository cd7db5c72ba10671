"""Matplotlib rendering for the report path.

Figures are written as PNG files next to the CSV/JSON tables. The
Software metadata chunk is stripped so reruns produce identical bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams.update({
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 130,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
})

_COLORS = {"morphgen": "#4455bb", "erm": "#bb5544"}
_SAVE_KW = {"metadata": {"Software": None}, "bbox_inches": "tight"}


def _color(objective: str) -> str:
    return _COLORS.get(objective, "#555555")


def save_accuracy_bars(reports, path) -> None:
    """Grouped mean+-sd accuracy bars per eval domain per objective."""
    fig, ax = plt.subplots()
    objectives = [r["objective"] for r in reports]
    domains = sorted(
        {d for r in reports for d in r["aggregate"]["per_domain"]}, key=int)
    width = 0.8 / max(1, len(reports))
    for k, rep in enumerate(reports):
        means = [rep["aggregate"]["per_domain"][d]["mean"] * 100 for d in domains]
        sds = [rep["aggregate"]["per_domain"][d]["sd"] * 100 for d in domains]
        xs = [i + k * width for i in range(len(domains))]
        ax.bar(xs, means, width=width, yerr=sds, capsize=3,
               color=_color(rep["objective"]), label=rep["objective"])
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(domains))])
    ax.set_xticklabels([f"domain {d}" for d in domains])
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(f"held-out domain accuracy ({', '.join(objectives)})")
    ax.legend()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def _read_train_logs(report) -> list:
    logs = []
    base = Path(report["_dir"])
    for ps in report["per_seed"]:
        path = base / f"seed{ps['seed']}" / "train_log.csv"
        if not path.exists():
            continue
        with open(path, newline="") as fh:
            rows = [{k: float(v) for k, v in row.items()}
                    for row in csv.DictReader(fh)]
        logs.append(rows)
    return logs


def save_loss_curves(reports, path) -> None:
    """Mean total-loss trajectory per objective; one line per objective."""
    fig, ax = plt.subplots()
    drew = False
    for rep in reports:
        logs = _read_train_logs(rep)
        if not logs:
            continue
        n_epochs = min(len(rows) for rows in logs)
        totals = [
            sum(rows[e]["total"] for rows in logs) / len(logs)
            for e in range(n_epochs)
        ]
        ax.plot(range(1, n_epochs + 1), totals, color=_color(rep["objective"]),
                label=rep["objective"])
        drew = True
    ax.set_xlabel("epoch")
    ax.set_ylabel("training total loss")
    ax.set_title("loss trajectories (mean over seeds)")
    if drew:
        ax.legend()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_robustness_curves(rows_by_objective: dict, x_key: str, path,
                           title: str, xlabel: str) -> None:
    """Accuracy-vs-magnitude lines, one per objective.

    rows_by_objective maps objective -> list of {x_key, "accuracy"} dicts
    already averaged over seeds.
    """
    fig, ax = plt.subplots()
    for objective in sorted(rows_by_objective):
        rows = sorted(rows_by_objective[objective], key=lambda r: r[x_key])
        xs = [r[x_key] for r in rows]
        ys = [r["accuracy"] * 100 for r in rows]
        ax.plot(xs, ys, marker="o", color=_color(objective), label=objective)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title)
    ax.legend()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def report_figures(reports, out_dir) -> list:
    """All figures for a consolidated report; returns written paths."""
    out = Path(out_dir)
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    bars = fig_dir / "ood_accuracy.png"
    save_accuracy_bars(reports, bars)
    written.append(bars)
    curves = fig_dir / "loss_curves.png"
    save_loss_curves(reports, curves)
    written.append(curves)
    return written
