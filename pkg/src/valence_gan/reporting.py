"""Text tables, metric CSVs, and figure rendering for evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

CLASS_NAMES = ["Very Neg.", "Neg.", "Neu.", "Pos.", "Very Pos."]
LOSS_KEYS = ["l_d", "l_g", "l_val", "l_act"]


def format_metrics_table(rows):
    """Render model metrics in the layout of the results table.

    rows: list of dicts with keys model, acc5, acc3, rho.
    """
    header = f"{'Model':<16} {'Accuracy (5 class)':>18} {'Accuracy (3 class)':>18} {'Pearson rho':>12}"
    rule = "-" * len(header)
    lines = [header, rule]
    for row in rows:
        rho = f"{row['rho']:.4f}" if row.get("rho") is not None else "n/a"
        lines.append(f"{row['model']:<16} {row['acc5'] * 100:>17.2f}% "
                     f"{row['acc3'] * 100:>17.2f}% {rho:>12}")
    return "\n".join(lines)


def format_confusion_table(matrix):
    """Row-normalized confusion matrix; predictions in columns, targets in rows."""
    matrix = np.asarray(matrix)
    width = max(len(n) for n in CLASS_NAMES)
    header = " " * (width + 1) + " ".join(f"{n:>10}" for n in CLASS_NAMES)
    lines = [header]
    for name, row in zip(CLASS_NAMES, matrix):
        lines.append(f"{name:<{width}} " + " ".join(f"{v:>10.4f}" for v in row))
    return "\n".join(lines)


def write_metrics_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("model,acc5,acc3,rho\n")
        for row in rows:
            rho = "" if row.get("rho") is None else f"{row['rho']:.6f}"
            fh.write(f"{row['model']},{row['acc5']:.6f},{row['acc3']:.6f},{rho}\n")


def parse_loss_rows(rows):
    """Loss CSV rows ('step,l_d,l_g,l_val,l_act') -> dict of float arrays."""
    series = {k: [] for k in LOSS_KEYS}
    steps = []
    for row in rows:
        parts = row.split(",")
        steps.append(int(parts[0]))
        for key, value in zip(LOSS_KEYS, parts[1:]):
            series[key].append(float(value) if value else np.nan)
    return steps, {k: np.array(v) for k, v in series.items()}


def plot_loss_curves(loss_rows, out_path, title="training losses"):
    """Render per-step loss curves to an SVG file."""
    steps, series = parse_loss_rows(loss_rows)
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in LOSS_KEYS:
        values = series[key]
        if np.all(np.isnan(values)):
            continue
        ax.plot(steps, values, label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return Path(out_path)


def plot_confusion(matrix, out_path, title="5-class valence confusion"):
    """Render a row-normalized confusion matrix heatmap to an SVG file."""
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(5), CLASS_NAMES, rotation=30, ha="right")
    ax.set_yticks(range(5), CLASS_NAMES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    ax.set_title(title)
    for i in range(5):
        for j in range(5):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i, j] < 0.5 else "black", fontsize=8)
    fig.colorbar(im, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return Path(out_path)


def render_report(report, out_dir):
    """Write tables, CSV, and figures for one report.json payload.

    Returns the list of written file paths; also returns the text tables.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    rows = [{"model": report["model"], **report["aggregate"]}]
    metrics_txt = format_metrics_table(rows)
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(csv_path, rows)
    written.append(csv_path)

    folds = report.get("folds", [])
    mean_conf = np.mean([np.asarray(f["confusion5"]) for f in folds], axis=0) \
        if folds else np.zeros((5, 5))
    confusion_txt = format_confusion_table(mean_conf)
    written.append(plot_confusion(mean_conf, out_dir / "confusion.svg",
                                  title=f"{report['model']} confusion (mean over folds)"))

    for f in folds:
        if f.get("losses"):
            written.append(plot_loss_curves(
                f["losses"], out_dir / f"loss_fold{f['fold']}.svg",
                title=f"{report['model']} fold {f['fold']} losses"))
    return metrics_txt, confusion_txt, written
