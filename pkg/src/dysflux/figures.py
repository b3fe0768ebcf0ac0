"""Figure rendering for the report paths (loss curves, distributions, F1 bars).

Uses the Agg backend; every figure is a pure function of report data so
repeated runs produce the same image.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_DPI = 150


def save_history_figure(history, path):
    """Train/dev loss curves over epochs from a checkpoint history."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(epochs, [h["train_total"] for h in history], marker="o", label="train total")
    ax.plot(epochs, [h["dev_total"] for h in history], marker="s", label="dev total")
    ax.plot(epochs, [h["dev_main"] for h in history], marker="^", linestyle="--", label="dev main")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_distribution_figure(reports, path):
    """Grouped bars of per-class positive percentages, one group per selection."""
    reports = [r for r in reports if not r.empty]
    if not reports:
        raise ValueError("no non-empty selections to plot")
    classes = list(reports[0].percentages)
    width = 0.8 / len(reports)
    fig, ax = plt.subplots(figsize=(8.0, 4.2))
    for i, rep in enumerate(reports):
        xs = [j + i * width for j in range(len(classes))]
        label = rep.split if rep.split else "all"
        ax.bar(xs, [rep.percentages[c] for c in classes], width=width,
               label=f"{label} (n={rep.total})")
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(classes))])
    ax.set_xticklabels(classes)
    ax.set_ylabel("% of clips positive")
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_f1_figure(report, path):
    """Per-class F1 bars; N/A and not-evaluable classes appear as annotated gaps."""
    names = [e.name for e in report.entries]
    values = []
    notes = []
    for e in report.entries:
        if e.metrics is not None and e.metrics.f1 is not None:
            values.append(e.metrics.f1)
            notes.append(None)
        else:
            values.append(0.0)
            notes.append("-" if e.metrics is None else "N/A")
    fig, ax = plt.subplots(figsize=(8.0, 4.2))
    ax.bar(range(len(names)), values)
    for i, note in enumerate(notes):
        if note:
            ax.text(i, 0.02, note, ha="center", va="bottom")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("F1")
    ax.set_title(f"{report.manifest_name} / {report.split} (threshold {report.threshold:g})")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_grid_figure(result, path):
    """Dev-loss heatmaps over (alpha, gamma), one panel per w_main value."""
    w_values = sorted({c.w_main for c in result.ranked})
    alphas = sorted({c.alpha for c in result.ranked})
    gammas = sorted({c.gamma for c in result.ranked})
    fig, axes = plt.subplots(
        1, len(w_values), figsize=(3.2 * len(w_values) + 1.2, 3.4), squeeze=False
    )
    cell = {(c.w_main, c.alpha, c.gamma): c.dev_loss for c in result.ranked}
    losses = [c.dev_loss for c in result.ranked]
    vmin, vmax = min(losses), max(losses)
    image = None
    for ax, w in zip(axes[0], w_values):
        grid = [[cell[(w, a, g)] for a in alphas] for g in gammas]
        image = ax.imshow(grid, aspect="auto", vmin=vmin, vmax=vmax, origin="lower")
        ax.set_xticks(range(len(alphas)))
        ax.set_xticklabels([f"{a:g}" for a in alphas], rotation=90)
        ax.set_yticks(range(len(gammas)))
        ax.set_yticklabels([f"{g:g}" for g in gammas])
        ax.set_xlabel("alpha")
        ax.set_title(f"w_main={w:g}")
    axes[0][0].set_ylabel("gamma")
    fig.colorbar(image, ax=axes[0], label="monitored dev loss", shrink=0.85)
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return path
