"""Figures for evaluation reports, rendered to files."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_LABELS = {"dice": "Dice", "ev_error": "EV error"}


def metric_boxplot(values: dict, metric: str, path: str) -> None:
    """One box per run; ``values`` maps run name to per-case scores."""
    names = list(values)
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(names), 4.0))
    ax.boxplot([values[n] for n in names], showmeans=True)
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel(_LABELS.get(metric, metric))
    if metric == "dice":
        ax.set_ylim(0.0, 1.02)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    # fixed metadata keeps the file identical across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
