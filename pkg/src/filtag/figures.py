"""Matplotlib renderings of evaluation reports, saved next to the CSV/JSON.

Uses the Agg backend and strips volatile PNG metadata so identical inputs
produce identical image files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .explain import ErrorReport, HitsReport, SweepResult

DPI = 150
_SAVE_KWARGS = {"dpi": DPI, "metadata": {"Software": None}}


def _save(fig, path) -> None:
    fig.savefig(Path(path), **_SAVE_KWARGS)
    plt.close(fig)


def render_hits_report(report: HitsReport, path) -> None:
    """Hit rate vs n: overall bold, one thin line per class."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ns = list(report.n_values)
    for c, rates in report.per_class.items():
        ax.plot(ns, [rates[n].rate for n in ns], lw=0.8, alpha=0.6, label=f"class {c}")
    ax.plot(ns, [report.overall[n].rate for n in ns], "k-o", lw=2, label="overall")
    ax.set_xlabel("n")
    ax.set_ylabel("Hits@n")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xticks(ns)
    ax.set_title(f"Hits@n ({report.method.label()}, {report.total_images} images)")
    if len(report.per_class) <= 12:
        ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def render_sweep(result: SweepResult, path) -> None:
    """Overall hit rate vs n, one curve per grid point."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ns = list(result.n_values)
    for method, report in result.entries:
        ax.plot(ns, [report.overall[n].rate for n in ns], marker="o", label=method.label())
    ax.set_xlabel("n")
    ax.set_ylabel("Hits@n")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xticks(ns)
    ax.set_title("Hits@n across selection parameters")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def render_error_report(report: ErrorReport, path, max_tags: int = 12) -> None:
    """Tag-frequency bars for a misclassified image, true vs predicted highlighted."""
    tags = list(report.ranked_tags[:max_tags])
    fig, ax = plt.subplots(figsize=(6, max(2.5, 0.4 * len(tags) + 1.2)))
    labels = [t.class_label for t in tags]
    freqs = [t.frequency for t in tags]
    colors = []
    for t in tags:
        if t.class_label == report.true_class:
            colors.append("tab:green")
        elif t.class_label == report.predicted_class:
            colors.append("tab:red")
        else:
            colors.append("tab:gray")
    y = range(len(tags))[::-1]
    ax.barh(list(y), freqs, color=colors)
    ax.set_yticks(list(y))
    ax.set_yticklabels(labels, fontsize=8)
    ax.set_xlabel("activated filters carrying the tag")
    ax.set_title(
        f"image {report.image_id}: true {report.true_class!r} (green) vs "
        f"predicted {report.predicted_class!r} (red)",
        fontsize=9,
    )
    fig.tight_layout()
    _save(fig, path)
