"""SVG figure emission for reports: bar and line charts written next to the
CSV/JSON artifacts they visualize."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "medrep"

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def bar_chart(path, labels, values, title="", ylabel="", rotate=0):
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(labels) + 2.0), 3.2))
    ax.bar(range(len(labels)), values, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=rotate, ha="right" if rotate else "center",
                       fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def grouped_bar_chart(path, groups, series, title="", ylabel=""):
    """series: {name: [value per group]}"""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(groups) + 2.0), 3.2))
    width = 0.8 / max(len(series), 1)
    for i, (name, values) in enumerate(series.items()):
        xs = [g + i * width for g in range(len(groups))]
        ax.bar(xs, values, width=width, label=name)
    ax.set_xticks([g + 0.4 - width / 2 for g in range(len(groups))])
    ax.set_xticklabels(groups, fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def line_chart(path, x, series, title="", xlabel="", ylabel="", logx=False):
    """series: {name: [y values]} over a shared x axis."""
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    for name, ys in series.items():
        ax.plot(x, ys, marker="o", markersize=3, label=name)
    if logx:
        ax.set_xscale("symlog", linthresh=max(min((v for v in x if v > 0), default=1), 1e-3))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
