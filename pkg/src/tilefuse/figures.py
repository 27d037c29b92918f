"""Matplotlib renderings of the report data, written straight to files.

Optional companions to the JSON/CSV outputs; nothing here is needed for
computation or verification.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError


def plot_check_metrics(checks: Sequence[Mapping], path: str) -> str:
    """Horizontal bars of measured error vs tolerance, log scale."""
    if not checks:
        raise ConfigError("no checks to plot")
    names = [c["name"] for c in checks]
    metrics = [max(float(c["metric"]), 1e-18) for c in checks]
    tols = [float(c["tolerance"]) for c in checks]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(names) + 1.5))
    ypos = range(len(names))
    ax.barh(ypos, metrics, color="#4878d0", label="measured")
    ax.scatter(tols, ypos, color="#d65f5f", marker="|", s=200, label="tolerance")
    ax.set_yticks(ypos)
    ax.set_yticklabels(names)
    ax.set_xscale("log")
    ax.set_xlabel("relative error")
    ax.invert_yaxis()
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_error_ratios(ratios: Sequence[float], path: str) -> str:
    """Histogram of per-trial fused/baseline error ratios with the median."""
    if not ratios:
        raise ConfigError("no ratios to plot")
    import numpy as np

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(ratios, bins=min(30, max(5, len(ratios) // 4)), color="#4878d0")
    med = float(np.median(ratios))
    ax.axvline(med, color="#d65f5f", linestyle="--", label=f"median {med:.3f}")
    ax.axvline(1.0, color="0.3", linestyle=":", label="parity")
    ax.set_xlabel("fused error / baseline error")
    ax.set_ylabel("trials")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_traffic_ratios(rows: Sequence[Mapping], path: str) -> str:
    """Fused/baseline byte ratio per pipeline across the model-width grid."""
    if not rows:
        raise ConfigError("no traffic rows to plot")
    by_pipeline: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        by_pipeline.setdefault(str(row["pipeline"]), []).append(
            (int(row["d"]), float(row["byte_ratio"]))
        )
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(by_pipeline):
        pts = sorted(by_pipeline[name])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.axhline(1.0, color="0.3", linestyle=":")
    ax.set_xlabel("model width d")
    ax.set_ylabel("fused bytes / baseline bytes")
    ax.set_xscale("log", base=2)
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
