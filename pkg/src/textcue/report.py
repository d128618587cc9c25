"""Curve data from evaluation reports, and PNG figures rendered from it."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .evaluate import HIST_EDGES, EvalReport, histogram


def report_curves(report: EvalReport, bins=None, hist_edges=HIST_EDGES) -> dict:
    """Per interferer-SDR bin mean SI-SDRi and accuracy, plus the SI-SDRi histogram.

    ``bins`` defaults to the report's own bin edges; records are grouped by
    their stored ``interferer_sdr_bin``. Empty bins report ``None``.
    """
    edges = list(report.sdr_bin_edges if bins is None else bins)
    n_bins = len(edges) - 1
    groups = [[] for _ in range(n_bins)]
    for r in report.records:
        b = r["interferer_sdr_bin"]
        if not 0 <= b < n_bins:
            raise ValueError(f"record {r['id']} has bin {b} outside {n_bins} bins")
        groups[b].append(r)
    points = []
    for i, g in enumerate(groups):
        points.append({
            "lo": float(edges[i]), "hi": float(edges[i + 1]), "n": len(g),
            "mean_si_sdri": float(np.mean([r["si_sdri"] for r in g])) if g else None,
            "accuracy": 100.0 * sum(bool(r["correct"]) for r in g) / len(g) if g else None,
        })
    return {"mode": report.mode, "bins": points,
            "histogram": histogram([r["si_sdri"] for r in report.records], hist_edges)}


def render_figures(curves: list, out_dir) -> list:
    """Histogram, SI-SDRi-vs-SDR and accuracy-vs-SDR PNGs for one or more modes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for c in curves:
        h = c["histogram"]
        e = np.asarray(h["edges"])
        ax.stairs(h["counts"], e, label=c["mode"])
    ax.set_xlabel("SI-SDRi (dB)")
    ax.set_ylabel("utterances")
    ax.legend()
    fig.tight_layout()
    paths.append(out / "si_sdri_histogram.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)

    for key, label, name in (("mean_si_sdri", "mean SI-SDRi (dB)", "si_sdri_vs_sdr.png"),
                             ("accuracy", "accuracy (%)", "accuracy_vs_sdr.png")):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for c in curves:
            pts = [p for p in c["bins"] if p[key] is not None]
            ax.plot([(p["lo"] + p["hi"]) / 2 for p in pts], [p[key] for p in pts],
                    marker="o", label=c["mode"])
        ax.set_xlabel("interference SDR (dB)")
        ax.set_ylabel(label)
        ax.legend()
        fig.tight_layout()
        paths.append(out / name)
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    return paths
