"""Matplotlib renderings of an evaluation report.

The eval command writes report.json and report.csv; these helpers turn the
same report dict into a small set of PNGs next to them.  Everything uses
the Agg backend so it runs headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})

_BAR_COLOR = "#4878a8"
_HIST_COLOR = "#76a869"


def _scalar_metrics(report: Dict) -> Dict[str, float]:
    out = {}
    for name, value in report.get("metrics", {}).items():
        if isinstance(value, dict) and "mean" in value:
            out[name] = value["mean"]
        elif isinstance(value, (int, float)):
            out[name] = float(value)
    return out


def save_report_figures(report: Dict, out_dir: Path) -> List[Path]:
    """Writes summary and per-sample figures; returns the created paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    created: List[Path] = []

    scalars = _scalar_metrics(report)
    if scalars:
        fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(scalars), 3.0))
        names = list(scalars)
        ax.bar(names, [scalars[n] for n in names], color=_BAR_COLOR)
        ax.set_ylabel("value")
        ax.set_title("metric summary")
        ax.tick_params(axis="x", rotation=20)
        fig.tight_layout()
        path = out_dir / "metrics_summary.png"
        fig.savefig(path)
        plt.close(fig)
        created.append(path)

    samples = report.get("samples", [])
    series = {}
    for key in ("frame_consistency", "sync"):
        vals = [s[key] for s in samples if isinstance(s.get(key), (int, float))]
        if len(vals) >= 2:
            series[key] = vals
    if series:
        fig, axes = plt.subplots(1, len(series), figsize=(4.0 * len(series), 3.0),
                                 squeeze=False)
        for ax, (key, vals) in zip(axes[0], series.items()):
            ax.hist(vals, bins=min(20, max(5, len(vals) // 3)), color=_HIST_COLOR)
            ax.set_xlabel(key)
            ax.set_ylabel("count")
            ax.set_title(f"{key} across samples")
        fig.tight_layout()
        path = out_dir / "per_sample_hist.png"
        fig.savefig(path)
        plt.close(fig)
        created.append(path)

    yaw_rows = [(s.get("yaw_estimate"), s.get("side")) for s in samples]
    yaw_rows = [(y, sd) for y, sd in yaw_rows
                if isinstance(y, (int, float)) and isinstance(sd, (int, float))]
    if len(yaw_rows) >= 2:
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.scatter([sd for _, sd in yaw_rows], [y for y, _ in yaw_rows],
                   s=14, color=_BAR_COLOR, alpha=0.7)
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_xlabel("audience side label")
        ax.set_ylabel("estimated yaw offset (px)")
        ax.set_title("orientation vs. label")
        fig.tight_layout()
        path = out_dir / "orientation_scatter.png"
        fig.savefig(path)
        plt.close(fig)
        created.append(path)
    return created
