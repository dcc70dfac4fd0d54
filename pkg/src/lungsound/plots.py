"""Grouped comparison bar charts (mode x depth -> AS with error bars)."""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)


def group_scores(rows: Iterable[Mapping], metric: str = "AS") -> dict[tuple[str, str], tuple[float, float, int]]:
    """(mode, depth) -> (mean, std, n) of ``metric`` over folds and runs."""
    buckets: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in rows:
        buckets[(str(r["mode"]), str(r["depth"]))].append(float(r[metric]))
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in buckets.items()}


def emit_plots(rows: Iterable[Mapping], out_dir: str | Path, metric: str = "AS",
               name: str = "comparison") -> list[Path]:
    """Write one grouped bar chart; returns the written files (none for an empty table)."""
    rows = list(rows)
    if not rows:
        logger.warning("empty results table, no plot written")
        return []
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scores = group_scores(rows, metric)
    depths = sorted({d for _, d in scores}, key=lambda d: int(d) if d.isdigit() else d)
    modes = list(dict.fromkeys(m for m, _ in scores))
    width = 0.8 / len(modes)
    fig, ax = plt.subplots(figsize=(1.5 + 1.6 * len(depths), 3.5))
    for i, mode in enumerate(modes):
        xs, means, stds = [], [], []
        for j, d in enumerate(depths):
            if (mode, d) in scores:
                m, s, _ = scores[(mode, d)]
                xs.append(j + (i - (len(modes) - 1) / 2) * width)
                means.append(100 * m)
                stds.append(100 * s)
        ax.bar(xs, means, width, yerr=stds, capsize=3, label=mode)
    ax.set_xticks(range(len(depths)))
    ax.set_xticklabels([f"ResNet{d}" for d in depths])
    ax.set_ylabel(f"{metric} (%)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}_{metric}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
