"""Matplotlib figures written next to CSV/markdown reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 8,
    "savefig.dpi": 150,
})

# keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def sweep_figure(rows, path: str | Path) -> Path:
    """Grouped horizontal bars of the four R@1 numbers per configuration."""
    path = Path(path)
    labels = [r.config_id for r in rows]
    series = [
        ("short T2A", [r.short_r1_t2a for r in rows]),
        ("short A2T", [r.short_r1_a2t for r in rows]),
        ("long T2A", [r.long_r1_t2a for r in rows]),
        ("long A2T", [r.long_r1_a2t for r in rows]),
    ]
    y = np.arange(len(rows))
    height = 0.2
    fig, ax = plt.subplots(figsize=(6.5, 0.32 * len(rows) + 1.2))
    for i, (name, values) in enumerate(series):
        ax.barh(y + (i - 1.5) * height, values, height=height, label=name)
    ax.set_yticks(y)
    ax.set_yticklabels(labels)
    ax.invert_yaxis()
    ax.set_xlabel("Recall@1")
    ax.set_xlim(0, 1)
    ax.legend(loc="lower right", frameon=False, ncol=2)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def truncation_figure(rows, path: str | Path, ks: Sequence[int] = (1, 5, 10)) -> Path:
    """Recall@K against embedding width, one panel per retrieval benchmark."""
    path = Path(path)
    benches = sorted({r.benchmark for r in rows if r.direction in ("t2a", "a2t") and not r.benchmark.startswith(("zsc", "mcq"))})
    fig, axes = plt.subplots(1, max(len(benches), 1), figsize=(3.2 * max(len(benches), 1), 2.6), squeeze=False)
    for ax, bench in zip(axes[0], benches):
        for direction, style in (("t2a", "-"), ("a2t", "--")):
            for k in ks:
                pts = sorted((r.dim_level, r.value) for r in rows
                             if r.benchmark == bench and r.direction == direction and r.k == k)
                if not pts:
                    continue
                dims, vals = zip(*pts)
                ax.plot(dims, vals, style, marker="o", ms=3, label=f"{direction.upper()} R@{k}")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("embedding dims")
        ax.set_ylabel("recall")
        ax.set_ylim(0, 1.02)
        ax.set_title(bench)
    axes[0][0].legend(frameon=False, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path
