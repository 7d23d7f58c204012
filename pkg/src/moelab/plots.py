"""Static figures from token records: scatters, layer heatmap, tag bars.

All rendering uses the Agg backend and strips the writer's Software
metadata, so rerunning on identical records produces byte-identical
PNG files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .analysis import aggregate_by, chunk_average
from .corpus import TAG_NAMES
from .errors import InputError

_SAVE_OPTS = dict(dpi=100, metadata={"Software": None})
PLOT_NAMES = (
    "rze_vs_entropy.png",
    "rze_vs_delta_logp.png",
    "rze_heatmap.png",
    "rze_by_tag.png",
)


def layer_chunk_matrix(records, chunk_size):
    """[L, num_chunks] mean r_ze, chunked per rollout then averaged.

    Rollouts must cover the same number of positions so their chunk
    grids line up.
    """
    if not records:
        raise InputError("no records to chunk")
    by_rollout = {}
    for r in records:
        by_rollout.setdefault(r.rollout_id, []).append(r)
    series = [chunk_average(group, chunk_size) for group in by_rollout.values()]
    shapes = {s.per_layer.shape for s in series}
    if len(shapes) != 1:
        raise InputError(f"rollouts chunk to different grids: {sorted(shapes)}")
    return np.mean([s.per_layer for s in series], axis=0)


def _tag_label(tag):
    return TAG_NAMES[tag] if 0 <= tag < len(TAG_NAMES) else f"tag {tag}"


def _scatter(records, x_field, path):
    x = [getattr(r, x_field) for r in records]
    y = [r.r_ze_mean for r in records]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(x, y, s=8, alpha=0.5, edgecolors="none")
    ax.set_xlabel(x_field)
    ax.set_ylabel("r_ze")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def _heatmap(records, chunk_size, path):
    matrix = layer_chunk_matrix(records, chunk_size)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, aspect="auto", origin="lower", vmin=0.0, vmax=1.0)
    ax.set_xlabel(f"position chunk (size {chunk_size})")
    ax.set_ylabel("layer")
    ax.set_yticks(range(matrix.shape[0]))
    fig.colorbar(im, ax=ax, label="r_ze")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def _tag_bars(records, path):
    groups = aggregate_by(records, "span_tag")
    tags = sorted(groups)
    values = [groups[t]["r_ze"] for t in tags]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.bar(range(len(tags)), values)
    ax.set_xticks(range(len(tags)))
    ax.set_xticklabels([_tag_label(t) for t in tags])
    ax.set_ylabel("mean r_ze")
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def emit_plots(records, out_dir, chunk_size=32):
    """Write the four standard figures; returns the created paths."""
    if not records:
        raise InputError("no records to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / name for name in PLOT_NAMES]
    _scatter(records, "entropy", paths[0])
    _scatter(records, "delta_logp", paths[1])
    _heatmap(records, chunk_size, paths[2])
    _tag_bars(records, paths[3])
    return paths
