"""Evaluation reporting: human tables, delimited CSV, and matplotlib figures
rendered to files next to the JSON metrics."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = [
    "human_table", "report_to_csv", "render_eval_figure",
    "episode_scale_labels", "episode_csv", "render_episode_figure",
]


def _rows(report: dict):
    """(group label, key, row dict) triples for the per-group section."""
    task = report["task"]
    if task == "hull":
        return "n", [(k, v) for k, v in report["per_size"].items()]
    if task == "knapsack":
        return "splits", [(k, v) for k, v in report["per_splits"].items()]
    if task == "clustering":
        return "k", [(k, v) for k, v in report["per_k"].items()]
    if task == "tsp":
        return "n", [(k, v) for k, v in report["per_size"].items()]
    raise ValueError(f"unknown task {task!r}")


def human_table(report: dict) -> str:
    key, rows = _rows(report)
    if not rows:
        return "(empty report)"
    cols = sorted({c for _, row in rows for c in row})
    header = [key] + cols
    lines = ["  ".join(f"{h:>18}" for h in header)]
    for label, row in sorted(rows, key=lambda kv: float(kv[0])):
        cells = [label] + [_fmt(row.get(c)) for c in cols]
        lines.append("  ".join(f"{c:>18}" for c in cells))
    tail = {k: v for k, v in report.items()
            if not isinstance(v, dict) and k != "task"}
    lines.append("overall: " + ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(tail.items())))
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report_to_csv(report: dict, path) -> Path:
    path = Path(path)
    key, rows = _rows(report)
    cols = sorted({c for _, row in rows for c in row})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([key] + cols)
        for label, row in sorted(rows, key=lambda kv: float(kv[0])):
            w.writerow([label] + [row.get(c, "") for c in cols])
    return path


_METRIC_FOR_FIGURE = {
    "hull": ("accuracy", "exact-match accuracy"),
    "knapsack": ("mean_ratio", "optimal/output value ratio"),
    "clustering": ("mean_ratio_rec_lloyd", "cost ratio vs recursive Lloyd"),
    "tsp": ("mean_ratio", "tour length ratio"),
}


def render_eval_figure(report: dict, path) -> Path:
    """Bar chart of the task's headline metric per group, saved as PNG."""
    path = Path(path)
    key, rows = _rows(report)
    metric, label = _METRIC_FOR_FIGURE[report["task"]]
    rows = sorted(rows, key=lambda kv: float(kv[0]))
    xs = [r[0] for r in rows]
    ys = [r[1].get(metric, float("nan")) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(range(len(xs)), ys, color="#4878d0")
    ax.set_xticks(range(len(xs)))
    ax.set_xticklabels(xs)
    ax.set_xlabel(key)
    ax.set_ylabel(label)
    ax.set_title(f"{report['task']} evaluation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# episode inspection


def episode_scale_labels(tree_dump: dict) -> dict:
    """Per-scale element labels: at scale j the groups are the nodes at scale
    j plus the leaves that stopped earlier; labels are sequential group ids."""
    n = tree_dump["n"]
    nodes = tree_dump["nodes"]
    max_scale = max(v["scale"] for v in nodes)
    labels = {}
    for j in range(max_scale + 1):
        groups = [v for v in nodes
                  if v["scale"] == j or (v["leaf"] and v["scale"] < j)]
        groups.sort(key=lambda v: (v["scale"], v["pos"]))
        lab = [-1] * n
        for gid, v in enumerate(groups):
            for e in v["indices"]:
                lab[e] = gid
        labels[j] = lab
    return labels


def episode_csv(episode: dict, path) -> Path:
    """One CSV per scale: element id, coordinates, and the scale's label."""
    path = Path(path)
    labels = episode_scale_labels(episode["tree"])
    points = episode.get("points")
    written = []
    for j, lab in labels.items():
        p = path.with_name(path.stem + f"_scale{j}.csv")
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            dims = len(points[0]) if points else 0
            w.writerow(["element"] + [f"x{d}" for d in range(dims)] + ["label"])
            for e in range(episode["tree"]["n"]):
                coords = points[e] if points else []
                w.writerow([e] + list(coords) + [lab[e]])
        written.append(p)
    return written


def render_episode_figure(episode: dict, path) -> Path:
    """Scatter of the input colored by partition label, one panel per scale."""
    path = Path(path)
    labels = episode_scale_labels(episode["tree"])
    points = episode.get("points")
    scales = sorted(labels)
    fig, axes = plt.subplots(1, len(scales), figsize=(3.2 * len(scales), 3.2),
                             squeeze=False)
    for ax, j in zip(axes[0], scales):
        lab = labels[j]
        if points and len(points[0]) >= 2:
            xs = [p[0] for p in points]
            ys = [p[1] for p in points]
            ax.scatter(xs, ys, c=lab, cmap="tab10", s=24)
        ax.set_title(f"scale {j}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
