"""Matplotlib renderings written next to the delimited report outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_metrics_figure(rows: list, path) -> None:
    """Histogram panel of the per-pair registration metrics."""
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    panels = [("rre_deg", "RRE (deg)"), ("rte_m", "RTE (m)"),
              ("inlier_ratio", "Inlier ratio"), ("rmse_m", "RMSE (m)")]
    for ax, (key, label) in zip(axes.ravel(), panels):
        values = np.asarray([r[key] for r in rows], dtype=float)
        values = values[np.isfinite(values)]
        if values.size:
            ax.hist(values, bins=min(20, max(5, values.size // 3)), color="#4878d0")
        ax.set_xlabel(label)
        ax.set_ylabel("pairs")
    fig.suptitle(f"registration metrics over {len(rows)} pairs")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_figure(axis: str, rows: list, path) -> None:
    """Grouped bars of FMR / mean IR / RR per axis value."""
    labels = [str(r["value"]) for r in rows]
    fmr = [r["aggregates"]["feature_matching_recall"] for r in rows]
    ir = [r["aggregates"]["mean_inlier_ratio"] for r in rows]
    rr = [r["aggregates"]["registration_recall"] for r in rows]
    x = np.arange(len(labels))
    width = 0.27
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(labels), 4.5))
    ax.bar(x - width, fmr, width, label="FMR")
    ax.bar(x, ir, width, label="mean IR")
    ax.bar(x + width, rr, width, label="RR")
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_xlabel(axis)
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_routing_figure(src_points: np.ndarray, src_experts: np.ndarray,
                        dst_points: np.ndarray, dst_experts: np.ndarray,
                        num_experts: int, path) -> None:
    """Superpoints colored by their final-block expert, source and target
    side by side, plus the expert load histogram."""
    fig = plt.figure(figsize=(12, 4.5))
    cmap = plt.get_cmap("tab10")
    for pos, (pts, experts, title) in enumerate(
            [(src_points, src_experts, "source"), (dst_points, dst_experts, "target")]):
        ax = fig.add_subplot(1, 3, pos + 1, projection="3d")
        ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2],
                   c=[cmap(int(e) % 10) for e in experts], s=14)
        ax.set_title(f"{title} routing")
        ax.set_box_aspect((1, 1, 0.6))
    ax = fig.add_subplot(1, 3, 3)
    counts = np.zeros(num_experts, dtype=int)
    for e in list(src_experts) + list(dst_experts):
        counts[int(e)] += 1
    ax.bar(np.arange(num_experts), counts,
           color=[cmap(i % 10) for i in range(num_experts)])
    ax.set_xlabel("expert")
    ax.set_ylabel("tokens")
    ax.set_title("expert load")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
