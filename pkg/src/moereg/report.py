"""Benchmark report assembly: per-pair rows, aggregates, JSON/CSV/text output."""

from __future__ import annotations

import csv
import datetime
import io
import json

from . import __version__
from .config import ExperimentConfig
from .registration import RegistrationResult

SCHEMA_VERSION = 1

ROW_FIELDS = [
    "pair", "seed", "failed", "iterations_run", "num_fine", "inlier_count",
    "rre_deg", "rte_m", "chamfer_sq_m", "inlier_ratio", "rmse_m",
    "prior_rre_deg", "prior_rte_m",
]


def result_row(index: int, seed: int, result: RegistrationResult) -> dict:
    m = result.metrics
    return {
        "pair": index,
        "seed": seed,
        "failed": bool(result.failed),
        "iterations_run": len(result.per_iteration),
        "num_fine": len(result.correspondences.fine) if result.correspondences else 0,
        "inlier_count": result.inlier_count,
        "rre_deg": m.rre,
        "rte_m": m.rte,
        "chamfer_sq_m": m.chamfer,
        "inlier_ratio": m.inlier_ratio,
        "rmse_m": m.rmse,
        "prior_rre_deg": result.prior_metrics.rre,
        "prior_rte_m": result.prior_metrics.rte,
    }


def aggregate_rows(rows: list, fmr_threshold: float, rr_threshold: float) -> dict:
    """Aggregates are pure functions of the per-pair rows (recomputable)."""
    n = len(rows)
    if n == 0:
        return {"num_pairs": 0, "feature_matching_recall": 0.0,
                "mean_inlier_ratio": 0.0, "registration_recall": 0.0,
                "mean_rre_deg": 0.0, "mean_rte_m": 0.0,
                "mean_chamfer_sq_m": 0.0, "failure_rate": 0.0}
    return {
        "num_pairs": n,
        "feature_matching_recall": sum(r["inlier_ratio"] > fmr_threshold for r in rows) / n,
        "mean_inlier_ratio": sum(r["inlier_ratio"] for r in rows) / n,
        "registration_recall": sum(r["rmse_m"] < rr_threshold for r in rows) / n,
        "mean_rre_deg": sum(r["rre_deg"] for r in rows) / n,
        "mean_rte_m": sum(r["rte_m"] for r in rows) / n,
        "mean_chamfer_sq_m": sum(r["chamfer_sq_m"] for r in rows) / n,
        "failure_rate": sum(r["failed"] for r in rows) / n,
    }


def build_report(config: ExperimentConfig, rows: list) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": config.to_json(),
        "thresholds": {
            "inlier_threshold_m": config.metrics.inlier_threshold,
            "fmr_ir_threshold": config.metrics.fmr_ir_threshold,
            "rr_rmse_threshold_m": config.metrics.rr_rmse_threshold,
            "chamfer_units": "squared meters (sum of directed means)",
        },
        "pairs": rows,
        "aggregates": aggregate_rows(rows, config.metrics.fmr_ir_threshold,
                                     config.metrics.rr_rmse_threshold),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in ROW_FIELDS})
    return buf.getvalue()


def _fmt(value, width, digits=4):
    if isinstance(value, bool):
        return f"{str(value):>{width}}"
    if isinstance(value, float):
        return f"{value:>{width}.{digits}f}"
    return f"{value:>{width}}"


def ablation_table_text(axis: str, rows: list) -> str:
    """Fixed-width, stable-ordered text table (golden-file friendly)."""
    cols = ["value", "fmr", "mean_ir", "rr", "mean_rre_deg", "mean_rte_m", "failure_rate"]
    widths = [12, 8, 9, 8, 13, 11, 13]
    head = f"axis: {axis}\n"
    head += " ".join(f"{c:>{w}}" for c, w in zip(cols, widths)) + "\n"
    head += "-" * (sum(widths) + len(widths) - 1) + "\n"
    body = ""
    for row in rows:
        agg = row["aggregates"]
        cells = [row["value"], agg["feature_matching_recall"], agg["mean_inlier_ratio"],
                 agg["registration_recall"], agg["mean_rre_deg"], agg["mean_rte_m"],
                 agg["failure_rate"]]
        body += " ".join(_fmt(c, w) for c, w in zip(cells, widths)) + "\n"
    return head + body


def ablation_csv(rows: list) -> str:
    buf = io.StringIO()
    fields = ["value", "num_pairs", "feature_matching_recall", "mean_inlier_ratio",
              "registration_recall", "mean_rre_deg", "mean_rte_m",
              "mean_chamfer_sq_m", "failure_rate"]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        agg = row["aggregates"]
        writer.writerow([row["value"]] + [agg[f] for f in fields[1:]])
    return buf.getvalue()
