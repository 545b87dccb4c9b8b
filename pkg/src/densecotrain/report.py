"""Run reports: the JSON artifact a run leaves behind, the history CSV,
and the human-readable summary table."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .config import ARTIFACT_VERSION, RunConfig, config_to_dict
from .cotrain import CoTrainResult, report_to_dict
from .metrics import COCO_THRESHOLDS

REPORT_FILENAME = "report.json"
HISTORY_FILENAME = "history.csv"
TRACE_FILENAME = "tune_trace.csv"

_HISTORY_COLUMNS = (
    "round", "val_map_a", "val_map_b", "val_map_combined",
    "n_accepted_for_a", "n_accepted_for_b",
    "pseudo_precision_a", "pseudo_precision_b",
)


def build_run_report(
    cfg: RunConfig,
    result: CoTrainResult,
    timings: dict[str, float],
    tuning_trace: str | None = None,
) -> dict:
    return {
        "artifact_version": ARTIFACT_VERSION,
        "config": config_to_dict(cfg),
        "mode": result.state.mode,
        "rounds_completed": result.state.round,
        "best_round": result.best_round,
        "history": [r.to_dict() for r in result.state.history],
        "report_a": report_to_dict(result.report_a),
        "report_b": report_to_dict(result.report_b),
        "report_combined": report_to_dict(result.report_combined),
        "tuning_trace": tuning_trace,
        "timings": dict(timings),
    }


def save_run_report(report: dict, run_dir: str | Path) -> Path:
    path = Path(run_dir) / REPORT_FILENAME
    path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return path


def load_run_report(run_dir: str | Path) -> dict:
    path = Path(run_dir) / REPORT_FILENAME
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("artifact_version") != ARTIFACT_VERSION:
        raise ValueError(f"unsupported artifact_version {doc.get('artifact_version')!r}")
    return doc


def strip_timings(report: dict) -> dict:
    """Reports from identical (config, seed) runs differ only here."""
    out = dict(report)
    out.pop("timings", None)
    return out


def write_history_csv(report: dict, run_dir: str | Path) -> Path:
    path = Path(run_dir) / HISTORY_FILENAME
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HISTORY_COLUMNS)
        for row in report["history"]:
            writer.writerow(
                ["" if row[c] is None else row[c] for c in _HISTORY_COLUMNS]
            )
    return path


def _metric(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def render_summary_table(report: dict) -> str:
    """Three rows (view A, view B, combined) by the three headline
    metrics."""
    rows = [
        ("view A", report["report_a"]),
        ("view B", report["report_b"]),
        ("combined", report["report_combined"]),
    ]
    header = f"{'model':<10} {'mAP':>8} {'AP.75':>8} {'AR@300':>8}"
    lines = [header, "-" * len(header)]
    for name, rep in rows:
        lines.append(
            f"{name:<10} {_metric(rep['map_coco']):>8} "
            f"{_metric(rep['ap75']):>8} {_metric(rep['ar300']):>8}"
        )
    lines.append("")
    lines.append(
        f"mode={report['mode']} rounds={report['rounds_completed']} "
        f"best_round={report['best_round']}"
    )
    return "\n".join(lines)


def history_series(report: dict) -> list[tuple[str, list[tuple[float, float]]]]:
    hist = report["history"]
    return [
        ("view A", [(r["round"], r["val_map_a"]) for r in hist]),
        ("view B", [(r["round"], r["val_map_b"]) for r in hist]),
        ("combined", [(r["round"], r["val_map_combined"]) for r in hist]),
    ]


def trace_series(trace_path: str | Path) -> list[tuple[str, list[tuple[float, float]]]]:
    best: list[tuple[float, float]] = []
    score: list[tuple[float, float]] = []
    with open(trace_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            idx = float(row["evaluation"])
            score.append((idx, float(row["score"])))
            best.append((idx, float(row["best_so_far"])))
    return [("best so far", best), ("evaluation", score)]


def per_threshold_lines(report_fragment: dict) -> list[str]:
    lines = []
    for t in COCO_THRESHOLDS:
        key = f"{t:.2f}"
        val = report_fragment["ap_per_threshold"].get(key)
        lines.append(f"AP@{key}: {_metric(val)}")
    return lines
