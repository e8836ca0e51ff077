"""Per-stage CSV and aggregated JSON reports."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable

import numpy as np

from ..stage import StageReport

CSV_NAME = "stages.csv"
SUMMARY_NAME = "summary.json"
COLUMNS = ("method", "seed", "stage", "acc", "train_loss", "samples_processed", "stored_samples")


def _fmt(v) -> str:
    # repr of a float is the shortest string that parses back to the same value
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def summarize(reports: Iterable[StageReport]) -> dict:
    """Mean and population std of accuracy and loss per (method, stage)."""
    groups: dict[str, dict[int, list[StageReport]]] = defaultdict(lambda: defaultdict(list))
    for r in reports:
        groups[r.method][r.stage].append(r)
    out: dict = {}
    for method in sorted(groups):
        stages = []
        for stage in sorted(groups[method]):
            rows = sorted(groups[method][stage], key=lambda r: r.seed)
            acc = np.array([r.acc for r in rows])
            loss = np.array([r.train_loss for r in rows])
            stages.append({
                "stage": stage,
                "n_seeds": len(rows),
                "seeds": [r.seed for r in rows],
                "acc_mean": float(acc.mean()),
                "acc_std": float(acc.std()),
                "train_loss_mean": float(loss.mean()),
                "train_loss_std": float(loss.std()),
                "samples_processed": int(rows[0].samples_processed),
                "stored_samples": int(rows[0].stored_samples),
            })
        out[method] = {"stages": stages, "final_acc_mean": stages[-1]["acc_mean"]}
    return out


def write_csv(reports: Iterable[StageReport], path: str | Path) -> None:
    rows = sorted(reports, key=lambda r: (r.method, r.seed, r.stage))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])


def read_csv(path: str | Path) -> list[StageReport]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(StageReport(
                method=row["method"], seed=int(row["seed"]), stage=int(row["stage"]),
                acc=float(row["acc"]), train_loss=float(row["train_loss"]), epochs=0,
                samples_processed=int(row["samples_processed"]),
                stored_samples=int(row["stored_samples"])))
    return out


def emit_reports(reports: list[StageReport], out_dir: str | Path) -> tuple[Path, Path]:
    if not reports:
        raise ValueError("no reports to write")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / CSV_NAME, out_dir / SUMMARY_NAME
    write_csv(reports, csv_path)
    json_path.write_text(json.dumps(summarize(reports), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def format_table(summary: dict) -> str:
    """Methods as rows, stages as columns, accuracy in percent."""
    if not summary:
        return "(empty)"
    n = max(len(v["stages"]) for v in summary.values())
    width = max(len(m) for m in summary) + 2
    head = "method".ljust(width) + "".join(f"{'S' + str(i + 1):>8}" for i in range(n))
    lines = [head, "-" * len(head)]
    for method, v in summary.items():
        cells = "".join(f"{100 * s['acc_mean']:8.2f}" for s in v["stages"])
        lines.append(method.ljust(width) + cells)
    return "\n".join(lines)

