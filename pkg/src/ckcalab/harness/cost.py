"""Training and storage cost accounting in samples (hardware independent)."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import accumulate
from typing import Iterable, Sequence

from ..stage import StageReport
from ..stream import FULL_ACCESS, NO_ACCESS


@dataclass(frozen=True)
class CostRow:
    method: str
    seed: int
    stage: int
    samples_processed: int
    cumulative_training: int
    stored_samples: int
    peak_stored: int


def cost_account(reports: Iterable[StageReport]) -> list[CostRow]:
    """Running totals of samples processed and the storage high-water mark."""
    by_run: dict[tuple[str, int], list[StageReport]] = {}
    for r in reports:
        by_run.setdefault((r.method, r.seed), []).append(r)
    rows = []
    for (method, seed), runs in sorted(by_run.items()):
        total = peak = 0
        for r in sorted(runs, key=lambda r: r.stage):
            total += r.samples_processed
            peak = max(peak, r.stored_samples)
            rows.append(CostRow(method, seed, r.stage, r.samples_processed, total,
                                r.stored_samples, peak))
    return rows


def expected_training_cost(chunk_sizes: Sequence[int], epochs: int, regime: str,
                           replay: int = 0) -> list[int]:
    """Cumulative samples processed after each stage.

    Full access retrains on the union every stage; no access touches only the
    newest chunk plus ``replay`` stored exemplars from stage 2 on.
    """
    if regime == FULL_ACCESS:
        per_stage = list(accumulate(chunk_sizes))
    elif regime == NO_ACCESS:
        per_stage = [n + (replay if i else 0) for i, n in enumerate(chunk_sizes)]
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return list(accumulate(epochs * n for n in per_stage))


def expected_storage(chunk_sizes: Sequence[int], regime: str, replay: int = 0) -> list[int]:
    if regime == FULL_ACCESS:
        return list(accumulate(chunk_sizes))
    return [n + (replay if i else 0) for i, n in enumerate(chunk_sizes)]


def format_cost_table(rows: Sequence[CostRow]) -> str:
    head = f"{'method':<20}{'seed':>6}{'stage':>7}{'processed':>12}{'cumulative':>14}{'stored':>9}{'peak':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.method:<20}{r.seed:>6}{r.stage:>7}{r.samples_processed:>12}"
                     f"{r.cumulative_training:>14}{r.stored_samples:>9}{r.peak_stored:>9}")
    return "\n".join(lines)
