"""Detection F-measure and mean Dice over instance labelings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def f_measure(tp: int, fp: int, fn: int) -> float:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    if tp == fp == fn == 0:
        raise ValueError("F-measure is undefined when all counts are zero")
    # harmonic mean of precision and recall, as one division
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class CellScore:
    truth_id: int
    pred_id: int  # 0 when no predicted cell overlaps
    tp: int
    fp: int
    fn: int

    @property
    def dice(self) -> float:
        return 2 * self.tp / (2 * self.tp + self.fn + self.fp)


@dataclass
class SegScores:
    cells: list[CellScore] = field(default_factory=list)
    precision: float | None = None
    recall: float | None = None
    f_measure: float | None = None

    @property
    def dice(self) -> list[float]:
        return [c.dice for c in self.cells]

    @property
    def mdice(self) -> float:
        return float(np.mean(self.dice)) if self.cells else float("nan")


def mdice(pred, truth) -> SegScores:
    """Per-truth-cell Dice against the predicted cell of maximal overlap.

    Overlap ties go to the lowest predicted id; a predicted cell may be
    assigned to several truth cells.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape}, truth {truth.shape}")
    pred_sizes = dict(zip(*np.unique(pred, return_counts=True)))
    scores = SegScores()
    for tid in np.unique(truth):
        if tid == 0:
            continue
        cell = truth == tid
        size = int(cell.sum())
        ids, counts = np.unique(pred[cell], return_counts=True)
        hit = ids != 0
        ids, counts = ids[hit], counts[hit]
        if not len(ids):
            scores.cells.append(CellScore(int(tid), 0, 0, 0, size))
            continue
        best = np.flatnonzero(counts == counts.max())[0]  # ids are sorted, so lowest id wins
        pid, tp = int(ids[best]), int(counts[best])
        scores.cells.append(CellScore(int(tid), pid, tp, int(pred_sizes[pid]) - tp, size - tp))
    return scores


def write_scores_csv(path, rows):
    """``rows`` are (image, metric, value) triples."""
    with open(path, "w") as fh:
        fh.write("image,metric,value\n")
        for image, metric, value in rows:
            fh.write(f"{image},{metric},{value:.6f}\n")


def format_table(results: dict[str, dict[str, float]], metrics=("F-measure", "mDice")) -> str:
    """Plain-text table: one block per metric, one row per data set."""
    names = list(results)
    width = max([len(n) for n in names] + [len("Data")])
    lines = [f"{'Metric':<10} {'Data':<{width}}  {'Ours':>8}", "-" * (22 + width)]
    for m in metrics:
        for i, n in enumerate(names):
            v = results[n].get(m)
            cell = f"{v:8.3f}" if v is not None else f"{'-':>8}"
            lines.append(f"{m if i == 0 else '':<10} {n:<{width}}  {cell}")
        lines.append("-" * (22 + width))
    return "\n".join(lines) + "\n"
