"""Accuracy/F1 metrics and rank-sum model comparison.

Within each row the best value is orange (rank 1); every other cell is
banded by its ratio to the row maximum (inclusive lower bounds)::

    >= 0.975 green (2), >= 0.95 blue (3), >= 0.90 yellow (4), >= 0.85 red (5), else none (6)

A column's rank-sum adds its ranks over rows; lower is better.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError

COLOR_RANK = {"orange": 1, "green": 2, "blue": 3, "yellow": 4, "red": 5, "none": 6}
BANDS = ((0.975, "green"), (0.95, "blue"), (0.90, "yellow"), (0.85, "red"))


def accuracy(preds: Sequence[int], truths: Sequence[int]) -> float:
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.size == 0 or preds.shape != truths.shape:
        raise ContractError("accuracy needs non-empty aligned predictions and truths")
    return float(np.mean(preds == truths))


def f1_per_class(preds: Sequence[int], truths: Sequence[int], cls: int) -> float:
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.size == 0 or preds.shape != truths.shape:
        raise ContractError("f1 needs non-empty aligned predictions and truths")
    tp = np.sum((preds == cls) & (truths == cls))
    precision_den = np.sum(preds == cls)
    recall_den = np.sum(truths == cls)
    if tp == 0:
        return 0.0
    p, r = tp / precision_den, tp / recall_den
    return float(2 * p * r / (p + r))


def color_for(value: float, row_max: float) -> str:
    if value == row_max:
        return "orange"
    ratio = value / row_max
    for bound, color in BANDS:
        if ratio >= bound:
            return color
    return "none"


@dataclass
class RankTable:
    row_labels: list[str]
    col_labels: list[str]
    values: np.ndarray
    colors: list[list[str]]
    ranks: np.ndarray

    @property
    def rank_sums(self) -> list[int]:
        return [int(v) for v in self.ranks.sum(axis=0)]

    def to_text(self, fmt: str = "{:.2f}") -> str:
        cells = [[""] + list(self.col_labels)]
        for i, label in enumerate(self.row_labels):
            cells.append([label] + [f"{fmt.format(v)} ({c})" for v, c in zip(self.values[i], self.colors[i])])
        cells.append(["Rank-sum"] + [str(s) for s in self.rank_sums])
        widths = [max(len(row[j]) for row in cells) for j in range(len(cells[0]))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in cells)


def rank_cells(values, row_labels: Sequence[str] | None = None,
               col_labels: Sequence[str] | None = None) -> RankTable:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ContractError(f"expected a non-empty 2-D matrix, got shape {values.shape}")
    n_rows, n_cols = values.shape
    row_labels = list(row_labels) if row_labels is not None else [f"row{i}" for i in range(n_rows)]
    col_labels = list(col_labels) if col_labels is not None else [f"col{j}" for j in range(n_cols)]
    if len(row_labels) != n_rows or len(col_labels) != n_cols:
        raise ContractError(f"{len(row_labels)}x{len(col_labels)} labels for a {n_rows}x{n_cols} matrix")
    colors = []
    for row in values:
        if not np.all(np.isfinite(row)):
            raise ContractError("rank_cells needs finite values")
        row_max = row.max()
        colors.append([color_for(v, row_max) for v in row])
    ranks = np.array([[COLOR_RANK[c] for c in row] for row in colors], dtype=np.int64)
    return RankTable(row_labels, col_labels, values, colors, ranks)


# ---------------------------------------------------------------------------
# matrix CSV
# ---------------------------------------------------------------------------
def write_matrix_csv(path, row_labels: Sequence[str], col_labels: Sequence[str], values) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(row_labels), len(col_labels)):
        raise ContractError(f"matrix {values.shape} does not match {len(row_labels)}x{len(col_labels)} labels")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + list(col_labels))
        for label, row in zip(row_labels, values):
            writer.writerow([label] + [repr(float(v)) for v in row])


def read_matrix_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise ContractError(f"{path}: not a matrix CSV (first header cell must be 'label')")
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(labels), len(cols))
    return labels, cols, values


# ---------------------------------------------------------------------------
# report bundle
# ---------------------------------------------------------------------------
def render_report(table: RankTable, out_dir, histories=(), vote_maps: dict | None = None) -> dict[str, Path]:
    """Write the rank table as text and CSV, plus plot data for curves and vote maps.

    ``histories`` holds :class:`cact.training.History` objects; ``vote_maps``
    maps an image id to overlay data from :func:`cact.inference.overlay_data`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if table.values.shape != (len(table.row_labels), len(table.col_labels)):
        raise ContractError("rank table labels do not match its matrix")
    written = {}
    written["table"] = out / "rank_table.txt"
    written["table"].write_text(table.to_text() + "\n")
    written["values"] = out / "rank_values.csv"
    write_matrix_csv(written["values"], table.row_labels, table.col_labels, table.values)
    written["ranks"] = out / "rank_ranks.csv"
    with open(written["ranks"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + table.col_labels)
        for label, colors, ranks in zip(table.row_labels, table.colors, table.ranks):
            writer.writerow([label] + [f"{c}:{r}" for c, r in zip(colors, ranks)])
        writer.writerow(["rank_sum"] + table.rank_sums)
    if histories:
        written["curves"] = out / "training_curves.csv"
        with open(written["curves"], "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["strategy", "fold", "seed", "epoch", "train_loss", "val_accuracy"])
            for hist in histories:
                for r in hist.rows:
                    writer.writerow([r["strategy"], r["fold"], r["seed"], r["epoch"],
                                     repr(r["train_loss"]), repr(r["val_accuracy"])])
    if vote_maps:
        written["vote_maps"] = out / "vote_maps.json"
        written["vote_maps"].write_text(json.dumps(vote_maps, indent=1, sort_keys=True) + "\n")
    return written
