"""Whole-image grading with a cached feature cube and a sliding aggregation window."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .context_net import ContextModel
from .data import BACKGROUND, CLASS_NAMES
from .errors import ContractError
from .local_repr import PatchClassifier, grid_shape, pad_to_grid, patchify
from .tensor import Tensor, no_grad

OVERLAY_COLORS = {"normal": "green", "low": "blue", "high": "red"}


@dataclass(frozen=True)
class WindowPlan:
    window_cells: int
    stride_cells: int
    grid: tuple[int, int]
    offsets: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.offsets)


def _axis_offsets(extent: int, window: int, stride: int) -> list[int]:
    offsets = list(range(0, extent - window + 1, stride))
    if offsets[-1] != extent - window:
        offsets.append(extent - window)  # clamp the trailing window to the edge
    return offsets


def plan_windows(M: int, N: int, window_cells: int, stride_cells: int) -> WindowPlan:
    """Row-major window offsets over an ``M x N`` cube; partial edge windows are clamped inward."""
    if window_cells < 1 or stride_cells < 1:
        raise ContractError("window and stride must be >= 1 cell")
    if window_cells > min(M, N):
        raise ContractError(f"window of {window_cells} cells exceeds the {M}x{N} cube")
    rows = _axis_offsets(M, window_cells, stride_cells)
    cols = _axis_offsets(N, window_cells, stride_cells)
    return WindowPlan(window_cells, stride_cells, (M, N), tuple((r, c) for r in rows for c in cols))


@dataclass
class VoteResult:
    window_classes: list[int]
    tally: dict[int, int]
    final_grade: int | None
    tie: bool = False

    @property
    def no_glandular_region(self) -> bool:
        return self.final_grade is None

    @property
    def outcome(self) -> str:
        return "no-glandular-region" if self.final_grade is None else CLASS_NAMES[self.final_grade]


def vote(window_classes: Sequence[int], background: int = BACKGROUND) -> VoteResult:
    """Plurality over non-background predictions; ties go to the higher grade."""
    classes = [int(c) for c in window_classes]
    tally: dict[int, int] = {}
    for c in classes:
        if c != background:
            tally[c] = tally.get(c, 0) + 1
    if not tally:
        return VoteResult(classes, tally, None)
    best = max(tally.values())
    leaders = sorted(c for c, n in tally.items() if n == best)
    return VoteResult(classes, dict(sorted(tally.items())), leaders[-1], tie=len(leaders) > 1)


@dataclass
class WindowPrediction:
    row: int
    col: int
    cls: int
    probs: np.ndarray


@dataclass
class GradeResult:
    vote: VoteResult
    windows: list[WindowPrediction]
    plan: WindowPlan
    patch_forwards: int = 0


def grade_image(image: np.ndarray, model: ContextModel, plan: WindowPlan | None = None,
                window_cells: int = 8, stride_cells: int = 1, batch: int = 64) -> GradeResult:
    """Encode ``image`` once, classify every planned window of the cube, and vote."""
    model.eval()
    p = model.arch.extractor.patch_size
    M, N = grid_shape(*np.asarray(image).shape[1:], p)
    if plan is None:
        plan = plan_windows(M, N, window_cells, stride_cells)
    elif plan.grid != (M, N):
        raise ContractError(f"plan grid {plan.grid} does not match image grid {(M, N)}")
    before = model.encoder.patch_forwards
    w = plan.window_cells
    with no_grad():
        cube = model.encoder(np.asarray(image)[None]).data[0]
        probs = []
        for start in range(0, len(plan), batch):
            chunk = plan.offsets[start : start + batch]
            slices = np.stack([cube[:, r : r + w, c : c + w] for r, c in chunk])
            probs.append(model.context(Tensor(slices)).probs.data)
    probs = np.concatenate(probs)
    windows = [WindowPrediction(r, c, int(pr.argmax()), pr) for (r, c), pr in zip(plan.offsets, probs)]
    return GradeResult(vote([wp.cls for wp in windows]), windows, plan, model.encoder.patch_forwards - before)


def grade_window_naive(image: np.ndarray, model: ContextModel, top: int, left: int, window_cells: int) -> np.ndarray:
    """Class probabilities for one window, recomputing its patches from pixels."""
    model.eval()
    p = model.arch.extractor.patch_size
    padded = pad_to_grid(np.asarray(image), p)
    crop = padded[:, top * p : (top + window_cells) * p, left * p : (left + window_cells) * p]
    with no_grad():
        return model(crop[None]).probs.data[0]


def patch_vote_baseline(image: np.ndarray, classifier: PatchClassifier) -> VoteResult:
    """Patch-only grading: classify each patch independently and vote."""
    patches, _, _ = patchify(np.asarray(image)[None], classifier.encoder.spec.patch_size)
    return vote(classifier.predict(patches).tolist())


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------
@dataclass
class CostReport:
    n_patches: int
    n_windows: int
    extractor_macs_per_patch: int
    context_macs_per_window: int
    extractor_flops: int = field(init=False)
    context_flops: int = field(init=False)
    overhead_ratio: float = field(init=False)

    def __post_init__(self):
        # one multiply-accumulate = 2 flops
        self.extractor_flops = 2 * self.n_patches * self.extractor_macs_per_patch
        self.context_flops = 2 * self.n_windows * self.context_macs_per_window
        self.overhead_ratio = self.context_flops / self.extractor_flops

    def lines(self) -> list[str]:
        return [
            f"patches (extractor forwards): {self.n_patches}",
            f"windows (aggregation forwards): {self.n_windows}",
            f"extractor_flops: {self.extractor_flops}",
            f"context_flops: {self.context_flops}",
            f"overhead_ratio: {self.overhead_ratio:.4f}",
        ]


def cost_report(image_hw: tuple[int, int], patch_size: int, window_cells: int, stride_cells: int,
                model: ContextModel) -> CostReport:
    """Analytic conv/dense multiply-accumulate counts for cached sliding-window grading."""
    M, N = grid_shape(*image_hw, patch_size)
    plan = plan_windows(M, N, window_cells, stride_cells)
    spec = model.arch.extractor
    was_training = model.training
    model.eval()
    with no_grad():
        with T.count_macs() as ext:
            model.encoder.extractor(Tensor(np.zeros((1, spec.in_channels, patch_size, patch_size))))
        with T.count_macs() as ctx:
            model.context(Tensor(np.zeros((1, spec.feature_depth, window_cells, window_cells))))
    model.train(was_training)
    return CostReport(M * N, len(plan), ext.total, ctx.total)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------
def write_window_csv(path, windows: Sequence[WindowPrediction], class_names=CLASS_NAMES) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "class"] + [f"p_{name}" for name in class_names])
        for wp in windows:
            writer.writerow([wp.row, wp.col, class_names[wp.cls]] + [repr(float(v)) for v in wp.probs])


def overlay_data(result: GradeResult, patch_size: int, class_names=CLASS_NAMES) -> dict:
    """Per-window boxes in pixel coordinates, colored by predicted grade (background left empty)."""
    w = result.plan.window_cells * patch_size
    boxes = []
    for wp in result.windows:
        name = class_names[wp.cls]
        boxes.append({"top": wp.row * patch_size, "left": wp.col * patch_size, "size": w,
                      "class": name, "color": OVERLAY_COLORS.get(name)})
    return {"grid": list(result.plan.grid), "patch_size": patch_size,
            "window_cells": result.plan.window_cells, "stride_cells": result.plan.stride_cells,
            "outcome": result.vote.outcome, "tie": result.vote.tie, "boxes": boxes}


def write_overlay(path, result: GradeResult, patch_size: int) -> None:
    Path(path).write_text(json.dumps(overlay_data(result, patch_size), indent=1) + "\n")
