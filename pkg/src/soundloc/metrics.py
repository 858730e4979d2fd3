"""Heatmap post-processing, consensus IoU and the AUC summary."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np

from .data import BinaryMask, FrameAnnotation, Heatmap, ManifestRecord, distinct_annotators, gt_mask
from .errors import ContractError, MissingPredictionError


def default_auc_grid() -> tuple[float, ...]:
    return tuple(k / 20 for k in range(21))


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation knobs.

    ``min_agree=None`` picks 2 for frames annotated by several annotators and
    1 otherwise. ``auc_mode="success"`` sweeps the cIoU success threshold;
    ``"binarization"`` sweeps the heatmap binarization threshold instead and
    integrates the mean IoU.
    """

    bin_threshold: float = 0.5
    ciou_threshold: float = 0.5
    auc_grid: tuple[float, ...] = field(default_factory=default_auc_grid)
    min_agree: int | None = None
    ciou_inclusive: bool = True
    auc_strict: bool = True
    auc_mode: Literal["success", "binarization"] = "success"
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "auc_grid", tuple(float(t) for t in self.auc_grid))
        if not 0.0 < self.bin_threshold < 1.0:
            raise ContractError("bin_threshold must lie in (0, 1)")
        if not 0.0 < self.ciou_threshold <= 1.0:
            raise ContractError("ciou_threshold must lie in (0, 1]")
        check_grid(self.auc_grid)
        if self.min_agree is not None and self.min_agree < 1:
            raise ContractError("min_agree must be >= 1")
        if self.auc_mode not in ("success", "binarization"):
            raise ContractError(f"unknown auc_mode {self.auc_mode!r}")

    def agree_for(self, annotation: FrameAnnotation) -> int:
        if self.min_agree is not None:
            return self.min_agree
        has_ids = any(b.annotator is not None for b in annotation.boxes)
        return 2 if has_ids and distinct_annotators(annotation) >= 2 else 1


@dataclass(frozen=True)
class EvalResult:
    per_frame_ciou: dict[str, float]
    ciou_at_tau: float
    auc: float


def check_grid(grid: Sequence[float]) -> None:
    if len(grid) < 2:
        raise ContractError("AUC grid needs at least two points")
    if grid[0] != 0.0 or grid[-1] != 1.0:
        raise ContractError("AUC grid must start at 0.0 and end at 1.0")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractError("AUC grid must be strictly increasing")


def minmax_normalize(h: Heatmap) -> Heatmap:
    values = h.values.astype(np.float64)
    lo, hi = values.min(), values.max()
    if hi > lo:
        out = (values - lo) / (hi - lo)
    else:
        out = np.zeros_like(values)
    return Heatmap(out.astype(np.float32), normalized=True)


def binarize(h: Heatmap, threshold: float) -> BinaryMask:
    if not h.normalized:
        raise ContractError("binarize expects a normalized heatmap")
    return BinaryMask(h.values >= np.float32(threshold))


def iou(pred: BinaryMask, gt: BinaryMask) -> float:
    if pred.values.shape != gt.values.shape:
        raise ContractError(f"mask shapes differ: {pred.values.shape} vs {gt.values.shape}")
    inter = np.count_nonzero(pred.values & gt.values)
    union = np.count_nonzero(pred.values | gt.values)
    return inter / union if union else 0.0


def _check_dims(h: Heatmap, ann: FrameAnnotation) -> None:
    if (h.height, h.width) != (ann.height, ann.width):
        raise ContractError(
            f"frame {ann.frame_id!r}: heatmap is {h.width}x{h.height}, annotation is {ann.width}x{ann.height}"
        )


def ciou_frame(h: Heatmap, ann: FrameAnnotation, cfg: EvalConfig | None = None) -> float:
    cfg = cfg or EvalConfig()
    _check_dims(h, ann)
    pred = binarize(minmax_normalize(h), cfg.bin_threshold)
    return iou(pred, gt_mask(ann, cfg.agree_for(ann)))


def _trapezoid(xs: Sequence[float], ys: Sequence[float]) -> float:
    total = math.fsum((x1 - x0) * (y0 + y1) / 2 for x0, x1, y0, y1 in zip(xs, xs[1:], ys, ys[1:]))
    return total / (xs[-1] - xs[0])


def success_curve(per_frame_ciou: Mapping[str, float], grid: Sequence[float], strict: bool = True) -> list[float]:
    scores = np.fromiter(per_frame_ciou.values(), dtype=np.float64)
    if scores.size == 0:
        raise ContractError("cannot compute a success curve over zero frames")
    if strict:
        return [float(np.count_nonzero(scores > t)) / scores.size for t in grid]
    return [float(np.count_nonzero(scores >= t)) / scores.size for t in grid]


def auc(per_frame_ciou: Mapping[str, float], grid: Sequence[float] | None = None, strict: bool = True) -> float:
    """Normalized trapezoidal area under the success-rate curve."""
    grid = tuple(grid) if grid is not None else default_auc_grid()
    check_grid(grid)
    return _trapezoid(grid, success_curve(per_frame_ciou, grid, strict))


def ciou_at(per_frame_ciou: Mapping[str, float], threshold: float, inclusive: bool = True) -> float:
    scores = np.fromiter(per_frame_ciou.values(), dtype=np.float64)
    if scores.size == 0:
        raise ContractError("no frames")
    hits = scores >= threshold if inclusive else scores > threshold
    return float(np.count_nonzero(hits)) / scores.size


def _binarization_auc(
    preds: Mapping[str, Heatmap], records: Sequence[ManifestRecord], cfg: EvalConfig
) -> float:
    curve = []
    normalized = {r.frame_id: minmax_normalize(preds[r.frame_id]) for r in records}
    gts = {r.frame_id: gt_mask(r.annotation, cfg.agree_for(r.annotation)) for r in records}
    for t in cfg.auc_grid:
        scores = [iou(binarize(normalized[fid], t), gts[fid]) for fid in gts]
        curve.append(math.fsum(scores) / len(scores))
    return _trapezoid(cfg.auc_grid, curve)


def evaluate(
    preds: Mapping[str, Heatmap], manifest: Sequence[ManifestRecord], cfg: EvalConfig | None = None
) -> EvalResult:
    cfg = cfg or EvalConfig()
    if not manifest:
        raise ContractError("cannot evaluate an empty manifest")
    missing = [r.frame_id for r in manifest if r.frame_id not in preds]
    if missing:
        raise MissingPredictionError(missing)

    def score(record: ManifestRecord) -> float:
        return ciou_frame(preds[record.frame_id], record.annotation, cfg)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            scores = list(pool.map(score, manifest))
    else:
        scores = [score(r) for r in manifest]
    per_frame = {r.frame_id: s for r, s in sorted(zip(manifest, scores), key=lambda p: p[0].frame_id)}
    if cfg.auc_mode == "binarization":
        area = _binarization_auc(preds, manifest, cfg)
    else:
        area = auc(per_frame, cfg.auc_grid, cfg.auc_strict)
    return EvalResult(
        per_frame_ciou=per_frame,
        ciou_at_tau=ciou_at(per_frame, cfg.ciou_threshold, cfg.ciou_inclusive),
        auc=area,
    )


def format_threshold(t: float) -> str:
    return f"{t:g}"


def results_rows(dataset: str, model: str, result: EvalResult, cfg: EvalConfig) -> list[list[str]]:
    return [
        [dataset, model, f"ciou@{format_threshold(cfg.ciou_threshold)}", f"{result.ciou_at_tau:.3f}"],
        [dataset, model, "auc", f"{result.auc:.3f}"],
    ]


def write_results_csv(path: str | Path, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "model", "metric", "value"])
        writer.writerows(rows)
