"""Box and prediction distribution statistics for dataset bias analysis."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import ManifestRecord, boxes_union, read_heatmap
from .errors import ContractError, SoundlocError
from .metrics import minmax_normalize

DENSITY_SIZE = 224


def default_area_edges() -> tuple[float, ...]:
    return tuple(k / 10 for k in range(11))


@dataclass(frozen=True)
class AreaHistogram:
    bin_edges: tuple[float, ...]
    percentages: tuple[float, ...]

    def peak_bin(self) -> tuple[float, float]:
        i = int(np.argmax(self.percentages))
        return self.bin_edges[i], self.bin_edges[i + 1]

    def share(self, lo: float, hi: float) -> float:
        """Percentage of frames in the bin ``(lo, hi]``."""
        for i, (a, b) in enumerate(zip(self.bin_edges, self.bin_edges[1:])):
            if math.isclose(a, lo) and math.isclose(b, hi):
                return self.percentages[i]
        raise KeyError((lo, hi))


@dataclass(frozen=True, eq=False)
class CenterDensityGrid:
    grid: np.ndarray


@dataclass(frozen=True)
class CountHistogram:
    percentages: dict[int, float] = field(default_factory=dict)


def _require(manifest: Sequence[ManifestRecord]) -> None:
    if not manifest:
        raise ContractError("statistics need a non-empty manifest")


def bin_fractions(fractions: Iterable[float], edges: Sequence[float] | None = None) -> AreaHistogram:
    """Histogram over bins ``(e, e']``; exactly 0 lands in the first bin."""
    edges = tuple(edges or default_area_edges())
    values = np.asarray(list(fractions), dtype=np.float64)
    if values.size == 0:
        raise ContractError("nothing to bin")
    idx = np.searchsorted(np.asarray(edges[1:-1]), values, side="left")
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return AreaHistogram(edges, tuple(float(c) * 100.0 / values.size for c in counts))


def frame_area_fractions(manifest: Sequence[ManifestRecord], per_box: bool = False) -> list[float]:
    out = []
    for rec in manifest:
        ann = rec.annotation
        frame = ann.width * ann.height
        if per_box:
            out.extend(b.area / frame for b in ann.boxes)
        else:
            out.append(float(boxes_union(ann.boxes, ann.width, ann.height).sum()) / frame)
    return out


def bbox_area_hist(manifest: Sequence[ManifestRecord], per_box: bool = False, edges=None) -> AreaHistogram:
    _require(manifest)
    return bin_fractions(frame_area_fractions(manifest, per_box), edges)


def center_density(manifest: Sequence[ManifestRecord], size: int = DENSITY_SIZE) -> CenterDensityGrid:
    _require(manifest)
    grid = np.zeros((size, size), dtype=np.float64)
    for rec in manifest:
        ann = rec.annotation
        for box in ann.boxes:
            cx, cy = box.center
            col = min(int(cx * size / ann.width), size - 1)
            row = min(int(cy * size / ann.height), size - 1)
            grid[row, col] += 1.0
    total = grid.sum()
    if total > 0:
        grid /= total
    return CenterDensityGrid(grid)


def heatmap_area_fractions(paths: Iterable[Path], bin_threshold: float = 0.5) -> list[float]:
    out = []
    for path in paths:
        try:
            heat = minmax_normalize(read_heatmap(path))
        except (OSError, SoundlocError) as exc:
            raise SoundlocError(f"cannot read heatmap {path}: {exc}") from exc
        out.append(float(np.count_nonzero(heat.values >= np.float32(bin_threshold))) / heat.values.size)
    return out


def heatmap_area_hist(pred_dir: str | Path, bin_threshold: float = 0.5, edges=None) -> AreaHistogram:
    paths = sorted(Path(pred_dir).glob("*.hmp"))
    if not paths:
        raise ContractError(f"no .hmp files in {pred_dir}")
    return bin_fractions(heatmap_area_fractions(paths, bin_threshold), edges)


def boxes_per_frame(manifest: Sequence[ManifestRecord]) -> CountHistogram:
    _require(manifest)
    counts = Counter(len(rec.annotation.boxes) for rec in manifest)
    n = len(manifest)
    return CountHistogram({k: counts[k] * 100.0 / n for k in sorted(counts)})


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _area_rows(hist: AreaHistogram):
    for a, b, p in zip(hist.bin_edges, hist.bin_edges[1:], hist.percentages):
        yield f"{a:.2f}", f"{b:.2f}", f"{p:.4f}"


def write_stats(
    manifest: Sequence[ManifestRecord], out_dir: str | Path, pred_dir: str | Path | None = None,
    bin_threshold: float = 0.5, per_box: bool = False, plots: bool = True,
) -> list[Path]:
    """Emit ``<dataset>_<statistic>.csv`` tables (and ``.png`` plots) into ``out_dir``."""
    _require(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = "+".join(sorted({r.dataset_id for r in manifest}))
    written: list[Path] = []

    area = bbox_area_hist(manifest, per_box)
    counts = boxes_per_frame(manifest)
    density = center_density(manifest)
    pred_area = heatmap_area_hist(pred_dir, bin_threshold) if pred_dir is not None else None

    tables = {
        "bbox_area": (["bin_lo", "bin_hi", "percent_frames"], list(_area_rows(area))),
        "boxes_per_frame": (["boxes", "percent_frames"], [(k, f"{v:.4f}") for k, v in counts.percentages.items()]),
        "center_density": (
            ["row", "col", "mass"],
            [(int(r), int(c), f"{density.grid[r, c]:.6f}") for r, c in zip(*np.nonzero(density.grid))],
        ),
    }
    if pred_area is not None:
        tables["heatmap_area"] = (["bin_lo", "bin_hi", "percent_frames"], list(_area_rows(pred_area)))
    for name, (header, rows) in tables.items():
        path = out / f"{dataset}_{name}.csv"
        _write_csv(path, header, rows)
        written.append(path)
    if plots:
        written += _plot(out, dataset, area, counts, density, pred_area)
    return written


def _plot(out: Path, dataset: str, area, counts, density, pred_area) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(4, 3))
    mids = [(a + b) / 2 for a, b in zip(area.bin_edges, area.bin_edges[1:])]
    ax.plot(mids, area.percentages, "r:", label="boxes")
    if pred_area is not None:
        ax.plot(mids, pred_area.percentages, "-", label="predictions")
    ax.set_xlabel("area fraction")
    ax.set_ylabel("% frames")
    ax.legend()
    paths.append(out / f"{dataset}_area.png")
    fig.savefig(paths[-1], dpi=80, metadata={"Software": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(density.grid, cmap="viridis")
    paths.append(out / f"{dataset}_center_density.png")
    fig.savefig(paths[-1], dpi=80, metadata={"Software": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([str(k) for k in counts.percentages], list(counts.percentages.values()))
    ax.set_xlabel("boxes per frame")
    ax.set_ylabel("% frames")
    paths.append(out / f"{dataset}_boxes_per_frame.png")
    fig.savefig(paths[-1], dpi=80, metadata={"Software": None})
    plt.close(fig)
    return paths
