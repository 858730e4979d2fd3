"""Samples, annotations and heatmaps.

Boxes live in integer pixel space with half-open extents
``[x, x + w) x [y, y + h)``. Heatmaps are float32 grids so that the on-disk
format round-trips them bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    HeatmapFormatError,
    HeatmapLengthError,
    ManifestParseError,
    ValidationError,
)

HEATMAP_MAGIC = b"HMP1"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int
    label: str | None = None
    annotator: int | None = None

    def validate(self, width: int, height: int, frame_id: str = "?") -> None:
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValidationError(
                    f"frame {frame_id!r}: box field {name} must be an integer, got {value!r}",
                    frame_id, name,
                )
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"frame {frame_id!r}: box w/h must be positive", frame_id, "w" if self.w <= 0 else "h")
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"frame {frame_id!r}: box x/y must be non-negative", frame_id, "x" if self.x < 0 else "y")
        if self.x + self.w > width:
            raise ValidationError(f"frame {frame_id!r}: box x+w={self.x + self.w} exceeds width {width}", frame_id, "x+w")
        if self.y + self.h > height:
            raise ValidationError(f"frame {frame_id!r}: box y+h={self.y + self.h} exceeds height {height}", frame_id, "y+h")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def to_dict(self) -> dict:
        out: dict = {"x": int(self.x), "y": int(self.y), "w": int(self.w), "h": int(self.h)}
        if self.label is not None:
            out["label"] = self.label
        if self.annotator is not None:
            out["annotator"] = int(self.annotator)
        return out


@dataclass(frozen=True)
class FrameAnnotation:
    frame_id: str
    width: int
    height: int
    boxes: tuple[BoundingBox, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def validate(self, allow_empty: bool = False) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(
                f"frame {self.frame_id!r}: width and height must be positive",
                self.frame_id, "width" if self.width <= 0 else "height",
            )
        if not self.boxes and not allow_empty:
            raise ValidationError(f"frame {self.frame_id!r}: no boxes in a labeled manifest", self.frame_id, "boxes")
        for box in self.boxes:
            box.validate(self.width, self.height, self.frame_id)


@dataclass(frozen=True)
class ManifestRecord:
    frame_id: str
    image_ref: str
    annotation: FrameAnnotation
    dataset_id: str
    audio_ref: str | None = None
    audio_offset_s: float = 0.0
    audio_len_s: float = 0.0
    text_label: str | None = None

    def to_dict(self) -> dict:
        out: dict = {"frame_id": self.frame_id, "image": self.image_ref}
        if self.audio_ref is not None:
            out["audio"] = self.audio_ref
        out["audio_offset_s"] = self.audio_offset_s
        out["audio_len_s"] = self.audio_len_s
        out["width"] = self.annotation.width
        out["height"] = self.annotation.height
        out["boxes"] = [b.to_dict() for b in self.annotation.boxes]
        out["dataset"] = self.dataset_id
        if self.text_label is not None:
            out["text_label"] = self.text_label
        return out

    def resolve(self, ref: str, base: Path | None) -> Path:
        path = Path(ref)
        if base is not None and not path.is_absolute():
            path = base / path
        return path


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Row-major float32 score grid of shape ``(height, width)``."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.size == 0:
            raise ContractError(f"heatmap must be a non-empty 2D grid, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ContractError("heatmap values must be finite")
        if self.normalized:
            lo, hi = float(values.min()), float(values.max())
            if lo < 0.0 or hi > 1.0:
                raise ContractError("normalized heatmap values must lie in [0, 1]")
            if not ((lo == 0.0 and hi == 1.0) or hi == 0.0):
                raise ContractError("normalized heatmap must have min 0 and max 1, or be all zero")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=bool)
        if values.ndim != 2:
            raise ContractError(f"mask must be 2D, got shape {values.shape}")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def area(self) -> int:
        return int(self.values.sum())


def _parse_box(raw: dict, line: int) -> BoundingBox:
    if not isinstance(raw, dict):
        raise ManifestParseError("box entries must be objects", line)
    try:
        return BoundingBox(
            x=raw["x"], y=raw["y"], w=raw["w"], h=raw["h"],
            label=raw.get("label"), annotator=raw.get("annotator"),
        )
    except KeyError as exc:
        raise ManifestParseError(f"box missing field {exc.args[0]!r}", line) from None


def record_from_dict(raw: dict, line: int = 0, allow_unlabeled: bool = False) -> ManifestRecord:
    if not isinstance(raw, dict):
        raise ManifestParseError("record must be a JSON object", line)
    for key in ("frame_id", "image", "width", "height", "dataset"):
        if key not in raw:
            raise ManifestParseError(f"missing field {key!r}", line)
    frame_id = str(raw["frame_id"])
    boxes = raw.get("boxes", [])
    if not isinstance(boxes, list):
        raise ManifestParseError("'boxes' must be an array", line)
    annotation = FrameAnnotation(
        frame_id=frame_id,
        width=raw["width"],
        height=raw["height"],
        boxes=tuple(_parse_box(b, line) for b in boxes),
    )
    annotation.validate(allow_empty=allow_unlabeled)
    audio = raw.get("audio")
    audio_len = float(raw.get("audio_len_s", 0.0))
    if audio is not None and audio_len <= 0:
        raise ValidationError(f"frame {frame_id!r}: audio_len_s must be positive when audio is given", frame_id, "audio_len_s")
    return ManifestRecord(
        frame_id=frame_id,
        image_ref=str(raw["image"]),
        annotation=annotation,
        dataset_id=str(raw["dataset"]),
        audio_ref=audio,
        audio_offset_s=float(raw.get("audio_offset_s", 0.0)),
        audio_len_s=audio_len,
        text_label=raw.get("text_label"),
    )


def load_manifest(path: str | Path, allow_unlabeled: bool = False) -> list[ManifestRecord]:
    """Read a JSON-Lines manifest, validating every record in file order."""
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(exc.msg, lineno) from None
            record = record_from_dict(raw, lineno, allow_unlabeled)
            if record.frame_id in seen:
                raise ValidationError(f"duplicate frame_id {record.frame_id!r}", record.frame_id, "frame_id")
            seen.add(record.frame_id)
            records.append(record)
    return records


def write_manifest(records: Iterable[ManifestRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), separators=(",", ":")) + "\n")


def write_heatmap(heatmap: Heatmap, path: str | Path) -> None:
    payload = np.ascontiguousarray(heatmap.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(HEATMAP_MAGIC, heatmap.width, heatmap.height))
        fh.write(payload.tobytes(order="C"))


def read_heatmap(path: str | Path) -> Heatmap:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise HeatmapLengthError(f"{path}: file shorter than the heatmap header")
    magic, width, height = _HEADER.unpack_from(data)
    if magic != HEATMAP_MAGIC:
        raise HeatmapFormatError(f"{path}: bad magic bytes {magic!r}")
    expected = width * height * 4
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise HeatmapLengthError(f"{path}: expected {expected} payload bytes for {width}x{height}, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    values = values.astype(np.float32)
    lo, hi = float(values.min()), float(values.max())
    normalized = lo >= 0.0 and ((lo == 0.0 and hi == 1.0) or hi == 0.0)
    return Heatmap(values, normalized=normalized)


def box_raster(box: BoundingBox, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    mask[box.y:box.y + box.h, box.x:box.x + box.w] = True
    return mask


def boxes_union(boxes: Sequence[BoundingBox], width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for box in boxes:
        mask[box.y:box.y + box.h, box.x:box.x + box.w] = True
    return mask


def annotator_groups(boxes: Sequence[BoundingBox]) -> list[list[BoundingBox]]:
    """Group boxes by annotator; boxes without an id each form their own group."""
    groups: dict[int, list[BoundingBox]] = {}
    anonymous: list[list[BoundingBox]] = []
    for box in boxes:
        if box.annotator is None:
            anonymous.append([box])
        else:
            groups.setdefault(int(box.annotator), []).append(box)
    return [groups[k] for k in sorted(groups)] + anonymous


def distinct_annotators(annotation: FrameAnnotation) -> int:
    return len(annotator_groups(annotation.boxes))


def gt_mask(annotation: FrameAnnotation, min_agree: int = 1) -> BinaryMask:
    """Pixels covered by boxes from at least ``min_agree`` distinct annotators."""
    if min_agree < 1:
        raise ContractError("min_agree must be >= 1")
    if not annotation.boxes:
        raise ContractError(f"frame {annotation.frame_id!r} has no boxes")
    coverage = np.zeros((annotation.height, annotation.width), dtype=np.int32)
    for group in annotator_groups(annotation.boxes):
        coverage += boxes_union(group, annotation.width, annotation.height)
    return BinaryMask(coverage >= min_agree)
