"""Procedural audio-visual scenes with exactly known ground truth.

``quadrants`` scenes tile four textured "instruments" into a 2x2 collage and
make two of them sound; ``centered`` scenes place one sounding object in a
frame-centered box.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .audio import SAMPLE_RATE, write_wav
from .baselines import center_box, quadrant_bounds
from .data import BoundingBox, FrameAnnotation, ManifestRecord, write_manifest
from .errors import ContractError

N_INSTRUMENTS = 8
TONES_HZ = tuple(220.0 * 2 ** (k / 4) for k in range(N_INSTRUMENTS))
_PALETTE = np.array(
    [[230, 57, 70], [69, 123, 157], [42, 157, 143], [233, 196, 106],
     [244, 162, 97], [131, 56, 236], [58, 134, 255], [255, 190, 11]],
    dtype=np.float64,
)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    kind: Literal["quadrants", "centered"] = "quadrants"
    n: int = 10
    seed: int = 0
    image_size: int = 224
    area_range: tuple[float, float] = (0.2, 0.6)
    audio_len_s: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("quadrants", "centered"):
            raise ContractError(f"unknown synthetic kind {self.kind!r}")
        if self.n < 1:
            raise ContractError("n must be >= 1")
        lo, hi = self.area_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ContractError("area_range must satisfy 0 < lo <= hi <= 1")


def texture(instrument: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """An h x w x 3 uint8 tile whose pattern and color identify the instrument."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    period = 6 + 3 * (instrument % 4)
    pattern = instrument % 4
    if pattern == 0:
        base = 0.5 + 0.5 * np.sin(2 * np.pi * xx / period)
    elif pattern == 1:
        base = 0.5 + 0.5 * np.sin(2 * np.pi * yy / period)
    elif pattern == 2:
        base = ((xx // period + yy // period) % 2).astype(np.float64)
    else:
        base = 0.5 + 0.5 * np.sin(2 * np.pi * np.hypot(xx - w / 2, yy - h / 2) / period)
    base = 0.6 * base + 0.4 * rng.random((h, w))
    tile = base[..., None] * _PALETTE[instrument][None, None, :]
    return np.clip(np.round(tile), 0, 255).astype(np.uint8)


def tone_mix(instruments, len_s: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(int(round(len_s * SAMPLE_RATE))) / SAMPLE_RATE
    mix = sum(np.sin(2 * np.pi * TONES_HZ[i] * t + rng.uniform(0, 2 * np.pi)) for i in instruments)
    mix = mix / max(len(instruments), 1) * 0.5 + 0.01 * rng.standard_normal(t.size)
    return mix.astype(np.float32)


def _quadrant_scene(spec: SyntheticSceneSpec, rng: np.random.Generator):
    size = spec.image_size
    tiles = rng.choice(N_INSTRUMENTS, size=4, replace=False)
    sounding = sorted(rng.choice(4, size=2, replace=False).tolist())
    image = np.zeros((size, size, 3), dtype=np.uint8)
    boxes = []
    for q, (x0, y0, x1, y1) in enumerate(quadrant_bounds(size, size)):
        image[y0:y1, x0:x1] = texture(int(tiles[q]), y1 - y0, x1 - x0, rng)
        if q in sounding:
            boxes.append(BoundingBox(x0, y0, x1 - x0, y1 - y0, label=f"instrument{tiles[q]}"))
    return image, boxes, [int(tiles[q]) for q in sounding]


def _centered_scene(spec: SyntheticSceneSpec, rng: np.random.Generator):
    size = spec.image_size
    lo, hi = spec.area_range
    frac = float(lo if lo == hi else rng.uniform(lo, hi))
    source, background = rng.choice(N_INSTRUMENTS, size=2, replace=False)
    image = (0.35 * texture(int(background), size, size, rng)).astype(np.uint8)
    box = center_box(size, size, frac)
    image[box.y:box.y + box.h, box.x:box.x + box.w] = texture(int(source), box.h, box.w, rng)
    return image, [BoundingBox(box.x, box.y, box.w, box.h, label=f"instrument{source}")], [int(source)]


def synth(spec: SyntheticSceneSpec, out_dir: str | Path) -> Path:
    """Write images/, audio/ and manifest.jsonl under ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    make = _quadrant_scene if spec.kind == "quadrants" else _centered_scene
    records = []
    for i in range(spec.n):
        frame_id = f"{spec.kind}_{i:05d}"
        image, boxes, sources = make(spec, rng)
        Image.fromarray(image).save(out / "images" / f"{frame_id}.png", optimize=False)
        write_wav(out / "audio" / f"{frame_id}.wav", tone_mix(sources, spec.audio_len_s, rng))
        records.append(ManifestRecord(
            frame_id=frame_id,
            image_ref=f"images/{frame_id}.png",
            audio_ref=f"audio/{frame_id}.wav",
            audio_offset_s=0.0,
            audio_len_s=spec.audio_len_s,
            annotation=FrameAnnotation(frame_id, spec.image_size, spec.image_size, tuple(boxes)),
            dataset_id=f"synth-{spec.kind}",
        ))
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest
