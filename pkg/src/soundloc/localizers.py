"""Heatmap generators: patch cosine similarity, Grad-CAM, Transformer-MM relevancy.

Grad-CAM and Transformer-MM back-propagate the scalar
``<audio_emb, image_emb>``. Its gradient with respect to the image embedding
is the audio embedding itself, so the audio embedding is pushed back through
the image encoder as-is instead of a one-hot class vector.
"""

from __future__ import annotations

import enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .audio import read_wav
from .data import Heatmap, ManifestRecord, write_heatmap
from .encoders import (
    AttentionStack,
    CaptureSession,
    ConvImageEncoder,
    Embedding,
    SpatialFeatureMap,
    ToyModel,
    ViTImageEncoder,
    load_checkpoint,
    load_image,
)
from .errors import ConfigError, ContractError
from .metrics import minmax_normalize


class LocalizerKind(str, enum.Enum):
    COSSIM = "cossim"
    GRADCAM = "gradcam"
    TMM = "tmm"

    @classmethod
    def parse(cls, value: "str | LocalizerKind") -> "LocalizerKind":
        aliases = {"cossim_subpatch": "cossim", "gradcam_embedding": "gradcam", "transformer_mm": "tmm"}
        try:
            return cls(aliases.get(str(getattr(value, "value", value)), getattr(value, "value", value)))
        except ValueError:
            raise ConfigError(f"unknown localizer {value!r}") from None


def upsample_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2D grid."""
    t = torch.as_tensor(np.asarray(grid, dtype=np.float64))[None, None]
    return F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=True)[0, 0].numpy()


def _finish(raw: np.ndarray, out_w: int, out_h: int) -> Heatmap:
    # Bilinear sampling rarely lands on the source extremes, so normalize after resizing.
    return minmax_normalize(Heatmap(upsample_bilinear(raw, out_h, out_w).astype(np.float32)))


def _vector(emb: "Embedding | np.ndarray | torch.Tensor") -> np.ndarray:
    if isinstance(emb, Embedding):
        return emb.values.astype(np.float64)
    if isinstance(emb, torch.Tensor):
        return emb.detach().double().numpy().reshape(-1)
    return np.asarray(emb, dtype=np.float64).reshape(-1)


def cosine_map(feats: SpatialFeatureMap, audio_emb) -> np.ndarray:
    a = _vector(audio_emb)
    if feats.channels != a.size:
        raise ContractError(f"feature dim {feats.channels} != embedding dim {a.size}")
    f = feats.values.astype(np.float64)
    dots = np.tensordot(a, f, axes=(0, 0))
    norms = np.linalg.norm(f, axis=0) * np.linalg.norm(a)
    return dots / np.maximum(norms, 1e-12)


def localize_cossim(feats: SpatialFeatureMap, audio_emb, out_w: int, out_h: int) -> Heatmap:
    if out_w < feats.grid_w or out_h < feats.grid_h:
        raise ContractError("output must be at least as large as the feature grid")
    return _finish(cosine_map(feats, audio_emb), out_w, out_h)


def gradcam_capture(
    model: torch.nn.Module, image: torch.Tensor, audio_emb, layer_id: str
) -> tuple[torch.Tensor, torch.Tensor]:
    """Activations at ``layer_id`` and the gradient of ``<audio_emb, image_emb>`` with respect to them."""
    session = CaptureSession(model, layer_id)
    dtype = next(model.parameters()).dtype
    a = torch.as_tensor(_vector(audio_emb), dtype=dtype)
    emb = session.forward(image.to(dtype))
    grads = session.backward((emb[0] * a).sum())
    return session.activations, grads.detach()


def gradcam_raw(model: torch.nn.Module, image: torch.Tensor, audio_emb, layer_id: str | None = None) -> np.ndarray:
    """Unnormalized Grad-CAM map at the capture layer's resolution."""
    layer_id = layer_id or model.cfg.default_gradcam_layer
    acts, grads = gradcam_capture(model, image, audio_emb, layer_id)
    if acts.ndim != 4:
        raise ConfigError(f"layer {layer_id!r} is not a conv feature map")
    alpha = grads[0].mean(dim=(1, 2))
    cam = torch.relu((alpha[:, None, None] * acts[0]).sum(dim=0))
    return cam.double().numpy()


def localize_gradcam(
    model: torch.nn.Module, image: torch.Tensor, audio_emb, out_w: int, out_h: int, layer_id: str | None = None
) -> Heatmap:
    if not isinstance(model, ConvImageEncoder) and layer_id is None:
        raise ConfigError("Grad-CAM needs a conv capture layer")
    return _finish(gradcam_raw(model, image, audio_emb, layer_id), out_w, out_h)


def attention_with_grads(model: ViTImageEncoder, image: torch.Tensor, target_emb) -> tuple[AttentionStack, np.ndarray]:
    """Attention probabilities and their gradients under ``<target_emb, image_emb>``."""
    dtype = next(model.parameters()).dtype
    target = torch.as_tensor(_vector(target_emb), dtype=dtype)
    with torch.enable_grad():
        emb = model(image.to(dtype))
        maps = model.attention_maps()
        grads = torch.autograd.grad((emb[0] * target).sum(), maps, allow_unused=True)
    grads = [torch.zeros_like(m) if g is None else g for m, g in zip(maps, grads)]
    attn = torch.stack([m[0] for m in maps]).detach().double().numpy()
    grad = torch.stack([g[0] for g in grads]).detach().double().numpy()
    return AttentionStack(attn), grad


def relevancy(attn: AttentionStack, attn_grads: np.ndarray) -> np.ndarray:
    """Relevancy matrix R after folding in every layer, starting from the identity."""
    grads = np.asarray(attn_grads, dtype=np.float64)
    if grads.shape != attn.maps.shape:
        raise ContractError(f"gradient shape {grads.shape} != attention shape {attn.maps.shape}")
    rel = np.eye(attn.tokens)
    for layer_attn, layer_grad in zip(attn.maps.astype(np.float64), grads):
        cam = np.maximum(layer_grad * layer_attn, 0.0).mean(axis=0)
        rel = rel + cam @ rel
    return rel


def localize_transformer_mm(
    attn: AttentionStack, attn_grads: np.ndarray, out_w: int, out_h: int, grid: tuple[int, int] | None = None
) -> Heatmap:
    rel = relevancy(attn, attn_grads)
    patches = rel[0, 1:]
    if grid is None:
        side = int(round(np.sqrt(patches.size)))
        if side * side != patches.size:
            raise ContractError(f"{patches.size} patch tokens do not form a square grid")
        grid = (side, side)
    return _finish(patches.reshape(grid), out_w, out_h)


def _compatible(kind: LocalizerKind, model: ToyModel) -> None:
    needs = "vit" if kind is LocalizerKind.TMM else "conv"
    if model.cfg.arch != needs:
        raise ConfigError(f"localizer {kind.value!r} needs a {needs} checkpoint, got {model.cfg.arch!r}")


def localize_record(kind: LocalizerKind, model: ToyModel, record: ManifestRecord, base_dir: Path | None) -> Heatmap:
    if record.audio_ref is None:
        raise ConfigError(f"frame {record.frame_id!r} has no audio reference")
    dtype = next(model.parameters()).dtype
    image = load_image(record.resolve(record.image_ref, base_dir), model.cfg.image_size).to(dtype)
    clip = read_wav(record.resolve(record.audio_ref, base_dir), record.audio_offset_s, record.audio_len_s)
    with torch.no_grad():
        audio_emb = model.audio(torch.from_numpy(clip).to(dtype)[None])[0]
    w, h = record.annotation.width, record.annotation.height
    if kind is LocalizerKind.COSSIM:
        with torch.no_grad():
            feats = SpatialFeatureMap(model.image.features(image)[0].double().numpy())
        return localize_cossim(feats, audio_emb, w, h)
    if kind is LocalizerKind.GRADCAM:
        return localize_gradcam(model.image, image, audio_emb, w, h)
    attn, grads = attention_with_grads(model.image, image, audio_emb)
    return localize_transformer_mm(attn, grads, w, h)


def run_localizer(
    kind: "str | LocalizerKind",
    checkpoint: str | Path,
    records: Sequence[ManifestRecord],
    out_dir: str | Path,
    base_dir: Path | None = None,
) -> list[Path]:
    """Write one ``<frame_id>.hmp`` per record; checks compatibility before writing."""
    kind = LocalizerKind.parse(kind)
    model = load_checkpoint(checkpoint).double().eval()
    _compatible(kind, model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for record in records:
        path = out / f"{record.frame_id}.hmp"
        write_heatmap(localize_record(kind, model, record, base_dir), path)
        written.append(path)
    return written
