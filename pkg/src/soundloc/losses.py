"""Contrastive objectives and the toy training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .audio import SAMPLE_RATE, read_wav
from .data import ManifestRecord
from .encoders import EncoderConfig, ToyModel, load_image, save_checkpoint
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    pos_threshold: float = 0.65
    neg_threshold: float = 0.4
    sharpness: float = 10.0
    batch_size: int = 10
    negatives: Literal["patch", "pooled"] = "patch"

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not self.neg_threshold < self.pos_threshold:
            raise ConfigError("neg_threshold must be below pos_threshold")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.negatives not in ("patch", "pooled"):
            raise ConfigError(f"unknown negatives variant {self.negatives!r}")


def _check_unit(x: torch.Tensor, name: str) -> None:
    norms = x.detach().norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
        raise ContractError(f"{name} must be L2-normalized")


def infonce(audio_embs: torch.Tensor, image_embs: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Symmetric InfoNCE over the N x N cosine-similarity matrix."""
    if audio_embs.ndim != 2 or audio_embs.shape != image_embs.shape or audio_embs.shape[0] < 1:
        raise ContractError("infonce expects two N x d arrays with N >= 1")
    _check_unit(audio_embs, "audio_embs")
    _check_unit(image_embs, "image_embs")
    logits = audio_embs @ image_embs.T / temperature
    target = torch.arange(logits.shape[0])
    return (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2


def _subpatch_from_scores(sim: torch.Tensor, neg_scores: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Loss given own-image similarity maps (N x h x w) and cross-sample scores (N x M)."""
    flat = sim.flatten(1)
    pos_mask = torch.sigmoid(cfg.sharpness * (flat - cfg.pos_threshold))
    neg_mask = torch.sigmoid(cfg.sharpness * (cfg.neg_threshold - flat))
    pos = (pos_mask * flat).sum(1) / pos_mask.sum(1)
    hard = (neg_mask * flat).sum(1) / neg_mask.sum(1)
    # Hard negatives count in proportion to their mask mass.
    hard_logit = hard / cfg.temperature + torch.log(neg_mask.mean(1))
    logits = torch.cat([(pos / cfg.temperature)[:, None], hard_logit[:, None], neg_scores / cfg.temperature], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos / cfg.temperature).mean()


def _cos_maps(audio: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    """Cosine of each audio vector (N x d) with every patch of every map (M x d x h x w)."""
    return torch.einsum("nd,mdhw->nmhw", F.normalize(audio, dim=-1), F.normalize(feats, dim=1))


def subpatch_contrastive(
    audio_emb: torch.Tensor,
    spatial_feats: torch.Tensor,
    negatives: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Region-level contrast of one sample against its hard negatives and other images.

    ``negatives`` holds other samples' feature maps (M x d x h x w), or their
    pooled embeddings (M x d) when ``cfg.negatives == "pooled"``.
    """
    if spatial_feats.ndim != 3 or audio_emb.shape != spatial_feats.shape[:1]:
        raise ContractError("audio_emb (d) and spatial_feats (d x h x w) must share d")
    sim = _cos_maps(audio_emb[None], spatial_feats[None])[:, 0]
    a = F.normalize(audio_emb, dim=-1)
    if negatives.numel() == 0:
        neg = sim.new_zeros((1, 0))
    elif cfg.negatives == "pooled" and negatives.ndim == 2:
        neg = (F.normalize(negatives, dim=-1) @ a)[None]
    elif cfg.negatives == "pooled":
        neg = (F.normalize(negatives.mean(dim=(2, 3)), dim=-1) @ a)[None]
    else:
        neg = _cos_maps(audio_emb[None], negatives).mean(dim=(2, 3))
    return _subpatch_from_scores(sim, neg, cfg)


def subpatch_contrastive_batch(audio: torch.Tensor, feats: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Batched form: sample i's negatives are every other sample in the batch."""
    n = audio.shape[0]
    all_maps = _cos_maps(audio, feats)
    idx = torch.arange(n)
    own = all_maps[idx, idx]
    if cfg.negatives == "pooled":
        pooled = F.normalize(feats.mean(dim=(2, 3)), dim=-1)
        cross = F.normalize(audio, dim=-1) @ pooled.T
    else:
        cross = all_maps.mean(dim=(2, 3))
    off = ~torch.eye(n, dtype=torch.bool)
    neg = cross[off].reshape(n, n - 1)
    return _subpatch_from_scores(own, neg, cfg)


@dataclass(frozen=True)
class TrainConfig:
    loss: Literal["infonce", "subpatch"] = "infonce"
    epochs: int = 10
    seed: int = 0
    lr: float = 3e-4
    arch: Literal["conv", "vit"] = "conv"
    clip_s: float | None = None
    loss_cfg: LossConfig = LossConfig()


def _load_pairs(records: Sequence[ManifestRecord], base: Path | None, image_size: int):
    images, clips = [], []
    for rec in records:
        if rec.audio_ref is None:
            raise ConfigError(f"frame {rec.frame_id!r} has no audio reference")
        images.append(load_image(rec.resolve(rec.image_ref, base), image_size))
        clips.append(read_wav(rec.resolve(rec.audio_ref, base), rec.audio_offset_s))
    return torch.cat(images), clips


def _crop(clip: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if clip.size >= n:
        start = int(rng.integers(0, clip.size - n + 1))
        return clip[start:start + n]
    return np.pad(clip, (0, n - clip.size))


def train_toy(
    records: Sequence[ManifestRecord],
    out_path: str | Path,
    cfg: TrainConfig = TrainConfig(),
    base_dir: Path | None = None,
    log_path: str | Path | None = None,
) -> list[float]:
    """Train a toy model contrastively and write its checkpoint.

    Returns the mean loss of each epoch, also written to ``log_path`` as CSV.
    """
    if not records or all(r.audio_ref is None for r in records):
        raise ConfigError("training needs manifest records with audio references")
    if cfg.loss == "subpatch" and cfg.arch != "conv":
        raise ConfigError("the sub-patch loss needs the conv image encoder")
    if cfg.loss not in ("infonce", "subpatch"):
        raise ConfigError(f"unknown loss {cfg.loss!r}")
    if cfg.epochs < 0:
        raise ConfigError("epochs must be >= 0")

    model = ToyModel(EncoderConfig(arch=cfg.arch, seed=cfg.seed))
    images, clips = _load_pairs(records, base_dir, model.cfg.image_size)
    clip_len = cfg.clip_s or min(r.audio_len_s for r in records)
    n_samples = int(round(clip_len * SAMPLE_RATE))
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history: list[float] = []

    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(len(records), generator=gen)
        losses = []
        for start in range(0, len(records), cfg.loss_cfg.batch_size):
            idx = order[start:start + cfg.loss_cfg.batch_size]
            if idx.numel() < 2:
                continue
            wav = torch.from_numpy(np.stack([_crop(clips[i], n_samples, rng) for i in idx.tolist()]))
            audio = model.audio(wav)
            if cfg.loss == "infonce":
                loss = infonce(audio, model.image(images[idx]), cfg.loss_cfg.temperature)
            else:
                loss = subpatch_contrastive_batch(audio, model.image.features(images[idx]), cfg.loss_cfg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("epoch %d loss %.6f", epoch, history[-1])

    save_checkpoint(model, out_path, meta={"loss": cfg.loss, "epochs": cfg.epochs, "seed": cfg.seed, "lr": cfg.lr})
    if log_path is not None:
        with open(log_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss", "seed"])
            for epoch, value in enumerate(history, start=1):
                writer.writerow([epoch, repr(value), cfg.seed])
    return history
