"""Toy audio and image encoders with the internals localizers consume.

Three encoders share one embedding space:

* ``ConvImageEncoder``: strided conv blocks down to a 14x14 map, projected
  per-patch to the embedding dim and average-pooled.
* ``ViTImageEncoder``: patch embedding plus a class token and a few
  self-attention blocks that keep their attention probabilities.
* ``AudioEncoder``: log-mel spectrogram into a small conv stack.

Layers are reachable by stable dotted ids such as ``"block3.norm1"``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .audio import MelConfig, log_mel
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class EncoderConfig:
    arch: Literal["conv", "vit"] = "conv"
    embed_dim: int = 64
    image_size: int = 224
    conv_channels: tuple[int, ...] = (8, 16, 32, 64)
    bias: bool = True
    patch_size: int = 16
    vit_dim: int = 32
    vit_layers: int = 2
    vit_heads: int = 2
    audio_channels: tuple[int, ...] = (16, 32, 64)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "audio_channels", tuple(self.audio_channels))
        if self.arch not in ("conv", "vit"):
            raise ConfigError(f"unknown encoder arch {self.arch!r}")
        if not 1 <= len(self.conv_channels) <= 4:
            raise ConfigError("conv image encoder takes between 1 and 4 blocks")
        if not (1 <= self.vit_layers <= 2 and 1 <= self.vit_heads <= 2):
            raise ConfigError("toy ViT is limited to 2 layers x 2 heads")
        if self.vit_dim % self.vit_heads:
            raise ConfigError("vit_dim must be divisible by vit_heads")

    @property
    def default_gradcam_layer(self) -> str:
        return f"block{len(self.conv_channels) - 1}.norm1"

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, raw: dict) -> "EncoderConfig":
        return cls(**raw)


@dataclass(frozen=True, eq=False)
class SpatialFeatureMap:
    values: np.ndarray  # channels x grid_h x grid_w

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ContractError("feature map must be channels x grid_h x grid_w")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("feature map has non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def grid_h(self) -> int:
        return self.values.shape[1]

    @property
    def grid_w(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    l2_normalized: bool = True

    def __post_init__(self) -> None:
        if self.values.ndim != 1:
            raise ContractError("embedding must be a vector")
        if self.l2_normalized and abs(float(np.linalg.norm(self.values)) - 1.0) > 1e-5:
            raise ContractError("embedding flagged normalized but its norm is not 1")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class AttentionStack:
    maps: np.ndarray  # layer x head x tokens x tokens

    def __post_init__(self) -> None:
        if self.maps.ndim != 4 or self.maps.shape[2] != self.maps.shape[3]:
            raise ContractError("attention stack must be layer x head x tokens x tokens")

    @property
    def layers(self) -> int:
        return self.maps.shape[0]

    @property
    def heads(self) -> int:
        return self.maps.shape[1]

    @property
    def tokens(self) -> int:
        return self.maps.shape[2]


def _groups(channels: int) -> int:
    return math.gcd(channels, 4)


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, bias: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=bias)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=bias)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class ConvImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c_in = 3
        for i, c_out in enumerate(cfg.conv_channels):
            setattr(self, f"block{i}", ConvBlock(c_in, c_out, cfg.bias))
            c_in = c_out
        self.proj = nn.Conv2d(c_in, cfg.embed_dim, 1, bias=cfg.bias)

    @property
    def grid(self) -> int:
        return self.cfg.image_size // 2 ** len(self.cfg.conv_channels)

    def check_input(self, image: torch.Tensor) -> None:
        stride = 2 ** len(self.cfg.conv_channels)
        h, w = image.shape[-2:]
        if image.ndim != 4 or image.shape[1] != 3 or h % stride or w % stride:
            raise ContractError(f"conv encoder expects Bx3xHxW with H, W divisible by {stride}, got {tuple(image.shape)}")

    def features(self, image: torch.Tensor) -> torch.Tensor:
        """Per-patch embedding-space features, ``B x d x h x w``."""
        self.check_input(image)
        x = image
        for i in range(len(self.cfg.conv_channels)):
            x = getattr(self, f"block{i}")(x)
        return self.proj(x)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.features(image).mean(dim=(2, 3)), dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.attn: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        self.attn = attn
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class ViTBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.image_size % cfg.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        n_patches = (cfg.image_size // cfg.patch_size) ** 2
        self.patch = nn.Conv2d(3, cfg.vit_dim, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.randn(1, 1, cfg.vit_dim) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, n_patches + 1, cfg.vit_dim) * 0.02)
        for i in range(cfg.vit_layers):
            setattr(self, f"block{i}", ViTBlock(cfg.vit_dim, cfg.vit_heads))
        self.norm = nn.LayerNorm(cfg.vit_dim)
        self.head = nn.Linear(cfg.vit_dim, cfg.embed_dim)

    @property
    def grid(self) -> int:
        return self.cfg.image_size // self.cfg.patch_size

    def blocks(self) -> list[ViTBlock]:
        return [getattr(self, f"block{i}") for i in range(self.cfg.vit_layers)]

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3 or tuple(image.shape[-2:]) != (self.cfg.image_size,) * 2:
            raise ContractError(
                f"ViT expects Bx3x{self.cfg.image_size}x{self.cfg.image_size}, got {tuple(image.shape)}"
            )
        x = self.patch(image).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos
        for block in self.blocks():
            x = block(x)
        return F.normalize(self.head(self.norm(x[:, 0])), dim=-1)

    def attention_maps(self) -> list[torch.Tensor]:
        maps = [block.attn.attn for block in self.blocks()]
        if any(m is None for m in maps):
            raise ContractError("attention requested before a forward pass")
        return maps


class AudioEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, mel: MelConfig = MelConfig()):
        super().__init__()
        self.mel = mel
        layers: list[nn.Module] = []
        c_in = 1
        for c_out in cfg.audio_channels:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False), nn.ReLU()]
            c_in = c_out
        self.convs = nn.Sequential(*layers)
        # Centering the pooled features removes the shared ReLU offset that
        # otherwise makes every clip look alike at initialization.
        self.pool_norm = nn.LayerNorm(c_in)
        self.head = nn.Linear(c_in, cfg.embed_dim)

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        """``B x samples`` waveform to ``B x d`` unit-norm embeddings."""
        spec = log_mel(waveform, self.mel) / 10.0
        x = self.convs(spec.unsqueeze(1)).mean(dim=(2, 3))
        return F.normalize(self.head(self.pool_norm(x)), dim=-1)


class ToyModel(nn.Module):
    """An image encoder and an audio encoder sharing one embedding space."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.image = ConvImageEncoder(cfg) if cfg.arch == "conv" else ViTImageEncoder(cfg)
            self.audio = AudioEncoder(cfg)


def _as_batch(image: np.ndarray | torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """HxWx3 array (or Bx3xHxW tensor) to a Bx3xHxW tensor."""
    if isinstance(image, torch.Tensor) and image.ndim == 4:
        return image.to(dtype)
    arr = torch.as_tensor(np.asarray(image), dtype=dtype)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ContractError(f"expected an HxWx3 image, got shape {tuple(arr.shape)}")
    return arr.permute(2, 0, 1).unsqueeze(0)


def _dtype_of(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def image_encode_conv(model: ConvImageEncoder, image) -> tuple[SpatialFeatureMap, Embedding]:
    x = _as_batch(image, _dtype_of(model))
    with torch.no_grad():
        feats = model.features(x)
    grid = feats[0].double().numpy()
    emb = F.normalize(feats.mean(dim=(2, 3)), dim=-1)[0].double().numpy()
    return SpatialFeatureMap(grid), Embedding(emb)


def image_encode_vit(model: ViTImageEncoder, image) -> tuple[Embedding, AttentionStack]:
    x = _as_batch(image, _dtype_of(model))
    with torch.no_grad():
        emb = model(x)
    maps = torch.stack([m[0] for m in model.attention_maps()]).double().numpy()
    return Embedding(emb[0].double().numpy()), AttentionStack(maps)


def audio_encode(model: AudioEncoder, waveform, len_s: float | None = None) -> Embedding:
    wav = torch.as_tensor(np.asarray(waveform), dtype=_dtype_of(model))
    if wav.ndim != 1 or wav.numel() == 0:
        raise ContractError("audio_encode expects a non-empty mono waveform")
    if len_s is not None and abs(wav.numel() - len_s * model.mel.sample_rate) > model.mel.hop_length:
        raise ContractError(f"waveform has {wav.numel()} samples, expected {len_s} s at {model.mel.sample_rate} Hz")
    with torch.no_grad():
        emb = model(wav.unsqueeze(0))
    return Embedding(emb[0].double().numpy())


class CaptureSession:
    """Single-use forward/backward capture of one named layer's output.

    ``perturb`` (an optional tensor) is added to the captured activation
    during the forward pass, which lets finite-difference checks probe the
    downstream function.
    """

    def __init__(self, model: nn.Module, target_layer_id: str):
        try:
            self.layer = model.get_submodule(target_layer_id)
        except AttributeError:
            raise ConfigError(f"capture layer {target_layer_id!r} not found") from None
        self.model = model
        self.target_layer_id = target_layer_id
        self._activation: torch.Tensor | None = None
        self._gradients: torch.Tensor | None = None

    def forward(self, *inputs, perturb: torch.Tensor | None = None) -> torch.Tensor:
        if self._activation is not None:
            raise ContractError("capture sessions are single-use")

        def hook(_module, _args, output):
            if perturb is not None:
                output = output + perturb
            self._activation = output
            return output

        handle = self.layer.register_forward_hook(hook)
        try:
            with torch.enable_grad():
                return self.model(*inputs)
        finally:
            handle.remove()

    def backward(self, objective: torch.Tensor) -> torch.Tensor:
        if self._activation is None:
            raise ContractError("backward called before forward")
        if objective.numel() != 1:
            raise ContractError("objective must be a scalar")
        if objective.requires_grad:
            (grad,) = torch.autograd.grad(objective, self._activation, allow_unused=True, retain_graph=True)
        else:
            grad = None
        self._gradients = torch.zeros_like(self._activation) if grad is None else grad
        return self._gradients

    @property
    def activations(self) -> torch.Tensor:
        if self._activation is None:
            raise ContractError("no forward pass yet")
        return self._activation.detach()

    @property
    def gradients(self) -> torch.Tensor:
        if self._gradients is None:
            raise ContractError("no backward pass yet")
        return self._gradients


def load_image(path: str | Path, size: int = 224) -> torch.Tensor:
    """RGB image file to a 1x3xSxS tensor scaled to roughly [-1, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy((arr - 0.5) / 0.5).permute(2, 0, 1).unsqueeze(0)


# Checkpoint container: b"SLCK", u32 version, u64 header length, JSON header,
# then each tensor as float32 LE at the offset the header records.
CKPT_MAGIC = b"SLCK"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sIQ")


def save_checkpoint(model: ToyModel, path: str | Path, meta: dict | None = None) -> None:
    state = model.state_dict()
    index, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name].detach().cpu().numpy(), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"format": "soundloc-checkpoint", "version": CKPT_VERSION, "config": model.cfg.to_json(),
         "meta": meta or {}, "tensors": index},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        prefix = fh.read(_CKPT_PREFIX.size)
        if len(prefix) < _CKPT_PREFIX.size:
            raise ContractError(f"{path}: truncated checkpoint")
        magic, version, length = _CKPT_PREFIX.unpack(prefix)
        if magic != CKPT_MAGIC:
            raise ContractError(f"{path}: not a soundloc checkpoint")
        if version != CKPT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(length).decode("utf-8"))
    header["_payload_start"] = _CKPT_PREFIX.size + length
    return header


def load_checkpoint(path: str | Path) -> ToyModel:
    header = read_checkpoint_header(path)
    model = ToyModel(EncoderConfig.from_json(header["config"]))
    data = Path(path).read_bytes()[header["_payload_start"]:]
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = entry["offset"] + 4 * count
        if end > len(data):
            raise ContractError(f"{path}: tensor {entry['name']} runs past the end of the file")
        arr = np.frombuffer(data[entry["offset"]:end], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model
