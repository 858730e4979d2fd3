"""Mono 16 kHz audio I/O and the log-mel front end."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    n_mels: int = 64
    win_length: int = 400  # 25 ms
    hop_length: int = 160  # 10 ms
    n_fft: int = 512
    log_floor: float = 1e-10
    f_min: float = 0.0
    f_max: float | None = None


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-style filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    f_max = cfg.f_max or cfg.sample_rate / 2
    n_freqs = cfg.n_fft // 2 + 1
    freqs = np.linspace(0, cfg.sample_rate / 2, n_freqs)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(waveform: torch.Tensor, cfg: MelConfig = MelConfig()) -> torch.Tensor:
    """``(..., samples)`` waveform to ``(..., n_mels, frames)`` log-mel power."""
    if waveform.shape[-1] == 0:
        raise ContractError("empty waveform")
    window = torch.hann_window(cfg.win_length, dtype=waveform.dtype)
    spec = torch.stft(
        waveform, n_fft=cfg.n_fft, hop_length=cfg.hop_length, win_length=cfg.win_length,
        window=window, center=True, return_complex=True,
    )
    power = spec.real**2 + spec.imag**2
    fb = torch.as_tensor(mel_filterbank(cfg), dtype=waveform.dtype)
    mel = torch.matmul(fb, power)
    return torch.log(torch.clamp(mel, min=cfg.log_floor))


def read_wav(path: str | Path, offset_s: float = 0.0, length_s: float | None = None) -> np.ndarray:
    """Read a 16-bit PCM WAV as float32 in [-1, 1], mixing down to mono."""
    with wave.open(str(path), "rb") as fh:
        rate, channels, width = fh.getframerate(), fh.getnchannels(), fh.getsampwidth()
        if width != 2:
            raise ContractError(f"{path}: only 16-bit PCM is supported")
        start = int(round(offset_s * rate))
        fh.setpos(min(start, fh.getnframes()))
        count = fh.getnframes() - start if length_s is None else int(round(length_s * rate))
        raw = fh.readframes(max(count, 0))
    data = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    data = data.reshape(-1, channels).mean(axis=1)
    if rate != SAMPLE_RATE:
        raise ContractError(f"{path}: expected {SAMPLE_RATE} Hz audio, found {rate} Hz")
    return data


def write_wav(path: str | Path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())
