"""Normalized log-magnitude Mel spectrogram.

Hann window 2048, hop 512, 229 HTK-scale triangular filters between 30 Hz
and 8 kHz, natural-log compression, and a fixed affine map into [0, 1] so
every recording is scaled identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .arrays import load_arrays, save_arrays
from .constants import HOP_LENGTH, HOP_SECONDS, N_FFT, N_MELS, SAMPLE_RATE
from .dataio import AudioClip

FMIN = 30.0
FMAX = 8000.0
LOG_EPS = 1e-10


@dataclass
class Spectrogram:
    values: np.ndarray  # (T, n_bins), entries in [0, 1]
    hop_seconds: float = HOP_SECONDS

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def save(self, path) -> Path:
        header = {"kind": "spectrogram", "T": self.n_frames, "n_bins": self.n_bins, "hop_seconds": self.hop_seconds}
        return save_arrays(path, header, values=self.values)

    @classmethod
    def load(cls, path) -> "Spectrogram":
        header, arrays = load_arrays(path)
        if header.get("kind") != "spectrogram":
            raise ValueError(f"{path}: not a spectrogram container")
        return cls(arrays["values"], float(header["hop_seconds"]))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> np.ndarray:
    """Triangular filters with unit peak, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def stft_magnitude(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP_LENGTH) -> np.ndarray:
    """Centered STFT magnitude, shape ``(T, n_fft // 2 + 1)`` with ``T = 1 + len // hop``."""
    x = np.asarray(samples, dtype=np.float64)
    pad = n_fft // 2
    # reflection needs more samples than the pad width
    mode = "reflect" if len(x) > pad else "constant"
    x = np.pad(x, pad, mode=mode)
    n_frames = 1 + (len(x) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]
    window = get_window("hann", n_fft, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, axis=1))


def log_mel(samples: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    """Un-normalized ``log(mel + eps)``, shape ``(T, N_MELS)``."""
    mel = stft_magnitude(samples) @ mel_filterbank().T
    return np.log(mel + eps)


@lru_cache(maxsize=1)
def reference_peak() -> float:
    """Largest Mel-band magnitude produced by a unit-amplitude sine at any band center."""
    t = np.arange(N_FFT) / SAMPLE_RATE
    best = 0.0
    fb = mel_filterbank()
    window = get_window("hann", N_FFT, fftbins=True)
    for f in mel_center_frequencies():
        frame = np.sin(2 * np.pi * f * t)
        mag = np.abs(np.fft.rfft(frame * window))
        best = max(best, float((fb @ mag).max()))
    return best


def normalize_log_mel(logmel: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    """Map ``log(eps)`` to 0 and the log of a full-scale sine's peak to 1, clipping outside."""
    lo = np.log(eps)
    hi = np.log(reference_peak() + eps)
    return np.clip((logmel - lo) / (hi - lo), 0.0, 1.0)


def mel_spectrogram(clip: AudioClip, eps: float = LOG_EPS) -> Spectrogram:
    """Normalized log-Mel spectrogram of a 16 kHz clip, values in [0, 1].

    ``eps`` is the log floor. It sets the dynamic range of the [0, 1] map:
    the reference peak is about 1e3, so ``eps=0.1`` keeps roughly 80 dB.
    """
    if not eps > 0:
        raise ValueError(f"log floor must be positive, got {eps}")
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate} Hz; resample first")
    if len(clip.samples) < 1:
        raise ValueError("empty clip")
    values = normalize_log_mel(log_mel(clip.samples, eps), eps).astype(np.float32)
    return Spectrogram(values, HOP_SECONDS)
