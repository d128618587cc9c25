"""Audio containers, WAV I/O and the framing / overlap-add primitives."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

logger = logging.getLogger(__name__)


class AudioError(Exception):
    """Base class for audio I/O failures."""


class MultiChannelError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class EmptySignalError(AudioError):
    pass


@dataclass(frozen=True)
class AudioSignal:
    """Mono waveform with its sample rate. Samples are stored as float64."""

    samples: np.ndarray
    sample_rate: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected 1-D samples, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain NaN or Inf")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioSignal":
        return AudioSignal(samples, self.sample_rate)


@dataclass(frozen=True)
class FrameSpec:
    """Frame length ``L`` with a fixed hop of ``L/2``."""

    frame_length: int

    def __post_init__(self):
        L = self.frame_length
        if L < 2 or L % 2:
            raise ValueError(f"frame_length must be even and >= 2, got {L}")

    @property
    def hop(self) -> int:
        return self.frame_length // 2


def read_wav(path) -> AudioSignal:
    """Read a mono 16-bit PCM or 32-bit float WAV file into [-1, 1] floats."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    sr, data = wavfile.read(path)
    if data.ndim > 1:
        raise MultiChannelError(f"{path}: multi-channel input ({data.shape[1]} channels)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"{path}: unsupported sample format {data.dtype}")
    return AudioSignal(samples, sr)


def write_wav(signal: AudioSignal, path, subtype: str = "float32") -> int:
    """Write ``signal`` as a mono WAV file.

    Samples outside [-1, 1] are clipped; the number of clipped samples is
    returned (and logged) so callers can track it.
    """
    x = signal.samples
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if clipped:
        logger.warning("write_wav %s: clipped %d samples", path, clipped)
        x = np.clip(x, -1.0, 1.0)
    if subtype == "float32":
        data = x.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise UnsupportedEncodingError(f"unknown subtype {subtype!r}")
    try:
        wavfile.write(os.fspath(path), signal.sample_rate, data)
    except OSError as exc:
        raise AudioError(f"cannot write {path}: {exc}") from exc
    return clipped


def rms(signal) -> float:
    x = signal.samples if isinstance(signal, AudioSignal) else np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise EmptySignalError("rms of an empty signal")
    return float(np.sqrt(np.mean(x * x)))


def padded_length(n_samples: int, spec: FrameSpec) -> int:
    """Smallest length >= n_samples that tiles exactly into hop-spaced frames."""
    L, hop = spec.frame_length, spec.hop
    if n_samples <= L:
        return L
    return L + math.ceil((n_samples - L) / hop) * hop


def frame_count(n_samples: int, spec: FrameSpec) -> int:
    return (padded_length(n_samples, spec) - spec.frame_length) // spec.hop + 1


def frame_signal(x, spec: FrameSpec, window=None) -> np.ndarray:
    """Slice ``x`` into a (T, L) matrix of half-overlapping frames.

    The signal is zero-padded at the end to ``padded_length``.
    """
    x = x.samples if isinstance(x, AudioSignal) else np.asarray(x, dtype=np.float64)
    L, hop = spec.frame_length, spec.hop
    padded = np.zeros(padded_length(len(x), spec))
    padded[: len(x)] = x
    n = frame_count(len(x), spec)
    idx = np.arange(L)[None, :] + hop * np.arange(n)[:, None]
    frames = padded[idx]
    if window is not None:
        frames = frames * np.asarray(window)[None, :]
    return frames


def overlap_add(frames, spec: FrameSpec, length: int | None = None) -> np.ndarray:
    """Sum half-overlapping frames back into a waveform.

    Output length is ``(T - 1) * L/2 + L``, or ``length`` when given (trim).
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, L = frames.shape
    if L != spec.frame_length:
        raise ValueError(f"frame width {L} != frame_length {spec.frame_length}")
    hop = spec.hop
    out = np.zeros((n - 1) * hop + L if n else 0)
    for i in range(n):
        out[i * hop: i * hop + L] += frames[i]
    if length is not None:
        out = out[:length]
    return out


def bartlett_cola_window(frame_length: int) -> np.ndarray:
    """Periodic triangular window whose 50%-overlapped copies sum to one."""
    n = np.arange(frame_length)
    half = frame_length / 2
    return 1.0 - np.abs(n - half) / half
