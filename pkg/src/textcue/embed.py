"""Text and audio embedding providers.

The stub providers are deterministic stand-ins for a frozen pretrained
language-audio encoder; ``load_precomputed`` serves vectors produced elsewhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .audio import AudioSignal

EMBED_DIM = 512
LOG_FLOOR = 1e-8


class EmbeddingError(Exception):
    pass


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray
    provider_id: str
    token_sequence: np.ndarray | None = None  # (n_tokens, dim)

    @property
    def sequence(self) -> np.ndarray:
        return self.token_sequence if self.token_sequence is not None else self.vector[None]


@dataclass(frozen=True)
class AudioEmbedding:
    vector: np.ndarray
    provider_id: str
    frame_sequence: np.ndarray | None = None  # (n_frames, dim)

    @property
    def sequence(self) -> np.ndarray:
        return self.frame_sequence if self.frame_sequence is not None else self.vector[None]


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _seed_from(*keys) -> int:
    return int.from_bytes(hashlib.sha256(repr(keys).encode()).digest()[:8], "little")


class HashTextEmbedder:
    """Whitespace tokens mapped to seeded Gaussian vectors; pooled by mean."""

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.provider_id = f"hash-text-d{dim}-s{seed}"

    def token_vector(self, token: str) -> np.ndarray:
        r = np.random.default_rng(_seed_from("text", self.seed, token))
        return r.standard_normal(self.dim) / np.sqrt(self.dim)

    def __call__(self, prompt: str) -> TextEmbedding:
        tokens = prompt.split()
        if not tokens:
            raise EmbeddingError("empty prompt")
        seq = np.stack([self.token_vector(t) for t in tokens])
        return TextEmbedding(_unit(seq.mean(axis=0)), self.provider_id, seq)


class FilterbankAudioEmbedder:
    """64-band magnitude filterbank log-energies projected to ``dim``.

    Analysis uses 32 ms Hann windows with a 16 ms hop.
    """

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0, n_bands: int = 64,
                 window_ms: float = 32.0):
        self.dim = dim
        self.seed = seed
        self.n_bands = n_bands
        self.window_ms = window_ms
        self.provider_id = f"fbank-audio-d{dim}-b{n_bands}-s{seed}"
        r = np.random.default_rng(_seed_from("audio-proj", seed, n_bands, dim))
        self.projection = r.standard_normal((n_bands, dim)) / np.sqrt(n_bands)
        self._banks = {}

    def _bank(self, n_fft: int) -> np.ndarray:
        if n_fft not in self._banks:
            n_bins = n_fft // 2 + 1
            edges = np.linspace(0, n_bins - 1, self.n_bands + 2)
            bins = np.arange(n_bins)[None, :]
            lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
            up = (bins - lo) / np.maximum(mid - lo, 1e-9)
            down = (hi - bins) / np.maximum(hi - mid, 1e-9)
            self._banks[n_fft] = np.clip(np.minimum(up, down), 0.0, None)
        return self._banks[n_fft]

    def window_length(self, sample_rate: int) -> int:
        return int(round(self.window_ms * 1e-3 * sample_rate))

    def log_energies(self, signal: AudioSignal) -> np.ndarray:
        n = self.window_length(signal.sample_rate)
        x = signal.samples
        if len(x) < n:
            raise EmbeddingError(f"signal shorter than one {self.window_ms} ms window")
        hop = n // 2
        count = 1 + (len(x) - n) // hop
        idx = np.arange(n)[None, :] + hop * np.arange(count)[:, None]
        frames = x[idx] * np.hanning(n)[None, :]
        mag = np.abs(np.fft.rfft(frames, axis=1))
        return np.log(LOG_FLOOR + mag @ self._bank(n).T)

    def __call__(self, signal: AudioSignal) -> AudioEmbedding:
        seq = self.log_energies(signal) @ self.projection
        return AudioEmbedding(_unit(seq.mean(axis=0)), self.provider_id, seq)


class PrecomputedProvider:
    """Serves stored vectors by key. Strings are looked up verbatim first, then
    by the SHA-256 hex digest of their UTF-8 bytes."""

    def __init__(self, table: dict, provider_id: str = "precomputed"):
        dims = {v.shape[-1] for v in table.values()}
        if len(dims) > 1:
            raise EmbeddingError(f"mixed embedding dimensions {sorted(dims)}")
        self.table = table
        self.dim = dims.pop() if dims else 0
        self.provider_id = provider_id

    def lookup(self, key: str) -> np.ndarray:
        if key in self.table:
            return self.table[key]
        hashed = hashlib.sha256(key.encode("utf-8")).hexdigest()
        if hashed in self.table:
            return self.table[hashed]
        raise KeyError(f"no precomputed embedding for key {key!r}")

    def __call__(self, key) -> TextEmbedding:
        if isinstance(key, AudioSignal):
            clip = key.meta.get("clip_id")
            if clip is None:
                raise KeyError("audio signal carries no clip_id for precomputed lookup")
            v = self.lookup(clip)
            seq = v if v.ndim == 2 else None
            return AudioEmbedding(_unit(v.mean(0) if v.ndim == 2 else v), self.provider_id, seq)
        v = self.lookup(key)
        seq = v if v.ndim == 2 else None
        return TextEmbedding(_unit(v.mean(0) if v.ndim == 2 else v), self.provider_id, seq)


def load_precomputed(path, provider_id: str | None = None) -> PrecomputedProvider:
    """Load a JSON Lines file of ``{"key": ..., "vector": [...]}`` records.

    ``vector`` may be a flat list or a list of per-token/per-frame lists.
    """
    table = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            v = np.asarray(rec["vector"], dtype=np.float64)
            if v.ndim not in (1, 2) or v.size == 0:
                raise EmbeddingError(f"{path}:{n}: vector must be a non-empty 1-D or 2-D array")
            table[str(rec["key"])] = v
    return PrecomputedProvider(table, provider_id or f"precomputed:{path}")


def save_precomputed(table: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in table.items():
            fh.write(json.dumps({"key": k, "vector": np.asarray(v).tolist()}) + "\n")


@dataclass
class Providers:
    """The text/audio provider pair used by the matcher and the extractor."""

    text: object
    audio: object

    @classmethod
    def stub(cls, dim: int = EMBED_DIM, seed: int = 0) -> "Providers":
        return cls(HashTextEmbedder(dim, seed), FilterbankAudioEmbedder(dim, seed))


def embed_text(prompt: str, provider) -> TextEmbedding:
    if not prompt.strip():
        raise EmbeddingError("empty prompt")
    return provider(prompt)


def embed_audio(signal: AudioSignal, provider) -> AudioEmbedding:
    return provider(signal)
