"""Synthetic paired text/speech corpus and SDR-controlled mixing.

Each token of a small vocabulary renders to a narrowband chirp around its own
centre frequency. A speaker imposes an amplitude modulation at their pitch
(harmonic weights set the modulation shape) and favours tokens near their own
spectral register, the way a presenter keeps returning to their own topic.
A prompt is a shuffled subset of the tokens the target speaker actually
uttered, so it is related to the speech but not aligned with it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .audio import AudioSignal, rms, write_wav, read_wav

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class CorpusError(Exception):
    pass


def _rng(*keys) -> np.random.Generator:
    """Generator seeded from an arbitrary tuple of ints/strings."""
    digest = hashlib.sha256(repr(keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class TokenRule:
    center: float  # Hz
    slope: float  # relative frequency change across the token
    attack: float  # fraction of the token spent fading in/out
    bandwidth: float  # depth of the speaker modulation, 0..1


class TokenVocabulary:
    """Ordered token strings with one deterministic render rule per token."""

    def __init__(self, size: int = 64, sample_rate: int = 8000, seed: int = 0,
                 f_min: float = 250.0, f_max: float | None = None):
        if size < 2:
            raise ValueError("vocabulary needs at least two tokens")
        self.size = size
        self.sample_rate = sample_rate
        self.seed = seed
        syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
        words = []
        for i in range(size):
            a = syllables[i % len(syllables)]
            b = syllables[(7 * i + 3) % len(syllables)]
            c = _VOWELS[(i // len(syllables)) % len(_VOWELS)] if i >= len(syllables) else ""
            words.append(a + b + c)
        self.tokens = words
        self._index = {w: i for i, w in enumerate(words)}

        limit = sample_rate / 2 / 1.2
        f_max = min(f_max or limit, limit)
        grid = np.geomspace(f_min, f_max * 0.92, size)
        step = int(round(size * 0.4)) | 1
        while np.gcd(step, size) != 1:
            step += 2
        spacing = np.diff(np.log(grid)).mean() if size > 1 else 0.1
        self.rules = []
        for i in range(size):
            r = _rng("token", seed, i)
            center = grid[(i * step) % size] * float(np.exp(r.uniform(-0.2, 0.2) * spacing))
            self.rules.append(TokenRule(
                center=float(center),
                slope=float(r.uniform(-0.06, 0.06)),
                attack=float(r.uniform(0.08, 0.25)),
                bandwidth=float(r.uniform(0.6, 0.9)),
            ))

    def __len__(self):
        return self.size

    def __contains__(self, token):
        return token in self._index

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise CorpusError(f"token {token!r} not in vocabulary") from None

    def rule(self, token: str) -> TokenRule:
        return self.rules[self.index(token)]


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    pitch_base: float
    harmonic_weights: tuple
    register: float = 1000.0  # Hz, centre of the speaker's preferred token band

    @classmethod
    def from_id(cls, speaker_id: str, seed: int = 0, n_harmonics: int = 4,
                pitch_range=(70.0, 320.0), band=(250.0, 3333.0)):
        """Deterministic profile for ``speaker_id``.

        Ids ending in digits place (register, pitch) on a seeded R2
        low-discrepancy sequence over that number, so any run of consecutive
        speakers is spread across the band; other ids are drawn at random.
        """
        r = _rng("speaker", seed, speaker_id)
        digits = speaker_id[len(speaker_id.rstrip("0123456789")):]
        if digits:
            off = _rng("speaker-offset", seed).uniform(size=2)
            k = int(digits)
            u_reg = (off[0] + k * 0.7548776662466927) % 1.0
            u_pitch = (off[1] + k * 0.5698402909980532) % 1.0
        else:
            u_reg, u_pitch = r.uniform(size=2)
        u_reg = float(np.clip(u_reg + r.uniform(-0.02, 0.02), 0.0, 1.0))
        pitch = float(np.exp(np.log(pitch_range[0]) + u_pitch * np.log(pitch_range[1] / pitch_range[0])))
        w = r.gamma(1.0, 1.0, n_harmonics) * (0.7 ** np.arange(n_harmonics))
        w = w / w.sum()
        lo, hi = np.log(band[0]), np.log(band[1] * 0.9)
        margin = 0.12 * (hi - lo)
        register = float(np.exp(lo + margin + u_reg * (hi - lo - 2 * margin)))
        return cls(speaker_id, pitch, tuple(float(v) for v in w), register)


def render_utterance(tokens, profile: SpeakerProfile, duration: float,
                     sample_rate: int, seed: int,
                     vocabulary: TokenVocabulary | None = None,
                     am_depth: float = 0.5) -> AudioSignal:
    """Render ``tokens`` spoken by ``profile`` into a waveform of ``duration`` s.

    Tokens are laid end to end. Each is a chirp at the token's centre frequency,
    amplitude-modulated by the speaker's pitch pulse train and faded in and out.
    """
    tokens = list(tokens)
    if not tokens:
        raise CorpusError("cannot render an empty token list")
    if duration < 0.25:
        raise CorpusError(f"duration must be >= 0.25 s, got {duration}")
    if vocabulary is None:
        vocabulary = TokenVocabulary(sample_rate=sample_rate)
    rules = [vocabulary.rule(t) for t in tokens]

    n = int(round(duration * sample_rate))
    r = _rng("utterance", seed, profile.speaker_id, tuple(tokens))
    # Boundaries jittered around an even split.
    cuts = np.linspace(0, n, len(tokens) + 1)
    inner = cuts[1:-1] + r.uniform(-0.2, 0.2, len(tokens) - 1) * (n / len(tokens))
    bounds = np.concatenate([[0], np.sort(inner), [n]]).astype(int)

    t = np.arange(n) / sample_rate
    # Slow intonation drift of the pitch over the utterance.
    drift = r.uniform(-0.08, 0.08)
    pitch = profile.pitch_base * (1.0 + drift * (t / max(duration, 1e-9) - 0.5))
    pitch_phase = 2 * np.pi * np.cumsum(pitch) / sample_rate + r.uniform(0, 2 * np.pi)
    w = np.asarray(profile.harmonic_weights)
    pulse = sum(w[h] * np.cos((h + 1) * pitch_phase) for h in range(len(w)))

    out = np.zeros(n)
    for rule, a, b in zip(rules, bounds[:-1], bounds[1:]):
        m = b - a
        if m <= 0:
            continue
        u = np.arange(m) / max(m - 1, 1)
        freq = rule.center * (1.0 + rule.slope * (u - 0.5))
        phase = 2 * np.pi * np.cumsum(freq) / sample_rate + r.uniform(0, 2 * np.pi)
        ramp = max(int(rule.attack * m), 1)
        env = np.ones(m)
        fade = np.sin(0.5 * np.pi * np.arange(ramp) / ramp) ** 2
        env[:ramp] = fade
        env[m - ramp:] = np.minimum(env[m - ramp:], fade[::-1])
        mod = 1.0 + am_depth * rule.bandwidth * pulse[a:b]
        out[a:b] = r.uniform(0.7, 1.0) * env * mod * np.sin(phase)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.9 / peak
    return AudioSignal(out, sample_rate)


def make_noise(n: int, sample_rate: int, seed: int) -> AudioSignal:
    """Seeded low-pass-tilted Gaussian noise."""
    r = _rng("noise", seed)
    white = r.standard_normal(n + 64)
    kernel = np.exp(-np.arange(64) / r.uniform(2.0, 12.0))
    colored = np.convolve(white, kernel / kernel.sum(), mode="valid")[:n]
    colored /= np.max(np.abs(colored)) + 1e-12
    return AudioSignal(0.5 * colored, sample_rate)


def alpha_for_sdr(target: AudioSignal, interferer: AudioSignal, sdr_db: float) -> float:
    """Scale for ``interferer`` so that target-to-scaled-interferer SDR is ``sdr_db``."""
    rt, ri = rms(target), rms(interferer)
    if rt <= 0 or ri <= 0:
        raise CorpusError("alpha_for_sdr needs non-zero energy in both signals")
    return rt / (ri * 10.0 ** (sdr_db / 20.0))


def achieved_sdr(target: AudioSignal, scaled: np.ndarray) -> float:
    return 20.0 * np.log10(rms(target) / rms(scaled))


@dataclass
class MixtureExample:
    target: AudioSignal
    interferers: list
    alphas: list
    mixture: AudioSignal
    prompt: str
    prompt_tokens: list
    speaker_ids: list = field(default_factory=list)
    requested_sdrs: list = field(default_factory=list)
    noise: AudioSignal | None = None
    noise_alpha: float | None = None
    noise_sdr: float | None = None
    target_tokens: list = field(default_factory=list)
    interferer_tokens: list = field(default_factory=list)
    id: str = ""

    def reconstruction_error(self) -> float:
        x = self.target.samples.copy()
        for a, v in zip(self.alphas, self.interferers):
            x += a * v.samples
        if self.noise is not None:
            x += self.noise_alpha * self.noise.samples
        return float(np.max(np.abs(self.mixture.samples - x))) if x.size else 0.0


def make_mixture(target: AudioSignal, interferers, sdrs, noise: AudioSignal | None = None,
                 noise_sdr: float | None = None, prompt: str = "",
                 prompt_tokens=(), **extra) -> MixtureExample:
    """Mix ``target`` with scaled interferers (and optional noise) at requested SDRs.

    Noise SDR is measured against the target, like the interferers.
    """
    interferers = list(interferers)
    sdrs = [float(s) for s in sdrs]
    if len(sdrs) != len(interferers):
        raise CorpusError(f"{len(interferers)} interferers but {len(sdrs)} SDR values")
    if not interferers and noise is None:
        raise CorpusError("a mixture needs at least one interferer or noise")
    others = interferers + ([noise] if noise is not None else [])
    for sig in others:
        if len(sig) != len(target) or sig.sample_rate != target.sample_rate:
            raise CorpusError("all constituent signals must share length and sample rate")
    if noise is not None and noise_sdr is None:
        raise CorpusError("noise given without noise_sdr")

    alphas = [alpha_for_sdr(target, v, s) for v, s in zip(interferers, sdrs)]
    x = target.samples.copy()
    for a, v in zip(alphas, interferers):
        x += a * v.samples
    noise_alpha = None
    if noise is not None:
        noise_alpha = alpha_for_sdr(target, noise, noise_sdr)
        x += noise_alpha * noise.samples
    return MixtureExample(
        target=target, interferers=interferers, alphas=alphas,
        mixture=AudioSignal(x, target.sample_rate), prompt=prompt,
        prompt_tokens=list(prompt_tokens), requested_sdrs=sdrs, noise=noise,
        noise_alpha=noise_alpha, noise_sdr=noise_sdr, **extra)


@dataclass
class CorpusConfig:
    sample_rate: int = 8000
    duration: float = 1.0
    vocab_size: int = 64
    n_interferers: int = 1
    examples: dict = field(default_factory=lambda: {"train": 2000, "valid": 200, "test": 200})
    speakers: object = field(default_factory=lambda: {"train": 50, "valid": 5, "test": 4})
    tokens_per_utterance: tuple = (3, 5)
    prompt_fraction: float = 0.5
    sdr_range: tuple = (-3.0, 3.0)
    noise: bool = False
    noise_sdr_range: tuple = (-3.0, 3.0)
    noise_files: list = field(default_factory=list)
    token_overlap: bool = False
    peak_limit: float = 0.99
    pitch_range: tuple = (70.0, 320.0)
    token_band: tuple = (250.0, 3333.0)
    am_depth: float = 0.5
    register_spread: float = 0.15

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise CorpusError(f"unknown corpus config keys: {sorted(unknown)}")
        cfg = cls(**known)
        for key in ("tokens_per_utterance", "sdr_range", "noise_sdr_range", "pitch_range", "token_band"):
            setattr(cfg, key, tuple(getattr(cfg, key)))
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("tokens_per_utterance", "sdr_range", "noise_sdr_range", "pitch_range", "token_band"):
            d[key] = list(d[key])
        return d


def make_vocabulary(cfg: CorpusConfig, seed: int) -> TokenVocabulary:
    return TokenVocabulary(cfg.vocab_size, cfg.sample_rate, seed, *cfg.token_band)


def speaker_pools(cfg: CorpusConfig) -> dict:
    """Disjoint speaker-id lists per split."""
    counts = cfg.speakers
    active = [s for s in SPLITS if cfg.examples.get(s, 0) > 0]
    if isinstance(counts, int):
        total = counts
        if total < len(active):
            raise CorpusError(f"{total} speakers cannot fill {len(active)} disjoint pools")
        weights = np.array([cfg.examples[s] for s in active], dtype=float)
        raw = 1 + np.floor((total - len(active)) * weights / weights.sum()).astype(int)
        raw[0] += total - raw.sum()
        counts = dict(zip(active, raw.tolist()))
    for s in active:
        if counts.get(s, 0) < 1:
            raise CorpusError(f"split {s!r} has examples but no speakers")
    pools, start = {}, 0
    for s in SPLITS:
        k = int(counts.get(s, 0))
        pools[s] = [f"spk{start + j:03d}" for j in range(k)]
        start += k
    return pools


def _draw_example(cfg: CorpusConfig, vocab: TokenVocabulary, pool: list, seed: int,
                  split: str, index: int) -> MixtureExample:
    r = _rng("example", seed, split, index)
    n_spk = cfg.n_interferers + 1
    replace = len(pool) < n_spk
    speakers = [pool[i] for i in r.choice(len(pool), n_spk, replace=replace)]
    lo, hi = cfg.tokens_per_utterance

    profiles = [SpeakerProfile.from_id(s, seed, pitch_range=cfg.pitch_range,
                                       band=cfg.token_band) for s in speakers]
    centers = np.log([rule.center for rule in vocab.rules])

    def pick_tokens(profile, exclude):
        allowed = np.array([i for i in range(len(vocab)) if i not in exclude])
        if cfg.register_spread > 0:
            p = np.exp(-0.5 * ((centers[allowed] - np.log(profile.register)) / cfg.register_spread) ** 2)
            p = p + 1e-3 * p.max()
            p /= p.sum()
        else:
            p = None
        k = int(r.integers(lo, hi + 1))
        return [vocab.tokens[i] for i in r.choice(allowed, k, replace=False, p=p)]

    target_tokens = pick_tokens(profiles[0], set())
    n_prompt = max(1, int(round(cfg.prompt_fraction * len(target_tokens))))
    n_prompt = min(n_prompt, len(target_tokens) - 1) if len(target_tokens) > 1 else 1
    prompt_tokens = [target_tokens[i] for i in r.permutation(len(target_tokens))[:n_prompt]]
    exclude = set() if cfg.token_overlap else {vocab.index(t) for t in prompt_tokens}
    interferer_tokens = [pick_tokens(p, exclude) for p in profiles[1:]]
    utt_seed = int(r.integers(2 ** 31))
    target = render_utterance(target_tokens, profiles[0], cfg.duration, cfg.sample_rate,
                              utt_seed, vocab, cfg.am_depth)
    interferers = [render_utterance(toks, p, cfg.duration, cfg.sample_rate, utt_seed + 1 + j, vocab,
                                    cfg.am_depth)
                   for j, (toks, p) in enumerate(zip(interferer_tokens, profiles[1:]))]
    sdrs = [float(v) for v in r.uniform(*cfg.sdr_range, cfg.n_interferers)]
    noise = noise_sdr = None
    if cfg.noise:
        n = len(target)
        if cfg.noise_files:
            src = read_wav(cfg.noise_files[int(r.integers(len(cfg.noise_files)))])
            off = int(r.integers(0, max(len(src) - n, 0) + 1))
            seg = np.zeros(n)
            chunk = src.samples[off: off + n]
            seg[: len(chunk)] = chunk
            noise = AudioSignal(seg, cfg.sample_rate)
        else:
            noise = make_noise(n, cfg.sample_rate, int(r.integers(2 ** 31)))
        noise_sdr = float(r.uniform(*cfg.noise_sdr_range))

    ex = make_mixture(target, interferers, sdrs, noise, noise_sdr,
                      prompt=" ".join(prompt_tokens), prompt_tokens=prompt_tokens,
                      speaker_ids=speakers, target_tokens=target_tokens,
                      interferer_tokens=interferer_tokens, id=f"{split}-{index:05d}")
    # Common gain keeps the mixture inside [-1, 1] without touching any SDR.
    peak = np.max(np.abs(ex.mixture.samples))
    if peak > cfg.peak_limit:
        g = cfg.peak_limit / peak
        ex.target = ex.target.with_samples(ex.target.samples * g)
        ex.interferers = [v.with_samples(v.samples * g) for v in ex.interferers]
        if ex.noise is not None:
            ex.noise = ex.noise.with_samples(ex.noise.samples * g)
        ex.mixture = ex.mixture.with_samples(ex.mixture.samples * g)
    return ex


def check_example(ex: MixtureExample, tol_db: float = 0.01, tol_rec: float = 1e-6):
    """Raise CorpusError if any mixing invariant is violated."""
    if ex.reconstruction_error() > tol_rec:
        raise CorpusError(f"{ex.id}: decomposition residual {ex.reconstruction_error():.3g}")
    for a, v, s in zip(ex.alphas, ex.interferers, ex.requested_sdrs):
        got = achieved_sdr(ex.target, a * v.samples)
        if abs(got - s) > tol_db:
            raise CorpusError(f"{ex.id}: interferer SDR {got:.4f} != {s:.4f}")
    if ex.noise is not None:
        got = achieved_sdr(ex.target, ex.noise_alpha * ex.noise.samples)
        if abs(got - ex.noise_sdr) > tol_db:
            raise CorpusError(f"{ex.id}: noise SDR {got:.4f} != {ex.noise_sdr:.4f}")
    prompt = set(ex.prompt_tokens)
    if not prompt <= set(ex.target_tokens):
        raise CorpusError(f"{ex.id}: prompt tokens not spoken by target")


def _write_example(ex: MixtureExample, root: Path, split: str) -> dict:
    d = root / split / ex.id
    d.mkdir(parents=True, exist_ok=True)
    rel = lambda p: os.path.relpath(p, root)
    write_wav(ex.mixture, d / "mixture.wav")
    write_wav(ex.target, d / "target.wav")
    ipaths = []
    for j, v in enumerate(ex.interferers):
        write_wav(v, d / f"interferer{j}.wav")
        ipaths.append(rel(d / f"interferer{j}.wav"))
    rec = {
        "id": ex.id,
        "split": split,
        "mixture_path": rel(d / "mixture.wav"),
        "target_path": rel(d / "target.wav"),
        "interferer_paths": ipaths,
        "alphas": ex.alphas,
        "sdrs": ex.requested_sdrs,
        "prompt": ex.prompt,
        "prompt_tokens": ex.prompt_tokens,
        "speaker_ids": ex.speaker_ids,
        "target_tokens": ex.target_tokens,
        "interferer_tokens": ex.interferer_tokens,
    }
    if ex.noise is not None:
        write_wav(ex.noise, d / "noise.wav")
        rec.update(noise_path=rel(d / "noise.wav"), noise_alpha=ex.noise_alpha,
                   noise_sdr=ex.noise_sdr)
    return rec


def _job(args):
    cfg, seed, pool, split, index, root = args
    vocab = make_vocabulary(cfg, seed)
    ex = _draw_example(cfg, vocab, pool, seed, split, index)
    check_example(ex)
    return _write_example(ex, Path(root), split) if root is not None else ex


def iter_examples(cfg: CorpusConfig, seed: int, split: str):
    """Yield in-memory examples of one split without touching the disk."""
    pool = speaker_pools(cfg)[split]
    vocab = make_vocabulary(cfg, seed)
    for i in range(cfg.examples.get(split, 0)):
        yield _draw_example(cfg, vocab, pool, seed, split, i)


def generate_corpus(cfg: CorpusConfig, seed: int, out_dir, workers: int = 1) -> Path:
    """Render every split to ``out_dir`` and write ``manifest.jsonl``.

    Returns the manifest path. Output is identical for any ``workers`` value.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    pools = speaker_pools(cfg)
    jobs = [(cfg, seed, pools[s], s, i, str(root))
            for s in SPLITS for i in range(cfg.examples.get(s, 0))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_job, jobs, chunksize=32))
    else:
        records = [_job(j) for j in jobs]
    manifest = root / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(root / "corpus_config.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "corpus": cfg.to_dict(), "speaker_pools": pools}, fh,
                  indent=2, sort_keys=True)
    logger.info("wrote %d examples to %s", len(records), root)
    return manifest


def read_manifest(path, split: str | None = None) -> list:
    with open(path, encoding="utf-8") as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    if split is not None:
        recs = [r for r in recs if r["split"] == split]
    return recs


def load_example(rec: dict, root) -> MixtureExample:
    """Rebuild a MixtureExample from a manifest record."""
    root = Path(root)
    target = read_wav(root / rec["target_path"])
    interferers = [read_wav(root / p) for p in rec["interferer_paths"]]
    noise = read_wav(root / rec["noise_path"]) if rec.get("noise_path") else None
    return MixtureExample(
        target=target, interferers=interferers, alphas=list(rec["alphas"]),
        mixture=read_wav(root / rec["mixture_path"]), prompt=rec["prompt"],
        prompt_tokens=list(rec["prompt_tokens"]), speaker_ids=list(rec["speaker_ids"]),
        requested_sdrs=list(rec["sdrs"]), noise=noise, noise_alpha=rec.get("noise_alpha"),
        noise_sdr=rec.get("noise_sdr"), target_tokens=list(rec.get("target_tokens", [])),
        interferer_tokens=[list(t) for t in rec.get("interferer_tokens", [])], id=rec["id"])
