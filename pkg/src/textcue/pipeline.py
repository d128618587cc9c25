"""Model construction, checkpoint I/O and the inference entry points."""

from __future__ import annotations

import torch

from .audio import AudioSignal
from .diffops import CheckpointError, load_checkpoint, save_checkpoint
from .embed import EmbeddingError, Providers, embed_text
from .nets import DPRNNSeparator, SepConfig, TPE, TpeConfig
from .tsr import TSR, TsrConfig, select_stream

KINDS = {"tpe": (TPE, TpeConfig), "dprnn": (DPRNNSeparator, SepConfig), "tsr": (TSR, TsrConfig)}


def build_model(kind: str, model_cfg: dict):
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    cls, cfg_cls = KINDS[kind]
    return cls(cfg_cls(**model_cfg))


def model_config(kind: str, model, embed: dict, sample_rate: int) -> dict:
    return {"kind": kind, "model": model.cfg.to_dict(), "embed": dict(embed),
            "sample_rate": int(sample_rate)}


def save_model(path, model, config: dict, extra: dict | None = None, meta: dict | None = None):
    """Write the model state (plus optional ``extra`` tensors) to one checkpoint."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    save_checkpoint(path, tensors, config, meta)


def load_model(path, kind: str | None = None):
    """Returns ``(model, config, tensors, meta)``; ``tensors`` holds the non-model entries."""
    tensors, config, meta = load_checkpoint(path)
    if kind is not None and config.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {config.get('kind')!r}")
    model = build_model(config["kind"], config["model"])
    state = {k[6:]: v for k, v in tensors.items() if k.startswith("model.")}
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"{path}: parameter set mismatch: {sorted(missing)[:4]}")
    model.load_state_dict({k: torch.as_tensor(v) for k, v in state.items()})
    model.eval()
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, config, rest, meta


def providers_for(config: dict) -> Providers:
    emb = config.get("embed", {})
    return Providers.stub(emb.get("dim", 512), emb.get("seed", 0))


def _wave(x: AudioSignal) -> torch.Tensor:
    return torch.as_tensor(x.samples, dtype=torch.float32)[None]


def _check_rate(x: AudioSignal, config: dict):
    sr = config.get("sample_rate")
    if sr is not None and x.sample_rate != sr:
        raise ValueError(f"sample rate {x.sample_rate} Hz, model expects {sr} Hz")


def extract(model: TPE, config: dict, mixture: AudioSignal, prompt: str,
            providers: Providers | None = None) -> AudioSignal:
    """Text-cued extraction of the prompted speaker from ``mixture``."""
    _check_rate(mixture, config)
    providers = providers or providers_for(config)
    text = torch.as_tensor(embed_text(prompt, providers.text).vector, dtype=torch.float32)[None]
    with torch.no_grad():
        est = model(_wave(mixture), text)[0]
    return mixture.with_samples(est.double().numpy())


def separate(model: DPRNNSeparator, config: dict, mixture: AudioSignal) -> list:
    _check_rate(mixture, config)
    with torch.no_grad():
        streams = model(_wave(mixture))[0]
    return [mixture.with_samples(s.double().numpy()) for s in streams]


def match(model: TSR, config: dict, prompt: str, candidates: list,
          providers: Providers | None = None):
    """Index of the candidate that best matches ``prompt`` and the probabilities."""
    if not prompt.strip():
        raise EmbeddingError("empty prompt")
    return select_stream(model, prompt, candidates, providers or providers_for(config))

