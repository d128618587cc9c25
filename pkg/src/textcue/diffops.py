"""Differentiable building blocks, a finite-difference gradient checker and the
checkpoint container.

Forward/backward come from torch autograd; ``grad_check`` is the independent
check on it.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-8
LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"TCUECKPT"
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    """Raised when a tensor picks up NaN or Inf."""


class CheckpointError(Exception):
    pass


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def set_determinism(seed: int, threads: int | None = 1):
    """Seed torch/numpy and force deterministic kernels."""
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.use_deterministic_algorithms(True)
    if threads is not None:
        torch.set_num_threads(threads)


# --- functional ops -------------------------------------------------------

def conv1d(x, weight, bias=None, stride: int = 1, padding=0):
    """Cross-correlation over the last axis. ``x`` is (N, C_in, T) or (C_in, T)."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"conv1d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if isinstance(padding, tuple):
        x = F.pad(x, padding)
        padding = 0
    y = F.conv1d(x, weight, bias, stride=stride, padding=padding)
    return y[0] if squeeze else y


def same_padding(kernel: int) -> tuple:
    """(left, right) zero padding that keeps the frame count for stride 1."""
    return (kernel - 1) // 2, kernel // 2


def layer_norm(x, axis: int = -1, weight=None, bias=None, eps: float = LN_EPS):
    """Normalise each slice along ``axis`` to zero mean / unit variance, then
    apply the optional per-feature affine."""
    mean = x.mean(dim=axis, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=axis, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        shape = [1] * x.dim()
        shape[axis] = -1
        y = y * weight.reshape(shape)
        if bias is not None:
            y = y + bias.reshape(shape)
    return y


def film(x, gamma, beta):
    """Per-channel affine modulation: ``gamma[c] * x[c, t] + beta[c]``.

    ``x`` is (C, T) or (N, C, T); ``gamma``/``beta`` are (C,) or (N, C).
    """
    if gamma.shape[-1] != x.shape[-2] or beta.shape[-1] != x.shape[-2]:
        raise ValueError(f"film: {x.shape[-2]} channels vs gamma {tuple(gamma.shape)}")
    return gamma.unsqueeze(-1) * x + beta.unsqueeze(-1)


def scaled_dot_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    d = q.shape[-1]
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2] or d == 0:
        raise ValueError(f"attention shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    return torch.softmax(scores, dim=-1) @ v


def linear(x, weight, bias=None):
    return F.linear(x, weight, bias)


# --- modules ---------------------------------------------------------------

def init_uniform_(weight: torch.Tensor, fan_in: int):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound)
    return weight


class Linear(nn.Linear):
    """nn.Linear with uniform(+-1/sqrt(fan_in)) weights and zero bias."""

    def reset_parameters(self):
        init_uniform_(self.weight, self.in_features)
        if self.bias is not None:
            nn.init.zeros_(self.bias)


class Conv1d(nn.Conv1d):
    def reset_parameters(self):
        init_uniform_(self.weight, self.in_channels * self.kernel_size[0] // self.groups)
        if self.bias is not None:
            nn.init.zeros_(self.bias)


class ChannelNorm(nn.Module):
    """Layer norm over the channel axis of (N, C, ...) tensors."""

    def __init__(self, channels: int, eps: float = LN_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, 1, self.weight, self.bias, self.eps)


class BLSTM(nn.Module):
    """Bidirectional LSTM over (N, T, C_in) -> (N, T, 2H).

    Forget-gate bias starts at 1, every other bias at 0.
    """

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.lstm = nn.LSTM(input_size, hidden_size, batch_first=True, bidirectional=True)
        H = hidden_size
        with torch.no_grad():
            for name, p in self.lstm.named_parameters():
                if name.startswith("bias"):
                    p.zero_()
                    if name.startswith("bias_ih"):
                        p[H:2 * H] = 1.0

    def forward(self, x):
        return self.lstm(x)[0]


def blstm(x, module: BLSTM):
    """Functional alias: run ``module`` on a (T, C) or (N, T, C) input."""
    if x.dim() == 2:
        return module(x.unsqueeze(0))[0]
    return module(x)


# --- gradient checking -----------------------------------------------------

def _as_list(inputs):
    if isinstance(inputs, dict):
        return list(inputs.values())
    if isinstance(inputs, torch.Tensor):
        return [inputs]
    return list(inputs)


def grad_check(fn, inputs, eps: float = 1e-5, grad_fn=None, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return a scalar. Analytic gradients come from autograd
    unless ``grad_fn(*inputs)`` supplies them. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)`` with ``floor`` equal to
    1e-3 of the largest numeric gradient magnitude, so coordinates whose true
    gradient is ~0 do not dominate through round-off. ``max_coords`` samples
    a random subset of coordinates per input to bound the cost.
    """
    xs = [t.detach().clone().to(torch.float64) for t in _as_list(inputs)]
    out = fn(*xs)
    if not isinstance(out, torch.Tensor) or out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")

    if grad_fn is None:
        leaves = [x.clone().requires_grad_(True) for x in xs]
        y = fn(*leaves)
        analytic = torch.autograd.grad(y, leaves, allow_unused=True)
        analytic = [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(xs, analytic)]
    else:
        analytic = [torch.as_tensor(g, dtype=torch.float64) for g in _as_list(grad_fn(*xs))]

    rng = np.random.default_rng(seed)
    pairs = []
    with torch.no_grad():
        for x, a in zip(xs, analytic):
            flat = x.view(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = rng.choice(flat.numel(), max_coords, replace=False)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = fn(*xs).item()
                flat[i] = orig - eps
                fm = fn(*xs).item()
                flat[i] = orig
                pairs.append((a.reshape(-1)[i].item(), (fp - fm) / (2 * eps)))
    if not pairs:
        return 0.0
    a = np.array([p[0] for p in pairs])
    n = np.array([p[1] for p in pairs])
    floor = 1e-3 * np.max(np.abs(n)) + 1e-12
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(rel.max())


def module_grad_check(module: nn.Module, loss_fn, eps: float = 1e-6, max_coords: int = 8,
                      seed: int = 0) -> float:
    """grad_check over every parameter of ``module`` (sampled coordinates).

    ``loss_fn(module)`` returns a scalar. The module is moved to float64.
    """
    module.double()
    names = [n for n, _ in module.named_parameters()]
    base = [p.detach().clone() for _, p in module.named_parameters()]

    def fn(*values):
        params = dict(zip(names, values))
        return loss_fn(lambda *a, **k: torch.func.functional_call(module, params, a, k))

    return grad_check(fn, base, eps=eps, max_coords=max_coords, seed=seed)


# --- checkpoints -----------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors: dict, config: dict, meta: dict | None = None):
    """Write ``tensors`` (name -> tensor) as float32 little-endian payload.

    Layout: 8-byte magic, uint32 LE header length, UTF-8 JSON header, payload.
    """
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "tensors": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(tensors, config, meta)`` from a file written by save_checkpoint."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, header["config"], header["meta"]


def encode_rng_state(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def decode_rng_state(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())
