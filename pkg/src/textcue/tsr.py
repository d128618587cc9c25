"""Text-speech matcher used to pick the target among separated streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffops import Linear

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class TsrConfig:
    dim: int = 512
    hidden: int = 2048
    attn_dim: int = 512
    heads: int = 1

    def __post_init__(self):
        if min(self.dim, self.hidden, self.attn_dim) <= 0:
            raise ValueError("TSR dimensions must be positive")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")

    def to_dict(self):
        return asdict(self)


class Adapter(nn.Module):
    """Position-wise dim -> hidden -> dim map with a relu in between."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.dim = dim
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ValueError(f"adapter expects dim {self.dim}, got {x.shape[-1]}")
        return self.fc2(F.relu(self.fc1(x)))


def candidate_softmax(logits, dim: int = -1):
    """Softmax whose denominator is summed in sorted order, so permuting the
    candidates permutes the output exactly."""
    z = logits - logits.max(dim=dim, keepdim=True).values
    e = torch.exp(z)
    return e / torch.sort(e, dim=dim).values.sum(dim=dim, keepdim=True)


def masked_mean(x, mask=None):
    """Mean over axis -2 of (N, n, d), counting only positions where mask is True."""
    if mask is None:
        return x.mean(dim=-2)
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=-2) / w.sum(dim=-2).clamp_min(1.0)


class ResidualCrossAttention(nn.Module):
    """Two cross-attention passes (text queries on speech, speech queries on
    text), each mean-pooled over its queries and summed into ``M_o``; the
    pooled adapter outputs plus ``M_o`` give ``M_t`` and ``M_s``.

    Value maps start at zero, so at initialisation ``M_t``/``M_s`` are just the
    pooled adapter outputs.
    """

    def __init__(self, dim: int, attn_dim: int):
        super().__init__()
        self.attn_dim = attn_dim
        self.q_t, self.k_t, self.v_t = (Linear(dim, attn_dim) for _ in range(3))
        self.q_s, self.k_s, self.v_s = (Linear(dim, attn_dim) for _ in range(3))
        with torch.no_grad():
            for v in (self.v_t, self.v_s):
                v.weight.zero_()
                v.bias.zero_()
        if attn_dim != dim:
            raise ValueError("residual adds need attn_dim == adapter dim")

    def forward(self, xt, xs, t_mask=None):
        if xt.shape[-2] == 0 or xs.shape[-2] == 0:
            raise ValueError("cross attention over an empty sequence")
        scale = self.attn_dim ** 0.5
        # text queries attend over speech frames
        a_ts = torch.softmax(self.q_t(xt) @ self.k_s(xs).transpose(-1, -2) / scale, dim=-1)
        o_t = masked_mean(a_ts @ self.v_s(xs), t_mask)
        # speech queries attend over text tokens
        scores = self.q_s(xs) @ self.k_t(xt).transpose(-1, -2) / scale
        if t_mask is not None:
            scores = scores.masked_fill(~t_mask.unsqueeze(-2), float("-inf"))
        o_s = torch.softmax(scores, dim=-1) @ self.v_t(xt)
        o_s = o_s.mean(dim=-2)
        m_o = o_t + o_s
        return masked_mean(xt, t_mask) + m_o, xs.mean(dim=-2) + m_o


class TSR(nn.Module):
    """Adapters + residual cross attention; the logit of a (prompt, clip) pair
    is the dot product ``M_t . M_s``."""

    def __init__(self, cfg: TsrConfig):
        super().__init__()
        self.cfg = cfg
        self.text_adapter = Adapter(cfg.dim, cfg.hidden)
        self.audio_adapter = Adapter(cfg.dim, cfg.hidden)
        self.cross = ResidualCrossAttention(cfg.dim, cfg.attn_dim)

    def pair_logits(self, text_seq, audio_seq, t_mask=None):
        """Logits for aligned pairs: text (N, n_t, dim), audio (N, n_s, dim) -> (N,)."""
        m_t, m_s = self.cross(self.text_adapter(text_seq), self.audio_adapter(audio_seq), t_mask)
        return (m_t * m_s).sum(-1)

    def forward(self, text_seq, cand_seq, t_mask=None):
        """Candidate-wise probabilities.

        ``text_seq`` (G, n_t, dim) holds one prompt per group, ``cand_seq``
        (G, C, n_s, dim) the C candidate clips of each group. Returns (G, C)
        softmax probabilities across candidates.
        """
        G, C = cand_seq.shape[:2]
        t = text_seq.unsqueeze(1).expand(G, C, *text_seq.shape[1:]).reshape(G * C, *text_seq.shape[1:])
        m = None
        if t_mask is not None:
            m = t_mask.unsqueeze(1).expand(G, C, t_mask.shape[-1]).reshape(G * C, -1)
        logits = self.pair_logits(t, cand_seq.reshape(G * C, *cand_seq.shape[2:]), m)
        return candidate_softmax(logits.reshape(G, C), dim=-1)


def match_logits(model: TSR, text_seq, candidates) -> torch.Tensor:
    """Probabilities over ``candidates`` (a list of (n_s, dim) arrays) for one prompt."""
    if len(candidates) == 0:
        raise ValueError("no candidates")
    t = torch.as_tensor(np.asarray(text_seq), dtype=torch.float32)[None]
    c = torch.stack([torch.as_tensor(np.asarray(x), dtype=torch.float32) for x in candidates])[None]
    return model(t, c)[0]


def tsr_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over candidates, with probabilities
    clamped to [eps, 1 - eps]."""
    p = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


@dataclass
class MatchBatch:
    text_seq: np.ndarray  # (n_t, dim)
    candidates: list  # list of (n_s, dim)
    labels: np.ndarray  # (C,), exactly one 1

    def __post_init__(self):
        if int(np.sum(self.labels)) != 1:
            raise ValueError("a match batch needs exactly one positive")


def make_training_batch(example, providers, k_neg: int = 2, negative_pool=(),
                        rng: np.random.Generator | None = None) -> MatchBatch:
    """(prompt, clean target) is the positive; clean interferers and ``k_neg``
    targets drawn from ``negative_pool`` (other examples' clips or their
    embeddings) are the negatives."""
    if k_neg > 0 and len(negative_pool) == 0:
        raise ValueError("k_neg > 0 but the negative pool is empty")
    if not example.interferers and k_neg == 0:
        raise ValueError("example has no interferers and no negatives were requested")
    rng = rng if rng is not None else np.random.default_rng(0)
    text = providers.text(example.prompt).sequence
    cands = [providers.audio(example.target).sequence]
    cands += [providers.audio(v).sequence for v in example.interferers]
    for j in rng.choice(len(negative_pool), k_neg, replace=len(negative_pool) < k_neg) if k_neg else []:
        neg = negative_pool[int(j)]
        cands.append(neg if isinstance(neg, np.ndarray) else providers.audio(neg).sequence)
    labels = np.zeros(len(cands))
    labels[0] = 1.0
    return MatchBatch(text, cands, labels)


def select_stream(model: TSR, prompt: str, separated, providers):
    """Index of the stream that best matches ``prompt`` and the probabilities.

    Ties go to the lowest index.
    """
    if len(separated) == 0:
        raise ValueError("no separated streams to choose from")
    text = providers.text(prompt).sequence
    cands = [providers.audio(s).sequence for s in separated]
    model.eval()
    with torch.no_grad():
        probs = match_logits(model, text, cands).double().numpy()
    index = int(np.argmax(probs))
    if np.count_nonzero(probs == probs[index]) > 1:
        logger.info("select_stream: tie at p=%.6f, taking index %d", probs[index], index)
    return index, probs
