"""Masking networks: the text-conditioned extractor and the blind DPRNN separator.

Tensors follow the (batch, channels, frames) convention; waveforms are
(batch, samples).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import FrameSpec, padded_length
from .diffops import BLSTM, ChannelNorm, Conv1d, Linear, film, same_padding


@dataclass
class TpeConfig:
    D: int = 256
    B: int = 64
    hidden: int = 128
    L: int = 40
    R: int = 6
    K: int = 80
    N: int = 2
    emb_dim: int = 512

    def __post_init__(self):
        if self.B != self.D // 2 ** self.N or self.D % 2 ** self.N:
            raise ValueError(f"B ({self.B}) must equal D / 2**N = {self.D / 2 ** self.N}")
        if self.K % 2 or self.K < 2:
            raise ValueError("K must be even")
        FrameSpec(self.L)

    def to_dict(self):
        return asdict(self)


@dataclass
class SepConfig:
    I: int = 2
    D: int = 256
    B: int = 64
    hidden: int = 128
    L: int = 40
    R: int = 6
    K: int = 80

    def __post_init__(self):
        if self.I < 2:
            raise ValueError("a separator needs I >= 2 output streams")
        if self.K % 2 or self.K < 2:
            raise ValueError("K must be even")
        FrameSpec(self.L)

    def to_dict(self):
        return asdict(self)


def suggest_chunk_size(n_frames: int) -> int:
    """Even chunk size near sqrt(2 * n_frames)."""
    k = int(round(math.sqrt(2 * n_frames)))
    return max(2, k + (k % 2))


# --- encoder / decoder ------------------------------------------------------

class Encoder(nn.Module):
    """relu(conv1d(x, 1 -> D, kernel L, stride L/2)) after end zero-padding."""

    def __init__(self, D: int, L: int):
        super().__init__()
        self.spec = FrameSpec(L)
        self.conv = Conv1d(1, D, L, stride=L // 2)

    def forward(self, x):
        n = x.shape[-1]
        x = F.pad(x, (0, padded_length(n, self.spec) - n))
        return F.relu(self.conv(x.unsqueeze(1)))


class Decoder(nn.Module):
    """Transposed conv (per-frame basis + overlap-add) trimmed to ``length``."""

    def __init__(self, D: int, L: int):
        super().__init__()
        self.deconv = nn.ConvTranspose1d(D, 1, L, stride=L // 2, bias=False)
        bound = 1.0 / math.sqrt(D)
        nn.init.uniform_(self.deconv.weight, -bound, bound)

    def forward(self, S, length: int):
        return self.deconv(S)[:, 0, :length]


# --- segmentation ----------------------------------------------------------

def segment(x: torch.Tensor, K: int):
    """(N, C, T) -> (N, C, K, P) chunks with hop K/2; end zero-padded.

    Returns ``(chunks, T)`` so ``aggregate`` can trim.
    """
    hop = K // 2
    T = x.shape[-1]
    Tp = K if T <= K else K + math.ceil((T - K) / hop) * hop
    x = F.pad(x, (0, Tp - T))
    return x.unfold(-1, K, hop).transpose(-1, -2).contiguous(), T


def aggregate(w: torch.Tensor, T: int):
    """Inverse of ``segment``: overlap-add chunks, divide by coverage, trim."""
    N, C, K, P = w.shape
    hop = K // 2
    Tp = K + (P - 1) * hop
    cols = w.reshape(N, C * K, P)
    out = F.fold(cols, (1, Tp), (1, K), stride=(1, hop)).reshape(N, C, Tp)
    ones = torch.ones(1, K, P, dtype=w.dtype, device=w.device)
    cover = F.fold(ones, (1, Tp), (1, K), stride=(1, hop)).reshape(1, 1, Tp)
    return (out / cover)[..., :T]


# --- DPRNN -------------------------------------------------------------------

class DualPathBlock(nn.Module):
    """Intra-chunk then inter-chunk BLSTM, each with linear, LN and residual."""

    def __init__(self, B: int, hidden: int):
        super().__init__()
        self.intra = BLSTM(B, hidden)
        self.intra_fc = Linear(2 * hidden, B)
        self.intra_norm = nn.LayerNorm(B, eps=1e-5)
        self.inter = BLSTM(B, hidden)
        self.inter_fc = Linear(2 * hidden, B)
        self.inter_norm = nn.LayerNorm(B, eps=1e-5)

    def forward(self, w):
        N, B, K, P = w.shape
        x = w.permute(0, 3, 2, 1).reshape(N * P, K, B)
        x = x + self.intra_norm(self.intra_fc(self.intra(x)))
        x = x.reshape(N, P, K, B).transpose(1, 2).reshape(N * K, P, B)
        x = x + self.inter_norm(self.inter_fc(self.inter(x)))
        return x.reshape(N, K, P, B).permute(0, 3, 1, 2)


class MaskHead(nn.Module):
    """tanh x sigmoid gate, then a 1x1 conv to ``n_masks * D`` channels and relu."""

    def __init__(self, B: int, D: int, n_masks: int = 1):
        super().__init__()
        self.n_masks = n_masks
        self.tanh_conv = Conv1d(B, B, 1)
        self.gate_conv = Conv1d(B, B, 1)
        self.out = Conv1d(B, n_masks * D, 1)

    def forward(self, h):
        g = torch.tanh(self.tanh_conv(h)) * torch.sigmoid(self.gate_conv(h))
        m = F.relu(self.out(g))
        N, _, T = m.shape
        return m.reshape(N, self.n_masks, -1, T)


class MaskEstimator(nn.Module):
    """segment -> R dual-path blocks -> aggregate -> mask head."""

    def __init__(self, B: int, D: int, hidden: int, R: int, K: int, n_masks: int = 1):
        super().__init__()
        self.K = K
        self.blocks = nn.ModuleList(DualPathBlock(B, hidden) for _ in range(R))
        self.head = MaskHead(B, D, n_masks)

    def forward(self, Fx):
        w, T = segment(Fx, self.K)
        for block in self.blocks:
            w = block(w)
        return self.head(aggregate(w, T))


# --- text-conditioned extractor --------------------------------------------

class FusionLevel(nn.Module):
    def __init__(self, channels: int, text_in: int, L: int):
        super().__init__()
        self.text_map = Linear(text_in, channels)
        self.gamma = Linear(channels, channels)
        self.beta = Linear(channels, channels)
        with torch.no_grad():
            self.gamma.weight.zero_()
            self.gamma.bias.fill_(1.0)
            self.beta.weight.zero_()
        self.pad = same_padding(L)
        self.conv = Conv1d(channels, channels // 2, L)
        self.norm = ChannelNorm(channels // 2)

    def forward(self, X, text):
        text = self.text_map(text)
        X = film(X, self.gamma(text), self.beta(text))
        X = self.norm(self.conv(F.pad(X, self.pad)))
        return X, text


class TPE(nn.Module):
    """Encoder, N FiLM fusion levels, DPRNN mask estimator and decoder.

    ``forward(mixture, text)`` takes a (batch, samples) waveform and a
    (batch, emb_dim) pooled prompt embedding and returns the estimate.
    """

    def __init__(self, cfg: TpeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.D, cfg.L)
        levels, c, t_in = [], cfg.D, cfg.emb_dim
        for _ in range(cfg.N):
            levels.append(FusionLevel(c, t_in, cfg.L))
            t_in, c = c, c // 2
        self.fusion = nn.ModuleList(levels)
        self.masker = MaskEstimator(cfg.B, cfg.D, cfg.hidden, cfg.R, cfg.K, 1)
        self.decoder = Decoder(cfg.D, cfg.L)

    def encode(self, x):
        return self.encoder(x)

    def fuse(self, X, text):
        for level in self.fusion:
            X, text = level(X, text)
        return X

    def mask(self, Fx):
        return self.masker(Fx)[:, 0]

    def decode(self, X, M, length):
        if X.shape != M.shape:
            raise ValueError(f"mask {tuple(M.shape)} vs latent {tuple(X.shape)}")
        return self.decoder(M * X, length)

    def forward(self, x, text):
        X = self.encode(x)
        return self.decode(X, self.mask(self.fuse(X, text)), x.shape[-1])


# --- blind separator --------------------------------------------------------

class DPRNNSeparator(nn.Module):
    """Encoder, LN + 1x1 bottleneck, DPRNN, I masks, shared decoder.

    ``forward`` returns (batch, I, samples).
    """

    def __init__(self, cfg: SepConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.D, cfg.L)
        self.norm = ChannelNorm(cfg.D)
        self.bottleneck = Conv1d(cfg.D, cfg.B, 1)
        self.masker = MaskEstimator(cfg.B, cfg.D, cfg.hidden, cfg.R, cfg.K, cfg.I)
        self.decoder = Decoder(cfg.D, cfg.L)

    def forward(self, x):
        X = self.encoder(x)
        M = self.masker(self.bottleneck(self.norm(X)))
        N, I, D, T = M.shape
        S = (M * X.unsqueeze(1)).reshape(N * I, D, T)
        return self.decoder(S, x.shape[-1]).reshape(N, I, -1)
