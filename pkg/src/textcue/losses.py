"""SI-SDR / SDR on tensors and the permutation-invariant loss."""

from __future__ import annotations

import itertools

import torch

EPS = 1e-8
CLAMP_DB = 60.0


class MetricError(ValueError):
    pass


def _check_pair(est, ref):
    if est.shape[-1] != ref.shape[-1]:
        raise MetricError(f"length mismatch {est.shape[-1]} vs {ref.shape[-1]}")
    try:
        torch.broadcast_shapes(est.shape, ref.shape)
    except RuntimeError as exc:
        raise MetricError(str(exc)) from None


def si_sdr(est: torch.Tensor, ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Scale-invariant SDR in dB over the last axis, clamped to +-60 dB.

    Both signals are zero-meaned before the projection. The residual energy is
    floored at eps times the total energy, so the value is exactly invariant to
    the scale of ``est``; a silent estimate scores -60.
    """
    _check_pair(est, ref)
    est = est - est.mean(dim=-1, keepdim=True)
    ref = ref - ref.mean(dim=-1, keepdim=True)
    ref_energy = (ref * ref).sum(dim=-1, keepdim=True)
    if torch.any(ref_energy <= 0):
        raise MetricError("zero-energy reference")
    proj = (est * ref).sum(dim=-1, keepdim=True) / (ref_energy * (1.0 + eps)) * ref
    noise = est - proj
    p, n = (proj * proj).sum(-1), (noise * noise).sum(-1)
    return _db(p, torch.maximum(n, eps * (p + n)), eps)


def _db(num, den, eps):
    ratio = num / torch.where(den > 0, den, torch.ones_like(den))
    return torch.clamp(10.0 * torch.log10(ratio + eps), -CLAMP_DB, CLAMP_DB)


def sdr(est: torch.Tensor, ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Plain energy-ratio SDR in dB, clamped to +-60 dB."""
    _check_pair(est, ref)
    ref_energy = (ref * ref).sum(-1)
    if torch.any(ref_energy <= 0):
        raise MetricError("zero-energy reference")
    err = est - ref
    return _db(ref_energy, torch.maximum((err * err).sum(-1), eps * ref_energy), eps)


def neg_si_sdr(est, ref):
    """Mean negative SI-SDR (the extraction training loss)."""
    return -si_sdr(est, ref).mean()


def pit_loss(estimates: torch.Tensor, references: torch.Tensor):
    """Permutation-invariant negative SI-SDR.

    ``estimates`` and ``references`` are (..., I, T). For each leading index the
    assignment ``perm`` minimising ``mean_i -si_sdr(est_i, ref_perm[i])`` is found
    by exhaustive search. Returns ``(loss, perms)`` where ``loss`` is averaged
    over leading indices and ``perms`` is a (..., I) long tensor.
    """
    if estimates.shape != references.shape:
        raise MetricError(f"{tuple(estimates.shape)} estimates vs {tuple(references.shape)} references")
    n_src = estimates.shape[-2]
    # pair[..., i, j] = si_sdr(est_i, ref_j)
    pair = si_sdr(estimates.unsqueeze(-2), references.unsqueeze(-3))
    perms = list(itertools.permutations(range(n_src)))
    idx = torch.arange(n_src)
    scores = torch.stack([pair[..., idx, torch.tensor(p)].mean(-1) for p in perms], dim=-1)
    best_score, best = scores.max(dim=-1)
    table = torch.tensor(perms, dtype=torch.long)
    return -best_score.mean(), table[best]
