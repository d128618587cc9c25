"""Evaluation metrics on numpy arrays or AudioSignals (float64)."""

from __future__ import annotations

import numpy as np
import torch

from . import losses
from .audio import AudioSignal
from .losses import MetricError


def _arr(x) -> torch.Tensor:
    if isinstance(x, AudioSignal):
        x = x.samples
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def si_sdr(est, ref) -> float:
    return float(losses.si_sdr(_arr(est), _arr(ref)))


def sdr(est, ref) -> float:
    return float(losses.sdr(_arr(est), _arr(ref)))


def si_sdri(est, ref, mixture) -> float:
    """SI-SDR of the estimate minus SI-SDR of the mixture, both against ``ref``."""
    return si_sdr(est, ref) - si_sdr(mixture, ref)


def sdri(est, ref, mixture) -> float:
    return sdr(est, ref) - sdr(mixture, ref)


def extraction_correct(est, target, interferers) -> bool:
    """True iff the estimate is closer (in SI-SDR) to the target than to every interferer."""
    if len(interferers) == 0:
        raise MetricError("need at least one interferer")
    return si_sdr(est, target) > max(si_sdr(est, v) for v in interferers)


def random_association_eval(estimates, rng: np.random.Generator) -> int:
    """Index of a uniformly random stream (the random-association baseline)."""
    if len(estimates) < 2:
        raise MetricError("random association needs at least two streams")
    return int(rng.integers(len(estimates)))
