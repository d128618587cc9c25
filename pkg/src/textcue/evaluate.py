"""Evaluation runs over a manifest split and the report they produce."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .corpus import load_example
from .losses import pit_loss, si_sdr as t_si_sdr

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("tpe", "dprnn_tsr", "pit", "random")
HIST_EDGES = tuple(float(e) for e in np.arange(-30.0, 30.0 + 1e-9, 2.0))
SDR_BIN_EDGES = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
RECORD_FIELDS = ("id", "si_sdr", "si_sdri", "sdr", "sdri", "correct",
                 "interferer_sdr", "interferer_sdr_bin", "stream")


class EvalError(Exception):
    pass


def sdr_bin(value: float, edges=SDR_BIN_EDGES) -> int:
    """Index of the [lo, hi) bin holding ``value``; the last bin is closed and
    out-of-range values go to the end bins."""
    i = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(i, 0), len(edges) - 2)


def histogram(values, edges=HIST_EDGES) -> dict:
    """Counts over ``edges`` with values outside the range clamped into the end bins."""
    edges = np.asarray(edges, dtype=float)
    v = np.clip(np.asarray(values, dtype=float), edges[0], edges[-1])
    counts, _ = np.histogram(v, bins=edges)
    return {"edges": edges.tolist(), "counts": counts.astype(int).tolist()}


def aggregate(records: list) -> dict:
    n = len(records)
    if n == 0:
        return {"n": 0, "mean_si_sdri": None, "mean_sdri": None, "accuracy": None}
    return {
        "n": n,
        "mean_si_sdri": float(np.mean([r["si_sdri"] for r in records])),
        "mean_sdri": float(np.mean([r["sdri"] for r in records])),
        "accuracy": 100.0 * sum(bool(r["correct"]) for r in records) / n,
    }


@dataclass
class EvalReport:
    mode: str
    records: list
    sdr_bin_edges: tuple = SDR_BIN_EDGES
    hist_edges: tuple = HIST_EDGES
    info: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        return aggregate(self.records)

    @property
    def histogram(self) -> dict:
        return histogram([r["si_sdri"] for r in self.records], self.hist_edges)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "info": self.info,
            "aggregates": self.aggregates,
            "histogram": self.histogram,
            "sdr_bin_edges": list(self.sdr_bin_edges),
            "records": self.records,
            # reserved, not computed
            "pesqi": None,
            "stoii": None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RECORD_FIELDS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.records:
            w.writerow(r)
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        path.with_suffix(".csv").write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise EvalError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(d["mode"], d["records"], tuple(d["sdr_bin_edges"]),
                   tuple(d["histogram"]["edges"]), d.get("info", {}))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def score(example, est, stream=None) -> dict:
    """One per-utterance record for estimate ``est`` of ``example``'s target."""
    s, x = example.target, example.mixture
    ints = [v.samples * a for v, a in zip(example.interferers, example.alphas)]
    isdr = float(min(example.requested_sdrs))
    return {
        "id": example.id,
        "si_sdr": metrics.si_sdr(est, s),
        "si_sdri": metrics.si_sdri(est, s, x),
        "sdr": metrics.sdr(est, s),
        "sdri": metrics.sdri(est, s, x),
        "correct": metrics.extraction_correct(est, s, ints),
        "interferer_sdr": isdr,
        "interferer_sdr_bin": sdr_bin(isdr),
        "stream": stream,
    }


def pit_assignment(streams, example) -> tuple:
    """(stream index assigned to the target, permutation) under the best
    SI-SDR permutation against [target, scaled interferers]."""
    refs = [example.target.samples] + [v.samples * a for v, a in zip(example.interferers, example.alphas)]
    if len(refs) != len(streams):
        raise EvalError(f"{example.id}: {len(streams)} streams for {len(refs)} sources")
    est = torch.as_tensor(np.stack([s.samples for s in streams]))
    _, perm = pit_loss(est, torch.as_tensor(np.stack(refs)))
    perm = perm.tolist()
    return perm.index(0), perm


def pit_all_sources(streams, example, perm) -> float:
    """Mean SI-SDRi over all sources under ``perm``."""
    refs = [example.target.samples] + [v.samples * a for v, a in zip(example.interferers, example.alphas)]
    x = torch.as_tensor(example.mixture.samples)
    gains = []
    for i, j in enumerate(perm):
        r = torch.as_tensor(refs[j])
        gains.append(float(t_si_sdr(torch.as_tensor(streams[i].samples), r) - t_si_sdr(x, r)))
    return float(np.mean(gains))


def evaluate(records: list, root, mode: str, extractor=None, separator=None, matcher=None,
             seed: int = 0, info: dict | None = None) -> EvalReport:
    """Score every manifest record with the system selected by ``mode``.

    ``extractor(mixture, prompt) -> AudioSignal`` serves ``tpe``;
    ``separator(mixture) -> [AudioSignal]`` serves the stream modes and
    ``matcher(prompt, streams) -> index`` picks a stream for ``dprnn_tsr``.
    Records are processed in id order; ``random`` draws from one generator
    seeded with ``seed``.
    """
    if mode not in MODES:
        raise EvalError(f"unknown mode {mode!r}; expected one of {MODES}")
    need = {"tpe": extractor, "dprnn_tsr": separator if matcher is not None else None,
            "pit": separator, "random": separator}[mode]
    if need is None:
        raise EvalError(f"mode {mode!r} is missing its model(s)")
    rng = np.random.default_rng(seed)
    out = []
    pit_sources = []
    for rec in sorted(records, key=lambda r: r["id"]):
        ex = load_example(rec, root)
        if mode == "tpe":
            est = extractor(ex.mixture, ex.prompt)
            if len(est) != len(ex.mixture):
                raise EvalError(f"{ex.id}: estimate length {len(est)} vs mixture {len(ex.mixture)}")
            out.append(score(ex, est.samples))
            continue
        streams = separator(ex.mixture)
        if len(streams) != len(ex.interferers) + 1:
            raise EvalError(f"{ex.id}: separator emits {len(streams)} streams, example has "
                            f"{len(ex.interferers) + 1} speakers")
        if mode == "pit":
            k, perm = pit_assignment(streams, ex)
            pit_sources.append(pit_all_sources(streams, ex, perm))
        elif mode == "random":
            k = metrics.random_association_eval(streams, rng)
        else:
            k = int(matcher(ex.prompt, streams))
        out.append(score(ex, streams[k].samples, stream=k))
    info = dict(info or {}, seed=seed)
    if pit_sources:
        info["mean_si_sdri_all_sources"] = float(np.mean(pit_sources))
    return EvalReport(mode, out, info=info)
