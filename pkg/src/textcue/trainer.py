"""Training loop: Adam, plateau-halving learning rate, early stopping,
checkpoints and a CSV log."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffops import NumericError, config_hash, set_determinism
from .embed import Providers
from .losses import neg_si_sdr, pit_loss
from .pipeline import build_model, load_model, model_config, save_model
from .tsr import tsr_loss

logger = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MIN_LR = 1e-8
DEFAULT_LR = {"tpe": 5e-4, "dprnn": 1e-3, "tsr": 1e-4}
DEFAULT_WD = {"tpe": 0.0, "dprnn": 0.0, "tsr": 1e-4}
LOG_FIELDS = ("epoch", "train_loss", "val_loss", "lr")


@dataclass
class TrainConfig:
    lr: float | None = None  # None -> per-kind default
    weight_decay: float | None = None
    batch_size: int = 8
    clip_norm: float = 5.0
    max_epochs: int = 100
    min_lr: float = MIN_LR
    halve_patience: int = 2
    stop_patience: int = 10
    k_neg: int = 2
    max_minutes: float | None = None
    deterministic: bool = True

    def resolved(self, kind: str) -> "TrainConfig":
        d = asdict(self)
        d["lr"] = DEFAULT_LR[kind] if self.lr is None else self.lr
        d["weight_decay"] = DEFAULT_WD[kind] if self.weight_decay is None else self.weight_decay
        return TrainConfig(**d)


@dataclass
class TrainState:
    lr: float
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    since_best: int = 0  # drives early stopping
    since_halve: int = 0  # drives lr halving; reset after each halving
    stop: bool = False
    seed: int = 0
    config_hash: str = ""
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)

    def scalars(self) -> dict:
        d = asdict(self)
        d.pop("m")
        d.pop("v")
        if math.isinf(d["best_val"]):
            d["best_val"] = None
        return d


# --- optimizer and schedule ------------------------------------------------

def adam_step(params: dict, grads: dict, state: TrainState, lr: float, weight_decay: float = 0.0):
    """One Adam update in place, with decoupled weight decay ``p <- p (1 - lr wd)``.

    ``params`` and ``grads`` map names to tensors. A non-finite gradient aborts
    before any parameter changes.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = BETAS
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} vs parameter {name!r} {tuple(p.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS))


def schedule_update(state: TrainState, val_loss: float, halve_patience: int = 2,
                    stop_patience: int = 10, min_lr: float = MIN_LR) -> TrainState:
    """Per-epoch bookkeeping on the best validation loss.

    A strict improvement resets both counters. Otherwise the halving counter
    halves lr (floored at ``min_lr``) every ``halve_patience`` epochs and the
    stop counter sets ``stop`` after ``stop_patience`` epochs.
    """
    state.epoch += 1
    if val_loss < state.best_val:
        state.best_val = float(val_loss)
        state.since_best = 0
        state.since_halve = 0
        return state
    state.since_best += 1
    state.since_halve += 1
    if state.since_halve >= halve_patience:
        state.lr = max(state.lr / 2.0, min_lr)
        state.since_halve = 0
    if state.since_best >= stop_patience:
        state.stop = True
    return state


# --- data ------------------------------------------------------------------

def _wave_stack(signals) -> torch.Tensor:
    return torch.as_tensor(np.stack([s.samples for s in signals]), dtype=torch.float32)


class TrainData:
    """Per-kind tensors built from a list of MixtureExamples."""

    def __init__(self, kind: str, examples: list, providers: Providers | None = None):
        if not examples:
            raise ValueError("no examples")
        self.kind = kind
        self.n = len(examples)
        self.ids = [ex.id for ex in examples]
        if kind == "tpe":
            providers = providers or Providers.stub()
            self.x = _wave_stack([ex.mixture for ex in examples])
            self.s = _wave_stack([ex.target for ex in examples])
            self.text = torch.as_tensor(
                np.stack([providers.text(ex.prompt).vector for ex in examples]), dtype=torch.float32)
        elif kind == "dprnn":
            self.x = _wave_stack([ex.mixture for ex in examples])
            self.refs = torch.stack([
                _wave_stack([ex.target] + [v.with_samples(v.samples * a)
                                           for v, a in zip(ex.interferers, ex.alphas)])
                for ex in examples])
        elif kind == "tsr":
            providers = providers or Providers.stub()
            texts = [providers.text(ex.prompt).sequence for ex in examples]
            n_t = max(len(t) for t in texts)
            dim = texts[0].shape[1]
            self.text = torch.zeros(self.n, n_t, dim)
            self.mask = torch.zeros(self.n, n_t, dtype=torch.bool)
            for i, t in enumerate(texts):
                self.text[i, :len(t)] = torch.as_tensor(t, dtype=torch.float32)
                self.mask[i, :len(t)] = True
            self.cands = torch.stack([
                torch.as_tensor(np.stack([providers.audio(c).sequence
                                          for c in [ex.target] + list(ex.interferers)]),
                                dtype=torch.float32)
                for ex in examples])
        else:
            raise ValueError(f"unknown kind {kind!r}")

    def negatives(self, idx: np.ndarray, k_neg: int, rng: np.random.Generator) -> np.ndarray:
        """``k_neg`` other-example indices per entry of ``idx``."""
        if k_neg and self.n < 2:
            raise ValueError("negative pool is empty")
        draws = rng.integers(0, self.n - 1, size=(len(idx), k_neg))
        return draws + (draws >= idx[:, None])  # skip the example itself


def batch_loss(model, data: TrainData, idx: np.ndarray, k_neg: int = 2,
               rng: np.random.Generator | None = None) -> torch.Tensor:
    """The kind's training objective on examples ``idx``."""
    t = torch.as_tensor(idx)
    if data.kind == "tpe":
        return neg_si_sdr(model(data.x[t], data.text[t]), data.s[t])
    if data.kind == "dprnn":
        return pit_loss(model(data.x[t]), data.refs[t])[0]
    rng = rng if rng is not None else np.random.default_rng(0)
    cands = data.cands[t]
    if k_neg:
        neg = torch.as_tensor(data.negatives(idx, k_neg, rng))
        cands = torch.cat([cands, data.cands[neg, 0]], dim=1)
    probs = model(data.text[t], cands, data.mask[t])
    y = torch.zeros_like(probs)
    y[:, 0] = 1.0
    return tsr_loss(probs, y)


def evaluate_loss(model, data: TrainData, batch_size: int = 8, k_neg: int = 2, seed: int = 0) -> float:
    """Mean objective over ``data`` (fixed negatives for the matcher)."""
    model.eval()
    rng = np.random.default_rng([seed, 991])
    total = 0.0
    with torch.no_grad():
        for start in range(0, data.n, batch_size):
            idx = np.arange(start, min(start + batch_size, data.n))
            total += float(batch_loss(model, data, idx, k_neg, rng)) * len(idx)
    return total / data.n


# --- loop ------------------------------------------------------------------
def train_step(model, params: dict, data: TrainData, idx: np.ndarray, state: TrainState,
               cfg: TrainConfig, rng=None) -> float:
    """One clipped Adam step on batch ``idx``; ``cfg`` must be resolved. Returns the loss."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, data, idx, cfg.k_neg, rng)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite {data.kind} loss at epoch {state.epoch + 1}, step {state.step + 1}")
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
    adam_step(params, {k: p.grad for k, p in params.items()}, state, state.lr, cfg.weight_decay)
    return loss.item()



@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    log_path: Path
    history: list
    state: TrainState
    initial_val_loss: float
    seconds: float


def _read_log(path: Path, upto: int) -> list:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= upto]
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def _write_log(path: Path, rows: list):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


def _save(path, model, config, state: TrainState, extra_meta: dict):
    extra = {f"adam.m.{k}": v for k, v in state.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in state.v.items()})
    save_model(path, model, config, extra, dict(extra_meta, train_state=state.scalars()))


def train(kind: str, train_examples: list, valid_examples: list, model_cfg: dict,
          out_dir, cfg: TrainConfig | None = None, seed: int = 0, resume: bool = False,
          providers: Providers | None = None, embed: dict | None = None,
          epoch_callback=None) -> TrainResult:
    """Train one model kind; writes ``last.ckpt``, ``best.ckpt`` and ``train_log.csv``
    under ``out_dir``. With ``resume`` the run continues from ``last.ckpt``."""
    cfg = (cfg or TrainConfig()).resolved(kind)
    embed = embed or {"dim": 512, "seed": 0}
    providers = providers or Providers.stub(embed["dim"], embed["seed"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last, best, log_path = out / "last.ckpt", out / "best.ckpt", out / "train_log.csv"
    if cfg.deterministic:
        set_determinism(seed)
    torch.manual_seed(seed)

    t0 = time.perf_counter()
    train_data = TrainData(kind, train_examples, providers)
    valid_data = TrainData(kind, valid_examples, providers)
    sample_rate = train_examples[0].mixture.sample_rate
    model = build_model(kind, model_cfg)
    config = model_config(kind, model, embed, sample_rate)
    run_hash = config_hash({"model": config, "train": asdict(cfg), "seed": seed})

    if resume and last.exists():
        model, _, extra, meta = load_model(last, kind)
        st = dict(meta["train_state"])
        st["best_val"] = math.inf if st["best_val"] is None else st["best_val"]
        state = TrainState(**st)
        state.m = {k[7:]: v for k, v in extra.items() if k.startswith("adam.m.")}
        state.v = {k[7:]: v for k, v in extra.items() if k.startswith("adam.v.")}
        initial = meta["initial_val_loss"]
        history = _read_log(log_path, state.epoch)
        logger.info("resuming %s from epoch %d", kind, state.epoch)
    else:
        state = TrainState(lr=cfg.lr, seed=seed, config_hash=run_hash)
        initial = evaluate_loss(model, valid_data, cfg.batch_size, cfg.k_neg, seed)
        history = []
        logger.info("%s initial val loss %.4f", kind, initial)
    meta = {"initial_val_loss": initial, "train_config": asdict(cfg)}

    params = dict(model.named_parameters())
    while not state.stop and state.epoch < cfg.max_epochs:
        if cfg.max_minutes is not None and time.perf_counter() - t0 > 60 * cfg.max_minutes:
            logger.info("time budget reached after %d epochs", state.epoch)
            break
        epoch = state.epoch + 1
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(train_data.n)
        model.train()
        total = 0.0
        for start in range(0, train_data.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = train_step(model, params, train_data, idx, state, cfg, rng)
            total += loss * len(idx)
        lr_used = state.lr
        val = evaluate_loss(model, valid_data, cfg.batch_size, cfg.k_neg, seed)
        improved = val < state.best_val
        schedule_update(state, val, cfg.halve_patience, cfg.stop_patience, cfg.min_lr)
        history.append({"epoch": epoch, "train_loss": total / train_data.n, "val_loss": val, "lr": lr_used})
        _write_log(log_path, history)
        _save(last, model, config, state, meta)
        if improved:
            _save(best, model, config, state, meta)
        logger.info("%s epoch %d train %.4f val %.4f lr %.2e", kind, epoch,
                    history[-1]["train_loss"], val, lr_used)
        if epoch_callback is not None:
            epoch_callback(epoch, history[-1])
    if not best.exists():
        _save(best, model, config, state, meta)
        _save(last, model, config, state, meta)
        _write_log(log_path, history)
    return TrainResult(best, last, log_path, history, state, initial, time.perf_counter() - t0)
