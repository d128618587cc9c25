"""Command-line entry point: ``textcue <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 data/config error, 4 numeric failure.
Failures print one JSON line ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .audio import AudioError, read_wav, write_wav
from .config import ConfigError, dump_config, load_config
from .corpus import CorpusConfig, CorpusError, generate_corpus, load_example, read_manifest
from .diffops import CheckpointError, NumericError, set_determinism
from .embed import EmbeddingError
from .evaluate import EvalError, EvalReport, evaluate
from .losses import MetricError
from .metrics import sdr, si_sdr
from .pipeline import extract, load_model, match, providers_for, separate
from .report import render_figures, report_curves
from .trainer import TrainConfig, train

logger = logging.getLogger("textcue")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
DATA_ERRORS = (AudioError, CorpusError, ConfigError, CheckpointError, EmbeddingError, EvalError,
               MetricError, FileNotFoundError, KeyError, ValueError)


def _resolve(args) -> dict:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _snapshot(cfg: dict, out: Path, args) -> Path:
    """Resolved config next to the outputs: inside a directory, or beside a file."""
    snap = dict(cfg, command=args.command)
    target = out / "resolved_config.yaml" if out.suffix == "" else out.with_suffix(".config.yaml")
    return dump_config(snap, target)


def _emit(obj: dict):
    print(json.dumps(obj, sort_keys=True))


def _examples(corpus: Path, split: str) -> list:
    recs = read_manifest(corpus / "manifest.jsonl", split)
    if not recs:
        raise CorpusError(f"{corpus}: no examples in split {split!r}")
    return [load_example(r, corpus) for r in recs]


# --- subcommands ------------------------------------------------------------

def cmd_generate_corpus(args, cfg):
    out = Path(args.out)
    manifest = generate_corpus(CorpusConfig.from_dict(cfg["corpus"]), cfg["seed"], out, args.workers)
    _snapshot(cfg, out, args)
    _emit({"manifest": str(manifest), "examples": sum(1 for _ in open(manifest))})


def _cmd_train(kind):
    def run(args, cfg):
        corpus, out = Path(args.corpus), Path(args.out)
        section = cfg[kind]
        tcfg = TrainConfig(**section["train"])
        res = train(kind, _examples(corpus, "train"), _examples(corpus, "valid"), section["model"],
                    out, tcfg, seed=cfg["seed"], resume=args.resume, embed=cfg["embed"])
        _snapshot(cfg, out, args)
        last = res.history[-1] if res.history else {}
        _emit({"kind": kind, "best": str(res.best_path), "epochs": res.state.epoch,
               "best_val_loss": res.state.best_val, "last": last, "seconds": round(res.seconds, 1)})
    return run


def cmd_evaluate(args, cfg):
    corpus, out = Path(args.corpus), Path(args.out)
    split = args.split or cfg["eval"]["split"]
    recs = read_manifest(corpus / "manifest.jsonl", split)
    if not recs:
        raise CorpusError(f"{corpus}: no examples in split {split!r}")
    kw, info = {}, {"split": split, "corpus": str(corpus)}
    if args.mode == "tpe":
        if not args.checkpoint:
            raise ConfigError("--mode tpe needs --checkpoint")
        m, c, _, _ = load_model(args.checkpoint, "tpe")
        prov = providers_for(c)
        kw["extractor"] = lambda x, p: extract(m, c, x, p, prov)
        info["checkpoint"] = str(args.checkpoint)
    else:
        if not args.separator:
            raise ConfigError(f"--mode {args.mode} needs --separator")
        sm, sc, _, _ = load_model(args.separator, "dprnn")
        kw["separator"] = lambda x: separate(sm, sc, x)
        info["separator"] = str(args.separator)
        if args.mode == "dprnn_tsr":
            if not args.matcher:
                raise ConfigError("--mode dprnn_tsr needs --matcher")
            mm, mc, _, _ = load_model(args.matcher, "tsr")
            prov = providers_for(mc)
            kw["matcher"] = lambda p, streams: match(mm, mc, p, streams, prov)[0]
            info["matcher"] = str(args.matcher)
    report = evaluate(recs, corpus, args.mode, seed=cfg["seed"], info=info, **kw)
    report.save(out)
    _snapshot(cfg, out, args)
    _emit({"report": str(out), "mode": args.mode, **report.aggregates})


def cmd_extract(args, cfg):
    m, c, _, _ = load_model(args.checkpoint, "tpe")
    mix = read_wav(args.mixture)
    est = extract(m, c, mix, args.prompt)
    out = Path(args.out)
    clipped = write_wav(est, out)
    side = {"mixture": str(args.mixture), "prompt": args.prompt, "checkpoint": str(args.checkpoint),
            "estimate": str(out), "clipped_samples": clipped}
    if args.reference:
        ref = read_wav(args.reference)
        side.update(reference=str(args.reference), si_sdr=si_sdr(est, ref), sdr=sdr(est, ref),
                    si_sdri=si_sdr(est, ref) - si_sdr(mix, ref))
    out.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    _snapshot(cfg, out, args)
    _emit(side)


def cmd_separate(args, cfg):
    m, c, _, _ = load_model(args.checkpoint, "dprnn")
    streams = separate(m, c, read_wav(args.mixture))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(streams):
        paths.append(str(out / f"stream{i}.wav"))
        write_wav(s, paths[-1])
    _snapshot(cfg, out, args)
    _emit({"streams": paths})


def cmd_match(args, cfg):
    m, c, _, _ = load_model(args.checkpoint, "tsr")
    files = sorted(Path(args.streams).glob("*.wav"))
    if not files:
        raise AudioError(f"no WAV files in {args.streams}")
    idx, probs = match(m, c, args.prompt, [read_wav(f) for f in files])
    _emit({"index": idx, "file": str(files[idx]), "files": [str(f) for f in files],
           "probabilities": [float(p) for p in probs]})


def cmd_report(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = [report_curves(EvalReport.load(p)) for p in args.reports]
    (out / "curves.json").write_text(json.dumps(curves, indent=2, sort_keys=True) + "\n")
    lines = ["mode,lo,hi,n,mean_si_sdri,accuracy"]
    for c in curves:
        for b in c["bins"]:
            lines.append(",".join(str(v if v is not None else "") for v in
                                  (c["mode"], b["lo"], b["hi"], b["n"], b["mean_si_sdri"], b["accuracy"])))
    (out / "curves.csv").write_text("\n".join(lines) + "\n")
    figures = render_figures(curves, out)
    _snapshot(cfg, out, args)
    _emit({"curves": str(out / "curves.json"), "figures": [str(f) for f in figures],
           "histogram_total": [sum(c["histogram"]["counts"]) for c in curves]})


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config (default: $TEXTCUE_CONFIG)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="textcue", description="Text-cued target speaker extraction.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate-corpus", parents=[common])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate_corpus)

    for kind in ("tpe", "dprnn", "tsr"):
        s = sub.add_parser(f"train-{kind}", parents=[common])
        s.add_argument("--corpus", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--resume", action="store_true")
        s.set_defaults(func=_cmd_train(kind))

    s = sub.add_parser("evaluate", parents=[common])
    s.add_argument("--corpus", required=True)
    s.add_argument("--mode", required=True, choices=("tpe", "dprnn_tsr", "pit", "random"))
    s.add_argument("--checkpoint", help="extractor checkpoint (tpe mode)")
    s.add_argument("--separator", help="separator checkpoint")
    s.add_argument("--matcher", help="matcher checkpoint (dprnn_tsr mode)")
    s.add_argument("--split", default=None)
    s.add_argument("--out", required=True, help="report JSON path (CSV written alongside)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("extract", parents=[common])
    s.add_argument("--mixture", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--reference")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("separate", parents=[common])
    s.add_argument("--mixture", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("match", parents=[common])
    s.add_argument("--prompt", required=True)
    s.add_argument("--streams", required=True, help="directory of candidate WAVs")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("report", parents=[common])
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = str(exc) or type(exc).__name__
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.print_usage(sys.stderr)
        return _fail("usage", ValueError("--workers must be >= 1"), EXIT_USAGE)
    try:
        cfg = _resolve(args)
        set_determinism(cfg["seed"])
        args.func(args, cfg)
    except NumericError as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except DATA_ERRORS as exc:
        return _fail("data", exc, EXIT_DATA)
    return 0


if __name__ == "__main__":
    sys.exit(main())
