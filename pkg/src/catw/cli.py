"""Command line entry point.

Stage subcommands run the named stage together with whatever upstream stages
it needs; upstream stages whose inputs are unchanged are reused from cache.
Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from catw.config import ConfigError, load_config, preset
from catw.pipeline import STAGES, UPSTREAM, StageFailure, run_pipeline

log = logging.getLogger("catw")

DEFAULT_OUT = "catw-out"
STAGE_COMMANDS = {
    "synth": "corpus",
    "ingest": "corpus",
    "train-ae": "train-ae",
    "train-ldm": "train-ldm",
    "attack": "attack",
    "diagnose": "diagnose",
    "cat": "cat",
    "customize": "customize",
    "report": "report",
}


def _closure(stage: str) -> list[str]:
    need = {stage}
    frontier = [stage]
    while frontier:
        for up in UPSTREAM[frontier.pop()]:
            if up not in need:
                need.add(up)
                frontier.append(up)
    return [s for s in STAGES if s in need]


def _stages_arg(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in STAGES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown stages {bad}; choose from {', '.join(STAGES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="preset name or INI file (default: fig3-desk)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help=f"output root (default: $CATW_OUT or ./{DEFAULT_OUT})")
    common.add_argument("--stage", type=_stages_arg, action="extend", help="restrict to these stages (comma separated)")
    common.add_argument("--force", action="store_true", help="ignore cached stage outputs")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="catw", description="Toy latent-diffusion workbench.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run a preset or config file").add_argument("target", nargs="?")
    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("ingest", parents=[common], help="ingest an image folder as the corpus").add_argument("path")
    for name in ("train-ae", "train-ldm", "attack", "diagnose", "cat", "customize", "report"):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage (and missing upstream stages)")
    pur = sub.add_parser("purify", help="Gaussian-filter a corpus directory")
    pur.add_argument("src")
    pur.add_argument("dst")
    pur.add_argument("--ksize", type=int, default=5)
    pur.add_argument("--sigma", type=float, default=1.0)
    pur.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("CATW_OUT") or DEFAULT_OUT)


def _load(args, target: str | None):
    cfg = load_config(target) if target else preset("fig3-desk")
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _purify(args) -> int:
    from catw.cat import gaussian_purify
    from catw.corpus import Corpus, CorpusError, load_corpus, save_corpus

    try:
        src = load_corpus(args.src)
        x = gaussian_purify(src.images, args.ksize, args.sigma)
    except (OSError, ValueError, CorpusError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    side = {"purified_by": {"method": "gaussian", "ksize": args.ksize, "sigma": args.sigma}, "source": str(args.src)}
    save_corpus(Corpus(x, list(src.ids), src.identity.copy(), list(src.split), dict(src.meta)), args.dst, side)
    print(f"purified {len(src)} images -> {args.dst}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "purify":
        return _purify(args)
    try:
        cfg = _load(args, args.target if args.command == "run" else args.config)
        if args.command == "run" and args.config:
            raise ConfigError("give the config either positionally or with --config, not both")
        if args.command == "ingest":
            cfg.corpus.kind, cfg.corpus.path = "folder", args.path
        if args.command == "synth":
            cfg.corpus.kind = "synthetic"
        stages = args.stage or (None if args.command == "run" else _closure(STAGE_COMMANDS[args.command]))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = _out_root(args)
    try:
        entry = run_pipeline(cfg, out, stages=stages, force=args.force)
    except StageFailure as exc:
        print(f"stage failure: {exc} (see {out / 'manifest.json'})", file=sys.stderr)
        return 2
    for st in entry["stages"]:
        print(f"{st['name']:<10} {st['status']:<7} {st['seconds']:8.1f}s")
    report = out / "stages" / "report" / "report.json"
    if any(st["name"] == "report" for st in entry["stages"]):
        print(f"report: {report}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
