"""Command-line entry point.

    stylevar prepare     --config run.ini
    stylevar train       --config run.ini [--seed N] [--out DIR]
    stylevar transfer    --config run.ini [--input FILE --target Y] [--beam K]
    stylevar evaluate    --config run.ini [--outputs FILE]
    stylevar verify-math [--gradients]
    stylevar report      --out DIR

Exit codes: 0 ok, 1 config error, 2 runtime error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import ConfigError, StyleVarError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stylevar", description="Variational style transfer runs on CPU.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")
        sp.add_argument("--out", default=None, help="output root (overrides run.output_dir and the environment)")
        sp.add_argument("--beam", type=int, default=None, help="beam width (default greedy)")
        sp.add_argument("--device", default="cpu", choices=["cpu"], help="only cpu is supported")
        return sp

    common(sub.add_parser("prepare", help="write corpus, vocab, caches and the evaluator"))
    common(sub.add_parser("train", help="train with validation-GM checkpoint selection"))
    t = common(sub.add_parser("transfer", help="transfer the test split or an input file"))
    t.add_argument("--input", default=None)
    t.add_argument("--target", type=int, default=None)
    t.add_argument("--output", default=None)
    e = common(sub.add_parser("evaluate", help="metrics for transferred outputs"))
    e.add_argument("--outputs", default=None)
    v = common(sub.add_parser("verify-math", help="run the oracle suite"), config=False)
    v.add_argument("--gradients", action="store_true", help="also grad-check every loss (minutes)")
    v.add_argument("--json", default=None, help="write results to this file")
    r = common(sub.add_parser("report", help="comparison table over runs under the output root"), config=False)
    r.add_argument("--config", default=None)
    return p


def _load(args):
    from .config import load_config

    cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    if args.beam is not None:
        if args.beam < 1:
            raise ConfigError("--beam must be >= 1", "--beam")
        cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, beam=args.beam))
    return cfg


def cmd_verify(args) -> int:
    from .verify import gradient_integrity, run_oracle_suite

    results = run_oracle_suite(args.seed or 0)
    if args.gradients:
        results.append(gradient_integrity())
    for r in results:
        print(r.line())
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in results], indent=2, default=float))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_report(args) -> int:
    import os

    from .config import OUTPUT_ROOT_ENV
    from .runner import collect_reports, rebuild_comparison

    if args.out:
        root = Path(args.out)
    elif args.config:
        root = Path(_load(args).output_dir)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    if not root.is_dir():
        raise ConfigError(f"output root {root} does not exist", "--out")
    reports = collect_reports(root)
    path = rebuild_comparison(root)
    print(f"{'system':<24}{'ACC':>8}{'BLEU_s':>8}{'BLEU_r':>8}{'PPL':>9}{'GM':>7}")
    for r in reports:
        print(f"{r.system:<24}{r.acc:8.2f}{r.bleu_s:8.2f}{r.bleu_r:8.2f}{r.ppl:9.2f}{r.gm:7.2f}")
    print(f"wrote {path}")
    return EXIT_OK


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "verify-math":
            return cmd_verify(args)
        if args.command == "report":
            return cmd_report(args)
        from . import runner

        cfg = _load(args)
        if args.command == "prepare":
            runner.prepare(cfg)
        elif args.command == "train":
            best = runner.train(cfg)
            print(f"best validation GM {best['gm']:.3f} at epoch {best['epoch']}")
        elif args.command == "transfer":
            runner.transfer(cfg, args.input, args.target, args.output)
        elif args.command == "evaluate":
            runner.evaluate(cfg, args.outputs)
        return EXIT_OK
    except ConfigError as exc:
        key = f" [{exc.key}]" if getattr(exc, "key", None) else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StyleVarError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
