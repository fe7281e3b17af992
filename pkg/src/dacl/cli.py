"""Command-line front end.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from . import data, evaluation, pipeline
from .config import load_config
from .errors import ConfigError, DaclError, UsageError

VERBS = ("gen-data", "train-style", "train-contrastive", "train-task", "eval", "report")
_STAGE_OF = {"train-style": "style", "train-contrastive": "contrastive", "train-task": "task"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dacl", description="Two-stage domain adaptation on procedural street scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a procedural two-domain dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=500)
    g.add_argument("--test", type=int, default=100)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=64)

    for verb in _STAGE_OF:
        t = sub.add_parser(verb, help=f"run the {_STAGE_OF[verb]} training stage")
        t.add_argument("--config", required=True)
        t.add_argument("--resume")

    e = sub.add_parser("eval", help="evaluate a task checkpoint on the target test split")
    e.add_argument("--task", required=True, choices=("depth", "seg"))
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--cap", type=int, choices=(50, 80), default=80)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--dump-images", action="store_true")

    r = sub.add_parser("report", help="render a metrics report, optionally against a baseline")
    r.add_argument("--metrics", required=True)
    r.add_argument("--baseline")
    r.add_argument("--out")
    return p


def _threads() -> None:
    n = os.environ.get("DACL_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError as exc:
            raise UsageError(f"DACL_THREADS must be an integer, got {n!r}") from exc


def run(args) -> None:
    if args.verb == "gen-data":
        data.write_dataset(args.out, args.seed, args.train, args.test, args.height, args.width)
    elif args.verb in _STAGE_OF:
        stage = _STAGE_OF[args.verb]
        cfg = load_config(args.config, defaults={"stage": stage})
        if cfg.stage != stage:
            raise ConfigError(f"{args.config} is a {cfg.stage!r} config, not {stage!r}")
        path = pipeline.STAGE_RUNNERS[stage](cfg, resume=args.resume)
        print(path)
    elif args.verb == "eval":
        rep = pipeline.evaluate(args.task, args.ckpt, args.data, args.split, float(args.cap), args.out, args.dump_images)
        print(evaluation.render_table(evaluation.metrics_records(rep.task, rep.metrics)), end="")
    elif args.verb == "report":
        rec = evaluation.read_report(args.metrics)
        base = evaluation.read_report(args.baseline) if args.baseline else None
        table = evaluation.render_table(rec, base)
        if args.out:
            Path(args.out).write_text(table)
        print(table, end="")
    else:
        raise UsageError(f"expected one of: {', '.join(VERBS)}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        _threads()
        run(args)
    except DaclError as exc:
        print(f"dacl: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dacl: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
