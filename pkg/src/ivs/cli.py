"""`ivs` command line: gen-demos, train, eval, ablate, benchmark.

Failures print a single JSON line ``{"error": ..., "type": ...}`` on stderr
and exit with status 2 (usage) or 1 (runtime).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("ivs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv(kind):
    def parse(s):
        try:
            return [kind(x) for x in s.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ivs", description="Intermittent visual servoing simulator")
    p.add_argument("--config", help="JSON file overriding defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demos", help="generate demonstration datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instrument", default="A")
    g.add_argument("--per-peg", type=int, default=None)

    t = sub.add_parser("train", help="train a CNN ensemble")
    t.add_argument("--data", required=True)
    t.add_argument("--k", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--report", help="write the per-epoch training report here")

    e = sub.add_parser("eval", help="run trials of one method on one instrument")
    e.add_argument("--method", required=True, type=str.upper, choices=["UNCAL", "CAL", "IVS"])
    e.add_argument("--instrument", default="A")
    e.add_argument("--cal-instrument", default="A", help="instrument the CAL observer is fitted on")
    e.add_argument("--model")
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="ensemble-size ablation")
    a.add_argument("--k", type=_csv(int), default=[1, 2, 4, 8])
    a.add_argument("--model", required=True, help="checkpoint with at least max(k) members")
    a.add_argument("--instrument", default="A")
    a.add_argument("--trials", type=int, default=10)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)

    b = sub.add_parser("benchmark", help="methods x instruments table")
    b.add_argument("--methods", type=_csv(str), default=["UNCAL", "CAL_A", "IVS"])
    b.add_argument("--instruments", type=_csv(str), default=["A", "B", "C"])
    b.add_argument("--model")
    b.add_argument("--trials", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    return p


def _load_model(path):
    from .policy import load_ensemble

    if not path:
        raise ValueError("IVS needs --model")
    return load_ensemble(path)


def cmd_gen_demos(args, cfg):
    from .supervisor import collect_dataset

    per_peg = args.per_peg if args.per_peg is not None else cfg.demos_per_peg
    pick, place = collect_dataset(cfg.demo, args.seed, cfg.instrument(args.instrument), cfg.camera,
                                  per_peg=per_peg, out_dir=args.out)
    return {"out": args.out, "pick": len(pick), "place": len(place),
            "pick_frames": sum(len(t.frames) for t in pick)}


def load_training_data(directory, cfg):
    from .datapipe import read_dataset, stack_samples
    from .policy import Dataset

    d = Path(directory)
    return tuple(Dataset(*stack_samples(read_dataset(d / s), cfg.hyper, cfg.camera)) for s in ("pick", "place"))


def cmd_train(args, cfg):
    from dataclasses import replace

    from .policy import init_ensemble, save_ensemble, train_ensemble

    tc = cfg.train
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    if args.lr is not None:
        tc = replace(tc, lr=args.lr)
    pick, place = load_training_data(args.data, cfg)
    k = args.k if args.k is not None else cfg.hyper.k
    ens = init_ensemble(k, args.seed, cfg.hyper, cfg.arch)
    reports = train_ensemble(ens, pick, place, tc, log=log.info)
    save_ensemble(ens, args.out)
    if args.report:
        Path(args.report).write_text(json.dumps(reports, sort_keys=True, indent=1) + "\n")
    return {"out": args.out, "k": k, "final": [r["final"] for r in reports]}


def cmd_eval(args, cfg):
    from .bench import benchmark, emit_report

    method = f"CAL_{args.cal_instrument}" if args.method == "CAL" else args.method
    ens = _load_model(args.model) if args.method == "IVS" else None
    s = benchmark([method], [args.instrument], args.trials, args.seed, cfg, ens)
    emit_report(s, args.out)
    return {"out": args.out, **{k: s.cells[0][k] for k in ("method", "instrument", "transfer_rate")}}


def cmd_benchmark(args, cfg):
    from .bench import benchmark, emit_report

    ens = _load_model(args.model) if any(m.upper() == "IVS" for m in args.methods) else None
    s = benchmark(args.methods, args.instruments, args.trials, args.seed, cfg, ens)
    emit_report(s, args.out)
    return {"out": args.out, "cells": [[c["method"], c["instrument"], c["transfer_rate"]] for c in s.cells]}


def cmd_ablate(args, cfg):
    from .bench import BenchmarkSummary, ablate_ensemble, emit_report

    ens = _load_model(args.model)
    rows = ablate_ensemble(ens, args.k, args.trials, args.seed, cfg, args.instrument)
    emit_report(BenchmarkSummary(cfg.hash(), args.seed, ablation=rows, config=cfg.to_dict()), args.out)
    return {"out": args.out, "rows": rows}


COMMANDS = {"gen-demos": cmd_gen_demos, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    from .config import load_config

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": str(exc), "type": "usage"}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        result = COMMANDS[args.cmd](args, cfg)
    except Exception as exc:  # noqa: BLE001 -- the CLI contract is one error line
        print(json.dumps({"error": str(exc).splitlines()[0] if str(exc) else repr(exc),
                          "type": type(exc).__name__}), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
