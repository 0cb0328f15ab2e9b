"""Ensemble-size ablation: train 8 members once, evaluate the first k for k in 1, 2, 4, 8.

    python scripts/ablate_ensemble.py --work runs/ablation --trials 10
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from ivs.cli import main as ivs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", default="runs/ablation")
    ap.add_argument("--demos", help="reuse an existing demonstration directory")
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    demos = Path(args.demos) if args.demos else work / "demos"
    if not demos.exists():
        assert ivs(["gen-demos", "--out", str(demos), "--seed", str(args.seed)]) == 0
    model = work / "model8.npz"
    if not model.exists():
        assert ivs(["-v", "train", "--data", str(demos), "--k", "8", "--seed", str(args.seed), "--out", str(model)]) == 0
    out = work / "ablation.json"
    assert ivs(["ablate", "--model", str(model), "--trials", str(args.trials), "--seed", str(args.seed),
                "--out", str(out)]) == 0
    print(f"{'k':>2s} {'Hz':>5s} {'success':>8s}")
    for r in json.loads(out.read_text())["ablation"]:
        print(f"{r['k']:2d} {r['rate']:5.1f} {100 * r['transfer_rate']:7.1f}%")


if __name__ == "__main__":
    main()
