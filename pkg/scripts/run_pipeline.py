"""Generate demonstrations, train a k-member ensemble, and benchmark all methods.

    python scripts/run_pipeline.py --work runs/default --trials 10

Each stage is skipped when its output already exists, so an interrupted run
resumes where it stopped.
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from ivs.cli import main as ivs


def stage(name, out: Path, argv):
    if out.exists():
        print(f"[skip] {name}: {out} exists")
        return
    t0 = time.perf_counter()
    code = ivs(argv)
    if code != 0:
        raise SystemExit(f"{name} failed with status {code}")
    print(f"[done] {name} in {time.perf_counter() - t0:.0f}s")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", default="runs/default")
    ap.add_argument("--config")
    ap.add_argument("--k", type=int, default=4)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    base = ["--config", args.config] if args.config else []

    stage("gen-demos", work / "demos", base + ["gen-demos", "--out", str(work / "demos"), "--seed", str(args.seed)])
    stage("train", work / "model.npz", base + ["-v", "train", "--data", str(work / "demos"), "--k", str(args.k),
                                             "--seed", str(args.seed), "--out", str(work / "model.npz"),
                                             "--report", str(work / "training.json")])
    stage("benchmark", work / "benchmark.json",
          base + ["benchmark", "--model", str(work / "model.npz"), "--trials", str(args.trials),
                  "--seed", str(args.seed), "--out", str(work / "benchmark.json")])

    report = json.loads((work / "benchmark.json").read_text())
    print(f"{'method':8s} " + " ".join(f"{i:>6s}" for i in ("A", "B", "C")))
    for m in ("UNCAL", "CAL_A", "IVS"):
        cells = {c["instrument"]: c for c in report["cells"] if c["method"] == m}
        print(f"{m:8s} " + " ".join(f"{100 * cells[i]['transfer_rate']:6.1f}" for i in ("A", "B", "C") if i in cells))


if __name__ == "__main__":
    main()
