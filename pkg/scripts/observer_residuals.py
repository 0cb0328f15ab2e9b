"""Fit the CAL observer on each instrument and score it on every instrument.

Prints the held-out RMS residual (mm) matrix; rows are the fitting
instrument, columns the evaluation instrument. Needs no training.
"""
from __future__ import annotations

import argparse

from ivs.actuator import calibration_rollouts, fit_observer, max_steady_error, observer_residual
from ivs.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(args.config)
    names = sorted(cfg.instruments)
    print("steady-state error bound (mm):")
    for n in names:
        e = max_steady_error(cfg.instrument(n))
        print(f"  {n}: x {e[0]:.2f}  y {e[1]:.2f}")
    print("fit \\ eval " + " ".join(f"{n:>6s}" for n in names))
    for fit_on in names:
        obs = fit_observer(calibration_rollouts(cfg.instrument(fit_on), args.seed))
        row = [observer_residual(obs, calibration_rollouts(cfg.instrument(n), args.seed + 1)) for n in names]
        print(f"{fit_on:>10s} " + " ".join(f"{r:6.2f}" for r in row))


if __name__ == "__main__":
    main()
