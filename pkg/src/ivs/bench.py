"""Trial execution, method x instrument benchmarks, ensemble ablation and JSON reports."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .actuator import Observer, calibration_rollouts, fit_observer
from .config import Config
from .control import CorrectionResult, ServoConfig, Sim, run_subtask, servo_rate
from .supervisor import _seed
from .workspace import HOME, Block, ContractViolation, init_board, pick_point

SCHEMA_VERSION = 1
SUBTASKS = ("pick", "place")


def _corr_dict(c: CorrectionResult) -> dict:
    return {"steps": c.steps, "distance": c.distance, "elapsed": c.elapsed, "terminated": c.terminated}


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else None


@dataclass
class TrialReport:
    method: str
    instrument: str
    seed: int
    picks_attempted: int = 0
    picks_succeeded: int = 0
    places_attempted: int = 0
    places_succeeded: int = 0
    transfers_attempted: int = 0
    transfers_succeeded: int = 0
    mean_transfer_time: float | None = None
    correction: dict = field(default_factory=dict)  # subtask -> {n, steps, distance, elapsed}
    transfers: list = field(default_factory=list)
    sim_time: float = 0.0

    def check(self) -> None:
        for a, s in (("picks", self.picks_succeeded), ("places", self.places_succeeded),
                     ("transfers", self.transfers_succeeded)):
            if s > getattr(self, f"{a}_attempted"):
                raise AssertionError(f"{a}: succeeded > attempted")
        if self.transfers_succeeded > min(self.picks_succeeded, self.places_succeeded):
            raise AssertionError("transfers exceed picks or places")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrialReport":
        return cls(**d)


def _correction_stats(records, subtask: str) -> dict:
    cs = [c for r in records for c in r[f"{subtask}_corrections"]]
    return {
        "n": len(cs),
        "steps": _mean([c["steps"] for c in cs]),
        "distance": _mean([c["distance"] for c in cs]),
        "elapsed": _mean([c["elapsed"] for c in cs]),
    }


def _resolve(method: str):
    """'CAL_B' -> ('CAL', 'B'); 'CAL' -> ('CAL', 'A'); others pass through."""
    base, _, src = method.upper().partition("_")
    if base not in ("UNCAL", "CAL", "IVS"):
        raise ValueError(f"unknown method {method!r}")
    return base, (src or "A")


def run_trial(method: str, instrument: str, seed: int, config: Config | None = None,
              ensemble=None, observer: Observer | None = None, label: str | None = None,
              inst=None, perfect_perception: bool = False) -> TrialReport:
    """Twelve transfers: left to right, then back.

    A failed pick is retried once after re-perception and counts as a failed
    transfer attempt; a block whose place fails is dropped and abandoned.
    """
    config = config or Config()
    base, _ = _resolve(method)
    if base == "IVS" and ensemble is None:
        raise ContractViolation("IVS trial needs a trained ensemble")
    if base == "CAL" and observer is None:
        raise ContractViolation("CAL trial needs a fitted observer")
    inst = inst if inst is not None else config.instrument(instrument)
    inst = copy.deepcopy(inst)
    state = init_board(_seed(seed, 0))
    sim = Sim(state, inst, config.camera, observer if base == "CAL" else None, config.timing)
    if perfect_perception:
        sim.block_sd = sim.peg_sd = 0.0
    sim.reset_robot(np.asarray(HOME), seed=_seed(seed, 1))
    cfg = ServoConfig.for_ensemble(ensemble.k, config.hyper, config.timing, config.max_steps) if base == "IVS" else None

    rep = TrialReport(label or method, instrument, seed)
    n_perceive = 0
    for src_ids, dst_ids in ((range(0, 6), range(6, 12)), (range(6, 12), range(0, 6))):
        for src, dst in zip(src_ids, dst_ids):
            block = state.block_on(src)
            if block is None:
                continue
            t0 = state.clock
            rec = {"block": block.id, "src": src, "dst": dst, "pick_attempts": 0,
                   "picked": False, "placed": False, "pick_corrections": [], "place_corrections": []}
            perceived = None
            for _ in range(2):
                perceived = sim.perceive(_seed(seed, 2, n_perceive))
                n_perceive += 1
                res = run_subtask("pick", base, sim, cfg, block.id, perceived, ensemble, peg_id=src)
                rec["pick_attempts"] += 1
                rep.picks_attempted += 1
                rep.transfers_attempted += 1  # every pick attempt opens a transfer attempt
                if base == "IVS":
                    rec["pick_corrections"].append(_corr_dict(res.correction))
                if res.success:
                    rec["picked"] = True
                    rep.picks_succeeded += 1
                    break
            if rec["picked"]:
                center, orient = perceived.blocks[block.id]
                believed = np.asarray(center) - pick_point(Block(block.id, center, orient))
                res = run_subtask("place", base, sim, cfg, dst, perceived, ensemble, tool_offset=believed)
                rep.places_attempted += 1
                if base == "IVS":
                    rec["place_corrections"].append(_corr_dict(res.correction))
                if res.success:
                    rec["placed"] = True
                    rep.places_succeeded += 1
                    rep.transfers_succeeded += 1
            rec["elapsed"] = state.clock - t0
            rec["correction_elapsed"] = sum(c["elapsed"] for k in ("pick_corrections", "place_corrections")
                                            for c in rec[k])
            rep.transfers.append(rec)
    ok = [r["elapsed"] for r in rep.transfers if r["placed"]]
    rep.mean_transfer_time = _mean(ok)
    rep.correction = {s: _correction_stats(rep.transfers, s) for s in SUBTASKS}
    rep.sim_time = state.clock
    rep.check()
    return rep


# ---------------------------------------------------------------- aggregation


def aggregate(trials: list[TrialReport]) -> dict:
    def rate(s, a):
        na = sum(getattr(t, a) for t in trials)
        return sum(getattr(t, s) for t in trials) / na if na else 0.0

    recs = [r for t in trials for r in t.transfers]
    times = [r["elapsed"] for r in recs if r["placed"]]
    return {
        "method": trials[0].method,
        "instrument": trials[0].instrument,
        "trials": len(trials),
        "pick_rate": rate("picks_succeeded", "picks_attempted"),
        "place_rate": rate("places_succeeded", "places_attempted"),
        "transfer_rate": rate("transfers_succeeded", "transfers_attempted"),
        "transfers_succeeded": sum(t.transfers_succeeded for t in trials),
        "transfers_attempted": sum(t.transfers_attempted for t in trials),
        "mean_transfer_time": _mean(times),
        "correction": {s: _correction_stats(recs, s) for s in SUBTASKS},
    }


@dataclass
class BenchmarkSummary:
    config_hash: str
    seed: int
    cells: list = field(default_factory=list)
    ablation: list = field(default_factory=list)
    trials: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def cell(self, method: str, instrument: str) -> dict:
        for c in self.cells:
            if c["method"] == method and c["instrument"] == instrument:
                return c
        raise KeyError((method, instrument))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trials"] = [t.to_dict() if isinstance(t, TrialReport) else t for t in self.trials]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSummary":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        d = dict(d)
        d["trials"] = [TrialReport.from_dict(t) for t in d["trials"]]
        return cls(**d)


def fit_cal_observer(instrument: str, seed: int, config: Config | None = None) -> Observer:
    config = config or Config()
    inst = config.instrument(instrument)
    rolls = calibration_rollouts(inst, _seed(seed, 3, ord(instrument[0])), n_rollouts=config.cal_rollouts)
    return fit_observer(rolls, name=f"CAL_{instrument}")


def benchmark(methods, instruments, n_trials: int = 10, seed: int = 0, config: Config | None = None,
              ensemble=None, observers: dict | None = None, ablation=None) -> BenchmarkSummary:
    """Every method on every instrument, `n_trials` paired trials each (trial i uses seed + i)."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    config = config or Config()
    observers = dict(observers or {})
    summary = BenchmarkSummary(config.hash(), seed, config=config.to_dict())
    for method in methods:
        base, src = _resolve(method)
        label = f"CAL_{src}" if base == "CAL" else base
        obs = None
        if base == "CAL":
            obs = observers.get(src) or fit_cal_observer(src, seed, config)
            observers[src] = obs
        for name in instruments:
            trials = [run_trial(base, name, seed + i, config, ensemble, obs, label) for i in range(n_trials)]
            summary.trials.extend(trials)
            summary.cells.append(aggregate(trials))
    if ablation:
        summary.ablation = list(ablation)
    return summary


def ablate_ensemble(ensemble, k_list, n_trials: int = 10, seed: int = 0, config: Config | None = None,
                    instrument: str = "A") -> list[dict]:
    """Transfer success of the first-k-member sub-ensembles at their k-specific servo rate.

    Member i is trained from seed + i alone, so the first k members of a larger
    ensemble are exactly the ensemble a k-member training run would produce.
    """
    config = config or Config()
    rows = []
    for k in k_list:
        if not 1 <= k <= ensemble.k:
            raise ValueError(f"k={k} outside 1..{ensemble.k}")
        sub = ensemble.subset(k)
        trials = [run_trial("IVS", instrument, seed + i, config, sub, label=f"IVS_k{k}") for i in range(n_trials)]
        cell = aggregate(trials)
        rows.append({"k": k, "rate": servo_rate(k, config.timing.rates), "trials": n_trials,
                     "transfer_rate": cell["transfer_rate"], "pick_rate": cell["pick_rate"],
                     "place_rate": cell["place_rate"]})
    return rows


def dumps_report(summary: BenchmarkSummary) -> str:
    return json.dumps(summary.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"


def emit_report(summary: BenchmarkSummary, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_report(summary))
    return path


def load_report(path) -> BenchmarkSummary:
    return BenchmarkSummary.from_dict(json.loads(Path(path).read_text()))
