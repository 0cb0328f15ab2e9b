"""Cable-transmission model: backlash via a per-axis play operator.

The motor side (encoder) sees the commanded pose; the tip sees the output of
a play operator with deadband ``b`` followed by an affine map ``s * y + d``
and a small Gaussian jitter.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .workspace import BOARD_RECT, ContractViolation, Pose2, in_workspace

PRESETS = {
    "A": dict(deadband=(2.0, 1.6), scale=(1.00, 1.00), offset=(0.5, -0.3)),
    "B": dict(deadband=(4.4, 3.6), scale=(1.02, 0.98), offset=(-1.0, 0.8)),
    "C": dict(deadband=(3.0, 3.2), scale=(0.99, 1.03), offset=(1.2, 1.0)),
}
DEFAULT_NOISE_SD = 0.05


@dataclass
class InstrumentModel:
    name: str
    deadband: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    noise_sd: float = DEFAULT_NOISE_SD
    play_state: np.ndarray = field(default_factory=lambda: np.zeros(2))
    last_command: np.ndarray = field(default_factory=lambda: np.zeros(2))
    seed: int = 0

    def __post_init__(self):
        self.deadband = np.asarray(self.deadband, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        self.play_state = np.asarray(self.play_state, dtype=float).copy()
        self.last_command = np.asarray(self.last_command, dtype=float).copy()
        if np.any(self.deadband < 0) or np.any(self.scale <= 0) or self.noise_sd < 0:
            raise ValueError(f"invalid instrument parameters for {self.name!r}")
        self._rng = np.random.default_rng(self.seed)

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def reset(self, command=(0.0, 0.0), seed: int | None = None) -> None:
        """Put the transmission at rest at `command` with the play centred."""
        self.last_command = np.asarray(command, dtype=float).copy()
        self.play_state = self.last_command.copy()
        if seed is not None:
            self.reseed(seed)

    def params(self) -> dict:
        return dict(
            name=self.name,
            deadband=self.deadband.tolist(),
            scale=self.scale.tolist(),
            offset=self.offset.tolist(),
            noise_sd=self.noise_sd,
        )

    def output(self, y=None) -> np.ndarray:
        """Noise-free tip pose for play state `y` (defaults to the current state)."""
        y = self.play_state if y is None else np.asarray(y, dtype=float)
        return self.scale * y + self.offset


def play_update(y, x, b):
    """One step of the play operator; works elementwise on arrays."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    half = 0.5 * np.asarray(b, dtype=float)
    gap = x - y
    return np.where(np.abs(gap) <= half, y, x - np.sign(gap) * half)


def play_replay(xs, b, y0=0.0):
    """Play-operator output for a command sequence `xs` of shape (N,) or (N, 2)."""
    xs = np.asarray(xs, dtype=float)
    out = np.empty_like(xs)
    y = np.broadcast_to(np.asarray(y0, dtype=float), xs.shape[1:]).copy()
    for i, x in enumerate(xs):
        y = play_update(y, x, b)
        out[i] = y
    return out


def command_move(inst: InstrumentModel, command) -> Pose2:
    if not in_workspace(command):
        raise ContractViolation(f"command {tuple(command)} outside workspace")
    x = np.asarray(command, dtype=float)
    inst.play_state = play_update(inst.play_state, x, inst.deadband)
    inst.last_command = x.copy()
    true = inst.output()
    if inst.noise_sd > 0:
        true = true + inst._rng.normal(0.0, inst.noise_sd, size=2)
    return Pose2(float(true[0]), float(true[1]))


def encoder_estimate(inst: InstrumentModel, command) -> Pose2:
    # Motor-side reading: the commanded pose itself.
    return Pose2(float(command[0]), float(command[1]))


def make_instrument(preset: str, overrides: dict | None = None, seed: int = 0) -> InstrumentModel:
    base = dict(PRESETS.get(preset, {}))
    if overrides:
        base.update({k: v for k, v in overrides.items() if k != "name"})
    if not {"deadband", "scale", "offset"} <= base.keys():
        raise KeyError(f"unknown instrument preset {preset!r}")
    noise = base.pop("noise_sd", DEFAULT_NOISE_SD)
    return InstrumentModel(preset, base["deadband"], base["scale"], base["offset"], noise, seed=seed)


def perfect_instrument(name: str = "ideal") -> InstrumentModel:
    return InstrumentModel(name, (0.0, 0.0), (1.0, 1.0), (0.0, 0.0), noise_sd=0.0)


def max_steady_error(inst: InstrumentModel, rect=BOARD_RECT) -> np.ndarray:
    """Per-axis worst |s*y + d - x| with y = x -/+ b/2 and x over the board rectangle."""
    lo = np.array(rect[:2])
    hi = np.array(rect[2:])
    worst = np.zeros(2)
    for x in (lo, hi):
        for sgn in (-1.0, 1.0):
            err = np.abs(inst.scale * (x + sgn * inst.deadband / 2) + inst.offset - x)
            worst = np.maximum(worst, err)
    return worst


# ---------------------------------------------------------------- observer


@dataclass
class Observer:
    deadband: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    residual_rms: float = float("nan")
    name: str = ""

    def instrument(self) -> InstrumentModel:
        return InstrumentModel(self.name or "observer", self.deadband, self.scale, self.offset, 0.0)

    def to_dict(self) -> dict:
        return dict(
            name=self.name,
            deadband=self.deadband.tolist(),
            scale=self.scale.tolist(),
            offset=self.offset.tolist(),
            residual_rms=self.residual_rms,
        )


def calibration_rollouts(inst: InstrumentModel, seed: int, n_rollouts: int = 4,
                         n_waypoints: int = 12, step: float = 1.0, rect=BOARD_RECT):
    """Command sweeps between random waypoints on the board, with measured tip poses.

    The instrument is reset to rest at the first command of every rollout.
    """
    rng = np.random.default_rng(seed)
    lo = np.array(rect[:2]) + 5.0
    hi = np.array(rect[2:]) - 5.0
    rollouts = []
    for _ in range(n_rollouts):
        pts = rng.uniform(lo, hi, size=(n_waypoints, 2))
        cmds = [pts[0]]
        for a, b in zip(pts[:-1], pts[1:]):
            n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
            t = np.arange(1, n + 1)[:, None] / n
            cmds.extend(a + t * (b - a))
        cmds = np.asarray(cmds)
        inst.reset((0.0, 0.0), seed=int(rng.integers(2**31)))
        true = np.array([command_move(inst, c) for c in cmds])
        rollouts.append((cmds, true))
    return rollouts


def _fit_axis(xs_list, zs_list):
    """Fit (b, s, d) for one axis by profiling the linear (s, d) least squares over b."""
    span = max(float(np.ptp(np.concatenate(xs_list))), 1e-6)

    def sse(b, return_coef=False):
        ys = np.concatenate([play_replay(xs, b) for xs in xs_list])
        zs = np.concatenate(zs_list)
        A = np.stack([ys, np.ones_like(ys)], axis=1)
        coef, *_ = np.linalg.lstsq(A, zs, rcond=None)
        r = zs - A @ coef
        return (float(r @ r), coef) if return_coef else float(r @ r)

    # vectorised grid over b, then bounded refinement around the best cell
    grid = np.linspace(0.0, min(12.0, span), 241)
    ys = [play_replay(np.repeat(xs[:, None], grid.size, axis=1), grid) for xs in xs_list]
    Y = np.concatenate(ys)  # (N, G)
    Z = np.concatenate(zs_list)
    ym = Y.mean(axis=0)
    zm = Z.mean()
    cov = ((Y - ym) * (Z - zm)[:, None]).sum(axis=0)
    var = ((Y - ym) ** 2).sum(axis=0)
    s_hat = cov / np.maximum(var, 1e-12)
    resid = ((Z - zm)[:, None] - s_hat * (Y - ym)) ** 2
    i = int(np.argmin(resid.sum(axis=0)))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    if hi > lo:
        res = minimize_scalar(sse, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
        b = float(res.x) if res.fun <= sse(grid[i]) else float(grid[i])
    else:
        b = float(grid[i])
    _, (s, d) = sse(b, return_coef=True)
    return b, float(s), float(d)


def _has_reversal(xs) -> bool:
    d = np.diff(xs)
    d = d[np.abs(d) > 1e-9]
    return bool(np.any(np.sign(d[1:]) != np.sign(d[:-1])))


def fit_observer(rollouts, holdout: float = 0.2, name: str = "") -> Observer:
    """Least-squares fit of the play-operator transmission, one axis at a time.

    Each rollout is ``(commands, true_poses)``; the first 80% of every rollout
    trains the fit and the remaining 20% scores ``residual_rms`` by replaying
    the fitted model over the whole command history.
    """
    if not rollouts:
        raise ValueError("no rollouts")
    cuts = [int(round(len(c) * (1.0 - holdout))) for c, _ in rollouts]
    params = []
    for ax in range(2):
        xs_list = [np.asarray(c, dtype=float)[:k, ax] for (c, _), k in zip(rollouts, cuts)]
        zs_list = [np.asarray(t, dtype=float)[:k, ax] for (_, t), k in zip(rollouts, cuts)]
        n = sum(len(x) for x in xs_list)
        if n < 200:
            raise ValueError(f"insufficient excitation on axis {ax}: {n} samples < 200")
        if not any(_has_reversal(x) for x in xs_list):
            raise ValueError(f"insufficient excitation on axis {ax}: no direction reversal")
        params.append(_fit_axis(xs_list, zs_list))
    b, s, d = (np.array(v) for v in zip(*params))
    obs = Observer(np.maximum(b, 0.0), s, d, name=name)
    errs = []
    for (c, t), k in zip(rollouts, cuts):
        pred = observer_replay(obs, c)
        errs.append(np.asarray(t)[k:] - pred[k:])
    errs = np.concatenate(errs)
    obs.residual_rms = float(np.sqrt(np.mean(np.sum(errs**2, axis=1)))) if len(errs) else float("nan")
    return obs


def observer_replay(obs: Observer, commands) -> np.ndarray:
    ys = play_replay(np.asarray(commands, dtype=float), obs.deadband)
    return obs.scale * ys + obs.offset


def observer_predict(obs: Observer, command_history) -> Pose2:
    if len(command_history) == 0:
        raise ContractViolation("empty command history")
    p = observer_replay(obs, command_history)[-1]
    return Pose2(float(p[0]), float(p[1]))


def observer_residual(obs: Observer, rollouts) -> float:
    errs = np.concatenate([np.asarray(t) - observer_replay(obs, c) for c, t in rollouts])
    return float(np.sqrt(np.mean(np.sum(errs**2, axis=1))))


def invert_play(y, target_out, b, scale, offset) -> np.ndarray:
    """Command that drives a play operator in state `y` to output `target_out`.

    The required output state is reached by pushing the input to the far edge
    of the deadband on the side it has to move toward.
    """
    y = np.asarray(y, dtype=float)
    y_star = (np.asarray(target_out, dtype=float) - offset) / scale
    half = 0.5 * np.asarray(b, dtype=float)
    return np.where(y_star > y, y_star + half, np.where(y_star < y, y_star - half, y_star))
