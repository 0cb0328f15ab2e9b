"""Three-phase subtask execution: open-loop approach, visual-servo correction, completion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .actuator import InstrumentModel, Observer, command_move, invert_play, play_update
from .datapipe import Hyperparameters, preprocess
from .render import BLOCK_POS_SD, PEG_POS_SD, Camera, PerceivedScene, perceive_poses, render_rgb
from .workspace import (
    Block,
    ContractViolation,
    Pose2,
    TaskState,
    as_pose,
    check_pick_success,
    check_place_success,
    grasp_target,
    pick_point,
    in_workspace,
    on_material,
)

METHODS = ("UNCAL", "CAL", "IVS")

# Update frequency of the ensemble query by ensemble size (Hz).
RATE_BY_K = {1: 15.6, 2: 12.8, 4: 10.0, 8: 7.1}


def servo_rate(k: int, table: dict | None = None) -> float:
    table = {int(a): float(b) for a, b in (table or RATE_BY_K).items()}
    if k in table:
        return table[k]
    ks = sorted(table)
    return float(np.interp(k, ks, [table[i] for i in ks]))


@dataclass
class TimingModel:
    """Fixed simulated durations (s). Perception (1/1.6 s) is charged by perceive_poses."""
    pick_approach: float = 2.2
    pick_complete: float = 1.6
    place_approach: float = 2.8
    place_complete: float = 1.475
    rates: dict = field(default_factory=lambda: dict(RATE_BY_K))

    def base_transfer_time(self, pick_attempts: int = 1, perception: float = 1 / 1.6) -> float:
        pick = perception + self.pick_approach + self.pick_complete
        return pick_attempts * pick + self.place_approach + self.place_complete


@dataclass
class ServoConfig:
    rate: float = 10.0
    max_steps: int = 50
    hyper: Hyperparameters = field(default_factory=Hyperparameters)

    def __post_init__(self):
        if self.rate <= 0 or self.max_steps < 1:
            raise ValueError(f"invalid servo config rate={self.rate} max_steps={self.max_steps}")

    @classmethod
    def for_ensemble(cls, k: int, hyper: Hyperparameters | None = None,
                     timing: TimingModel | None = None, max_steps: int = 50) -> "ServoConfig":
        rates = timing.rates if timing is not None else None
        return cls(servo_rate(k, rates), max_steps, hyper or Hyperparameters())


@dataclass
class CorrectionResult:
    steps: int = 0
    distance: float = 0.0
    elapsed: float = 0.0
    terminated: bool = False


@dataclass
class SubtaskResult:
    subtask: str
    success: bool
    correction: CorrectionResult
    elapsed: float
    position_error: float = float("nan")  # true tip vs ideal target at completion, mm


@dataclass
class Sim:
    """Everything one simulated robot owns: scene, transmission, camera, command state."""
    state: TaskState
    inst: InstrumentModel
    cam: Camera = field(default_factory=Camera)
    observer: Observer | None = None
    timing: TimingModel = field(default_factory=TimingModel)
    command: np.ndarray = field(default_factory=lambda: np.zeros(2))
    obs_state: np.ndarray = field(default_factory=lambda: np.zeros(2))
    log: list = field(default_factory=list)
    block_sd: float = BLOCK_POS_SD
    peg_sd: float = PEG_POS_SD

    def reset_robot(self, command, seed: int) -> None:
        self.inst.reset(command, seed=seed)
        self.command = np.asarray(command, dtype=float).copy()
        self.obs_state = self.command.copy()
        self.state.set_tip(self.inst.output())

    def move(self, command) -> Pose2:
        command = np.asarray(command, dtype=float)
        true = command_move(self.inst, command)
        self.command = command.copy()
        if self.observer is not None:
            self.obs_state = play_update(self.obs_state, command, self.observer.deadband)
        self.state.set_tip(true)
        return true

    def estimate(self) -> Pose2:
        """Where the coarse policy believes the tip is (encoder for UNCAL/IVS)."""
        return as_pose(self.command)

    def command_for(self, target, method: str) -> np.ndarray:
        """Command that the tracking estimator maps onto `target`."""
        if method == "CAL":
            if self.observer is None:
                raise ContractViolation("CAL tracking needs a fitted observer")
            o = self.observer
            return invert_play(self.obs_state, target, o.deadband, o.scale, o.offset)
        return np.asarray(target, dtype=float)

    def perceive(self, seed: int) -> PerceivedScene:
        return perceive_poses(self.state, seed, block_sd=self.block_sd, peg_sd=self.peg_sd)


# ---------------------------------------------------------------- approach


def plan_approach(subtask: str, start, perceived: PerceivedScene, target_id: int,
                  tool_offset=(0.0, 0.0), spacing: float = 2.0) -> list[Pose2]:
    """Straight-line waypoints (<= `spacing` apart) from `start` to the approach goal.

    Pick goal: grasp target of the perceived block. Place goal: the perceived
    peg centre minus the believed opening-minus-tip offset of the held block.
    """
    if subtask == "pick":
        if target_id not in perceived.blocks:
            raise ContractViolation(f"block {target_id} not perceived")
        center, orient = perceived.blocks[target_id]
        goal = pick_point(Block(target_id, center, orient))
    elif subtask == "place":
        goal = perceived.pegs[target_id] - tool_offset
    else:
        raise ValueError(f"unknown subtask {subtask!r}")
    if not in_workspace(goal):
        raise ContractViolation(f"approach target {goal} outside workspace")
    a = np.asarray(start, dtype=float)
    b = np.asarray(goal, dtype=float)
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / spacing - 1e-12)))
    return [as_pose(a + (b - a) * i / n) for i in range(1, n + 1)]


def track(sim: Sim, waypoints, method: str) -> None:
    for wp in waypoints:
        sim.move(sim.command_for(wp, method))


# ---------------------------------------------------------------- correction


def servo_correct(ensemble, sim: Sim, cfg: ServoConfig, subtask: str, peg_id: int) -> CorrectionResult:
    """Query the ensemble on the target-peg crop and step lambda toward its action until it votes stop."""
    if sim.state.tip_z_level != "plane":
        raise ContractViolation("correction runs at the correction plane")
    lam = cfg.hyper.lam
    peg = sim.state.pegs[peg_id].center
    rect = sim.cam.crop_rect(peg)
    res = CorrectionResult()
    while res.steps < cfg.max_steps:
        raw = render_rgb(sim.state, sim.cam, rect)
        img = preprocess(raw, peg, sim.cam)
        action, stop = ensemble.query(img.pixels, subtask)
        if stop:
            res.terminated = True
            break
        a = np.asarray(action, dtype=float)
        n = float(np.hypot(*a))
        before = sim.inst.play_state.copy()
        if n > 0:
            sim.move(sim.command + lam * a / n)
        res.distance += float(np.hypot(*(sim.inst.play_state - before)))
        res.steps += 1
        sim.state.advance(1.0 / cfg.rate)
    res.elapsed = res.steps / cfg.rate
    return res


# ---------------------------------------------------------------- completion


def complete_pick(sim: Sim) -> bool:
    """Descend, close the jaws, lift. On a miss the jaws reopen and the block stays put."""
    st = sim.state
    if st.jaw != "open":
        raise ContractViolation("jaw already closed")
    if st.grasped_block() is not None:
        raise ContractViolation("already holding a block")
    st.tip_z_level = "board"
    st.jaw = "closed"
    for b in st.blocks:
        if b.state == "on_peg" and on_material(b, st.tip_true):
            b.state = "grasped"
            b.peg_id = None
            b.grasp_offset = b.opening_center - st.tip_true
            break
    st.tip_z_level = "travel"
    ok = check_pick_success(st)
    if not ok:
        st.jaw = "open"
    return ok


def complete_place(sim: Sim, peg_id: int) -> bool:
    """Open the jaws over the peg; a miss drops the block out of the trial."""
    st = sim.state
    held = st.grasped_block()
    if held is None:
        raise ContractViolation("no block grasped")
    ok = check_place_success(st, peg_id, held)
    st.jaw = "open"
    held.grasp_offset = None
    if ok:
        held.state = "on_peg"
        held.peg_id = peg_id
    else:
        held.state = "dropped"
    st.tip_z_level = "travel"
    return ok


# ---------------------------------------------------------------- subtask


def run_subtask(subtask: str, method: str, sim: Sim, cfg: ServoConfig | None,
                target_id: int, perceived: PerceivedScene, ensemble=None,
                tool_offset=(0.0, 0.0), peg_id: int | None = None) -> SubtaskResult:
    """Approach, optional correction, completion.

    `target_id` is the block id for picks and the peg id for places; `peg_id`
    names the peg the crop is centred on during a pick correction.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "IVS" and ensemble is None:
        raise ContractViolation("IVS needs a trained ensemble")
    st = sim.state
    t0 = st.clock
    timing = sim.timing
    wps = plan_approach(subtask, sim.estimate(), perceived, target_id, tool_offset)
    st.tip_z_level = "travel"
    track(sim, wps[:-1], method)
    st.tip_z_level = "plane"
    track(sim, wps[-1:], method)
    st.advance(timing.pick_approach if subtask == "pick" else timing.place_approach)

    correction = CorrectionResult()
    if method == "IVS":
        crop_peg = peg_id if subtask == "pick" else target_id
        correction = servo_correct(ensemble, sim, cfg, subtask, crop_peg)

    if subtask == "pick":
        block = next(b for b in st.blocks if b.id == target_id)
        err = float(np.hypot(*(np.asarray(st.tip_true) - grasp_target(block, approach_from=st.tip_true))))
        ok = complete_pick(sim)
        st.advance(timing.pick_complete)
    else:
        held = st.grasped_block()
        err = float(np.hypot(*(np.asarray(held.opening_center) - st.pegs[target_id].center)))
        ok = complete_place(sim, target_id)
        st.advance(timing.place_complete)
    return SubtaskResult(subtask, ok, correction, st.clock - t0, err)
