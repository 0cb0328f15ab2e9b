"""Scripted demonstrator that stands in for the human teleoperator.

It steers the commanded (encoder-side) pose so that the *true* tip reaches the
goal, which is what a person watching the camera does; the recorded positions
are the encoder readings, so labels inherit the transmission error.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .actuator import InstrumentModel, make_instrument
from .control import Sim
from .datapipe import Frame, RawTrajectory, write_dataset
from .render import Camera, render_rgb
from .workspace import (
    Block,
    Pose2,
    TaskState,
    grasp_clearance,
    pick_point,
    make_pegs,
    sample_block_on_peg,
)

SUBTASKS = ("pick", "place")


@dataclass
class DemoProfile:
    start_radius: float = 5.0  # mm
    speed: float = 3.0  # mm/s
    lateral_noise_sd: float = 0.3  # mm per frame
    dwell_frames: int = 2
    capture_rate: float = 5.0  # Hz
    reaction_frames: int = 4  # frames held at the start before moving
    decel_radius: float = 1.0  # mm
    arrive_tol: float = 0.2  # mm
    settle: float = 0.05  # mm, per-axis output tolerance

    def __post_init__(self):
        if self.dwell_frames < 1 or self.start_radius < 0 or self.speed <= 0:
            raise ValueError(f"invalid demo profile {self}")


def sample_start(goal, profile: DemoProfile, seed: int) -> Pose2:
    rng = np.random.default_rng(seed)
    r = profile.start_radius * math.sqrt(rng.uniform())
    a = rng.uniform(0.0, 2.0 * math.pi)
    return Pose2(goal[0] + r * math.cos(a), goal[1] + r * math.sin(a))


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def demo_goal(state: TaskState, subtask: str, peg_id: int) -> Pose2:
    """True-space tip goal: over the grasp target, or with the held opening over the peg."""
    if subtask == "pick":
        block = state.block_on(peg_id)
        if block is None:
            raise ValueError(f"no block on peg {peg_id}")
        return pick_point(block)
    held = state.grasped_block()
    if held is None:
        raise ValueError("place demo needs a held block")
    return state.pegs[peg_id].center - held.grasp_offset


def generate_demo(state: TaskState, subtask: str, peg_id: int, profile: DemoProfile, seed: int,
                  inst: InstrumentModel | None = None, cam: Camera | None = None,
                  traj_id: int = 0) -> RawTrajectory:
    cam = cam or Camera()
    st = state.copy()
    inst = copy.deepcopy(inst) if inst is not None else make_instrument("A")
    rng = np.random.default_rng(_seed(seed, 1))
    goal = np.asarray(demo_goal(st, subtask, peg_id))
    st.jaw = "open" if subtask == "pick" else "closed"
    st.tip_z_level = "plane"

    start = np.asarray(sample_start(goal, profile, _seed(seed, 2)))
    sim = Sim(st, inst, cam)
    sim.reset_robot((start - inst.offset) / inst.scale, seed=_seed(seed, 3))

    rect = cam.crop_rect(st.pegs[peg_id].center)
    rate = profile.capture_rate
    step = profile.speed / rate
    frames: list[Frame] = []

    def record():
        frames.append(Frame(len(frames) / rate, render_rgb(st, cam, rect), Pose2(*sim.command)))

    def goal_command():
        # an axis already within `settle` of its output target holds its command
        # inside the deadband instead of re-crossing it
        y = inst.play_state
        y_star = (goal - inst.offset) / inst.scale
        half = inst.deadband / 2
        held = np.clip(sim.command, y - half, y + half)
        return np.where(y_star - y > profile.settle, y_star + half,
                        np.where(y - y_star > profile.settle, y_star - half, held))

    record()
    if np.linalg.norm(goal_command() - sim.command) > profile.arrive_tol:
        for _ in range(profile.reaction_frames):
            record()
        for _ in range(500):
            delta = goal_command() - sim.command
            dist = float(np.linalg.norm(delta))
            if dist <= max(profile.arrive_tol, profile.decel_radius):
                break
            u = delta / dist
            lateral = np.array([-u[1], u[0]]) * rng.normal(0.0, profile.lateral_noise_sd)
            sim.move(sim.command + min(step, dist) * u + lateral)
            record()
        sim.move(goal_command())
        record()
    for _ in range(profile.dwell_frames - 1):
        record()
    return RawTrajectory(subtask, peg_id, frames, rate, inst.name, traj_id)


def demo_scene(subtask: str, peg_id: int, seed: int) -> TaskState:
    """Board with randomised blocks on every other peg; the target peg carries the
    pick block, or stays empty while a block is held for a place."""
    rng = np.random.default_rng(seed)
    pegs = make_pegs()
    blocks = []
    for p in pegs:
        if p.id == peg_id and subtask == "place":
            continue
        blocks.append(sample_block_on_peg(rng, len(blocks), p))
    st = TaskState(pegs, blocks)
    if subtask == "place":
        held = Block(len(blocks), pegs[peg_id].center, rng.uniform(0.0, 2.0 * math.pi), "grasped")
        # grip somewhere in the material disc around the nominal grasp point
        r = grasp_clearance(held) * math.sqrt(rng.uniform())
        a = rng.uniform(0.0, 2.0 * math.pi)
        grip = np.asarray(pick_point(held)) + r * np.array([math.cos(a), math.sin(a)])
        held.grasp_offset = Pose2(*(np.asarray(held.opening_center) - grip))
        blocks.append(held)
    return st


def collect_dataset(profile: DemoProfile | None = None, seed: int = 0, instrument: InstrumentModel | None = None,
                    cam: Camera | None = None, per_peg: int = 15, out_dir=None, pegs=range(12)):
    """Demonstrations for every peg and both subtasks; optionally written to out_dir/{pick,place}."""
    profile = profile or DemoProfile()
    inst = instrument if instrument is not None else make_instrument("A")
    out = {}
    for si, subtask in enumerate(SUBTASKS):
        trajs = []
        for peg in pegs:
            for j in range(per_peg):
                s = _seed(seed, si, peg, j)
                st = demo_scene(subtask, peg, s)
                trajs.append(generate_demo(st, subtask, peg, profile, s, inst, cam, traj_id=len(trajs)))
        out[subtask] = trajs
    if out_dir is not None:
        from pathlib import Path

        for subtask, trajs in out.items():
            write_dataset(trajs, Path(out_dir) / subtask)
    return out["pick"], out["place"]
