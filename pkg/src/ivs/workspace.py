"""Pegboard geometry, task state and the pick/place success predicates.

All distances are millimetres in the robot base frame. The board carries two
2x3 peg grids at a 25 mm pitch; blocks are equilateral triangles with a
circular opening that slides over a peg.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

PEG_RADIUS = 1.125  # 2.25 mm wide peg
OPENING_RADIUS = 4.5
FOOTPRINT_SIDE = 18.0
PEG_PITCH = 25.0

# Rectangle of the pegboard surface (x0, y0, x1, y1).
BOARD_RECT = (-20.0, -20.0, 120.0, 70.0)
WORKSPACE_LIMIT = max(abs(v) for v in BOARD_RECT) + 50.0

HOME = (50.0, 25.0)
# Blocks are grasped at the corner facing this board direction. The footprint
# is symmetric under 2pi/3 turns, so only a direction fixed in the board frame
# names a corner that can be recognised from an image.
GRASP_DIR = (0.0, -1.0)
Z_LEVELS = ("travel", "plane", "board")


class ContractViolation(RuntimeError):
    """Raised when an operation is called outside its precondition."""


class Pose2(NamedTuple):
    x: float
    y: float

    def __add__(self, other):  # type: ignore[override]
        return Pose2(self.x + other[0], self.y + other[1])

    def __sub__(self, other):
        return Pose2(self.x - other[0], self.y - other[1])

    def norm(self) -> float:
        return math.hypot(self.x, self.y)


def as_pose(p) -> Pose2:
    return Pose2(float(p[0]), float(p[1]))


def in_workspace(p) -> bool:
    return bool(
        math.isfinite(p[0]) and math.isfinite(p[1])
        and abs(p[0]) <= WORKSPACE_LIMIT and abs(p[1]) <= WORKSPACE_LIMIT
    )


@dataclass(frozen=True)
class Peg:
    id: int
    center: Pose2
    radius: float = PEG_RADIUS


@dataclass
class Block:
    id: int
    opening_center: Pose2
    orientation: float
    state: str = "on_peg"  # on_peg | grasped | dropped
    peg_id: int | None = None
    opening_radius: float = OPENING_RADIUS
    footprint_side: float = FOOTPRINT_SIDE
    # opening_center - tip while grasped
    grasp_offset: Pose2 | None = None

    @property
    def circumradius(self) -> float:
        return self.footprint_side / math.sqrt(3.0)

    @property
    def inradius(self) -> float:
        return self.footprint_side / (2.0 * math.sqrt(3.0))

    def vertices(self) -> np.ndarray:
        k = np.arange(3)
        ang = self.orientation + 2.0 * np.pi * k / 3.0
        c = np.asarray(self.opening_center)
        return c + self.circumradius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass
class TaskState:
    pegs: list[Peg]
    blocks: list[Block]
    tip_true: Pose2 = Pose2(*HOME)
    tip_z_level: str = "travel"
    jaw: str = "open"
    clock: float = 0.0

    def copy(self) -> "TaskState":
        return copy.deepcopy(self)

    def grasped_block(self) -> Block | None:
        held = [b for b in self.blocks if b.state == "grasped"]
        if len(held) > 1:
            raise ContractViolation("more than one block grasped")
        return held[0] if held else None

    def block_on(self, peg_id: int) -> Block | None:
        for b in self.blocks:
            if b.state == "on_peg" and b.peg_id == peg_id:
                return b
        return None

    def set_tip(self, p) -> None:
        self.tip_true = as_pose(p)
        held = self.grasped_block()
        if held is not None:
            held.opening_center = self.tip_true + held.grasp_offset

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ContractViolation("clock must be nondecreasing")
        self.clock += dt


def make_pegs() -> list[Peg]:
    """Left grid ids 0-5 at x in {0, 25}; right grid ids 6-11 at x in {75, 100}.

    Within a grid ids run down each column (y = 0, 25, 50).
    """
    pegs = []
    for side, xs in enumerate(((0.0, 25.0), (75.0, 100.0))):
        for col, x in enumerate(xs):
            for row in range(3):
                pid = side * 6 + col * 3 + row
                pegs.append(Peg(pid, Pose2(x, row * PEG_PITCH)))
    return pegs


def clearance(block: Block, peg: Peg) -> float:
    return block.opening_radius - peg.radius


def sample_block_on_peg(rng: np.random.Generator, block_id: int, peg: Peg) -> Block:
    orientation = rng.uniform(0.0, 2.0 * np.pi)
    r = (OPENING_RADIUS - peg.radius) * math.sqrt(rng.uniform())
    a = rng.uniform(0.0, 2.0 * np.pi)
    center = peg.center + (r * math.cos(a), r * math.sin(a))
    return Block(block_id, center, orientation, "on_peg", peg.id)


def side_peg_ids(side: str) -> list[int]:
    if side == "left":
        return list(range(6))
    if side == "right":
        return list(range(6, 12))
    raise ValueError(f"unknown side {side!r}")


def init_board(seed: int, side: str = "left") -> TaskState:
    rng = np.random.default_rng(seed)
    pegs = make_pegs()
    blocks = [sample_block_on_peg(rng, i, pegs[pid]) for i, pid in enumerate(side_peg_ids(side))]
    return TaskState(pegs, blocks)


def in_footprint(block: Block, point) -> bool:
    """Point-in-equilateral-triangle test via the three edge half-planes."""
    rel = np.asarray(point, dtype=float) - np.asarray(block.opening_center)
    k = np.arange(3)
    # outward normal of the edge opposite vertex k
    ang = block.orientation + 2.0 * np.pi * k / 3.0 + np.pi
    normals = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return bool(np.all(normals @ rel <= block.inradius + 1e-12))


def on_material(block: Block, point) -> bool:
    """True when `point` lies on block material: inside the footprint, outside the hole."""
    rel = np.asarray(point, dtype=float) - np.asarray(block.opening_center)
    return in_footprint(block, point) and float(np.hypot(*rel)) > block.opening_radius


def grasp_clearance(block: Block) -> float:
    """Radius of the largest disc of material around each grasp target."""
    return (block.circumradius - block.opening_radius) / 3.0


def grasp_target(block: Block, approach_from=None) -> Pose2:
    """Deepest material point in one corner of the block.

    Each corner region between two edges and the opening admits an inscribed
    disc of radius ``grasp_clearance``; its centre sits on the corner bisector
    at (R + 2 r_open) / 3 from the opening centre. The reference corner is the
    one along ``block.orientation``; passing ``approach_from`` selects the
    corner facing that point instead.
    """
    c = np.asarray(block.opening_center, dtype=float)
    k = 0
    if approach_from is not None:
        ang = block.orientation + 2.0 * np.pi * np.arange(3) / 3.0
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        k = int(np.argmax(dirs @ (np.asarray(approach_from, dtype=float) - c)))
    ang = block.orientation + 2.0 * np.pi * k / 3.0
    dist = (block.circumradius + 2.0 * block.opening_radius) / 3.0
    return Pose2(c[0] + dist * math.cos(ang), c[1] + dist * math.sin(ang))


def pick_point(block: Block) -> Pose2:
    """Grasp target on the corner facing GRASP_DIR."""
    far = np.asarray(block.opening_center, dtype=float) + 1e3 * np.asarray(GRASP_DIR)
    return grasp_target(block, approach_from=far)


def check_pick_success(state: TaskState) -> bool:
    if state.jaw != "closed" or state.tip_z_level != "travel":
        return False
    held = state.grasped_block()
    return held is not None and on_material(held, state.tip_true)


def place_offset(block: Block, peg: Peg) -> float:
    return float(np.hypot(*(np.asarray(block.opening_center) - np.asarray(peg.center))))


def check_place_success(state: TaskState, peg_id: int, block: Block | None = None) -> bool:
    if not isinstance(peg_id, (int, np.integer)) or not 0 <= peg_id < len(state.pegs):
        raise ContractViolation(f"invalid peg id {peg_id!r}")
    if block is None:
        block = state.grasped_block()
    if block is None:
        raise ContractViolation("no block to place")
    peg = state.pegs[peg_id]
    return place_offset(block, peg) <= clearance(block, peg) + 1e-9
