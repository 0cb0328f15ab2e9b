"""Top-down rasterizer for the pegboard plus the simulated RGBD pose oracle.

Rendering is a pure function of each pixel centre's base-frame coordinate,
so rendering a sub-rectangle gives the same bytes as cropping a full frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .workspace import Block, ContractViolation, Pose2, TaskState

BOARD = (200, 30, 30)
BLOCK = (235, 45, 45)
PEG = (180, 25, 25)
PEG_RIM = (150, 20, 20)
TIP = (120, 120, 120)
PALETTE = (BOARD, BLOCK, PEG, PEG_RIM, TIP)

TIP_RADIUS_PX = 8
JAW_ANGLE = -math.pi / 2  # jaws point toward the robot base (-y)
TICK_OPEN_PX = 14
TICK_CLOSED_PX = 11

RGBD_RATE = 1.6  # Hz
BLOCK_POS_SD = 1.0
PEG_POS_SD = 0.3


@dataclass(frozen=True)
class Camera:
    mm_per_px: float = 0.25
    frame_w: int = 1900
    frame_h: int = 1200
    origin: Pose2 = Pose2(-187.5, 175.0)

    def __post_init__(self):
        if self.mm_per_px <= 0:
            raise ValueError("mm_per_px must be positive")

    def to_px(self, p) -> tuple[float, float]:
        """Continuous (col, row) of a base-frame point; pixel centres sit at integers."""
        u = (p[0] - self.origin[0]) / self.mm_per_px - 0.5
        v = (self.origin[1] - p[1]) / self.mm_per_px - 0.5
        return u, v

    def to_mm(self, u, v):
        x = self.origin[0] + (np.asarray(u) + 0.5) * self.mm_per_px
        y = self.origin[1] - (np.asarray(v) + 0.5) * self.mm_per_px
        return x, y

    def pixel_of(self, p) -> tuple[int, int]:
        u, v = self.to_px(p)
        return int(math.floor(u + 0.5)), int(math.floor(v + 0.5))

    def crop_rect(self, center, size: int = 150) -> tuple[int, int, int, int]:
        u, v = self.pixel_of(center)
        h = size // 2
        return (u - h, v - h, size, size)


@dataclass
class Image:
    pixels: np.ndarray  # (H, W, 3) uint8, row-major
    origin_px: tuple[int, int] = (0, 0)  # (col, row) of pixel [0, 0] in the full frame

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {self.pixels.shape}")
        self.origin_px = (int(self.origin_px[0]), int(self.origin_px[1]))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Image)
            and self.origin_px == other.origin_px
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )

    def crop(self, rect) -> "Image":
        c0, r0, w, h = rect
        lc, lr = c0 - self.origin_px[0], r0 - self.origin_px[1]
        if lc < 0 or lr < 0 or lc + w > self.width or lr + h > self.height:
            raise ValueError(f"crop {rect} outside image at {self.origin_px} size {self.width}x{self.height}")
        return Image(self.pixels[lr:lr + h, lc:lc + w].copy(), (c0, r0))


class _Canvas:
    def __init__(self, cam: Camera, rect):
        self.cam = cam
        self.c0, self.r0, self.w, self.h = rect
        self.px = np.empty((self.h, self.w, 3), dtype=np.uint8)
        self.px[:] = BOARD

    def window(self, lo, hi):
        """Pixel sub-window covering the mm box [lo, hi] plus a guard pixel, and its centre coords."""
        u0, v1 = self.cam.to_px(lo)
        u1, v0 = self.cam.to_px(hi)
        cs = max(self.c0, int(math.floor(u0)) - 1)
        ce = min(self.c0 + self.w, int(math.ceil(u1)) + 2)
        rs = max(self.r0, int(math.floor(v0)) - 1)
        re = min(self.r0 + self.h, int(math.ceil(v1)) + 2)
        if cs >= ce or rs >= re:
            return None
        x, _ = self.cam.to_mm(np.arange(cs, ce), 0)
        _, y = self.cam.to_mm(0, np.arange(rs, re))
        X, Y = np.meshgrid(x, y)
        return (slice(rs - self.r0, re - self.r0), slice(cs - self.c0, ce - self.c0)), X, Y

    def paint(self, sl, mask, color):
        self.px[sl][mask] = color


def _draw_peg(cv: _Canvas, peg) -> None:
    c = np.asarray(peg.center)
    win = cv.window(c - peg.radius, c + peg.radius)
    if win is None:
        return
    sl, X, Y = win
    d = np.hypot(X - c[0], Y - c[1])
    cv.paint(sl, d <= peg.radius, PEG_RIM)
    cv.paint(sl, d <= peg.radius - cv.cam.mm_per_px, PEG)


def _draw_block(cv: _Canvas, block: Block) -> None:
    c = np.asarray(block.opening_center)
    R = block.circumradius
    win = cv.window(c - R, c + R)
    if win is None:
        return
    sl, X, Y = win
    rx, ry = X - c[0], Y - c[1]
    inside = np.ones(X.shape, dtype=bool)
    for k in range(3):
        a = block.orientation + 2.0 * np.pi * k / 3.0 + np.pi
        inside &= rx * math.cos(a) + ry * math.sin(a) <= block.inradius
    inside &= np.hypot(rx, ry) > block.opening_radius
    cv.paint(sl, inside, BLOCK)


def _draw_tip(cv: _Canvas, tip, jaw: str) -> None:
    m = cv.cam.mm_per_px
    r = TIP_RADIUS_PX * m
    tick = (TICK_CLOSED_PX if jaw == "closed" else TICK_OPEN_PX) * m
    c = np.asarray(tip)
    ext = r + tick
    win = cv.window(c - ext, c + ext)
    if win is None:
        return
    sl, X, Y = win
    rx, ry = X - c[0], Y - c[1]
    mask = np.hypot(rx, ry) <= r
    along = rx * math.cos(JAW_ANGLE) + ry * math.sin(JAW_ANGLE)
    across = -rx * math.sin(JAW_ANGLE) + ry * math.cos(JAW_ANGLE)
    mask |= (along >= 0) & (along <= r + tick) & (np.abs(across) <= m)
    cv.paint(sl, mask, TIP)


def render_rgb(state: TaskState, cam: Camera | None = None, region=None) -> Image:
    """Orthographic top-down frame, or the pixel rectangle ``region = (col, row, w, h)`` of it."""
    cam = cam or Camera()
    if region is None:
        region = (0, 0, cam.frame_w, cam.frame_h)
    c0, r0, w, h = region
    if c0 < 0 or r0 < 0 or c0 + w > cam.frame_w or r0 + h > cam.frame_h or w <= 0 or h <= 0:
        raise ValueError(f"region {region} outside {cam.frame_w}x{cam.frame_h} frame")
    cv = _Canvas(cam, region)
    for peg in state.pegs:
        _draw_peg(cv, peg)
    for b in state.blocks:
        if b.state == "on_peg":
            _draw_block(cv, b)
    held = state.grasped_block()
    if held is not None:
        _draw_block(cv, held)
    _draw_tip(cv, state.tip_true, state.jaw)
    return Image(cv.px, (c0, r0))


# ---------------------------------------------------------------- perception


@dataclass
class PerceivedScene:
    blocks: dict[int, tuple[Pose2, float]]  # id -> (opening centre, orientation)
    pegs: dict[int, Pose2]


def perceive_poses(state: TaskState, seed: int, tip_moving: bool = False,
                   block_sd: float = BLOCK_POS_SD, peg_sd: float = PEG_POS_SD,
                   rate: float = RGBD_RATE) -> PerceivedScene:
    """Noisy block and peg poses from a depth snapshot; costs 1/rate seconds."""
    if tip_moving:
        raise ContractViolation("depth sensing requires a static scene")
    rng = np.random.default_rng(seed)
    blocks = {}
    for b in state.blocks:
        n = rng.normal(0.0, block_sd, size=2)
        if b.state == "on_peg":
            blocks[b.id] = (b.opening_center + n, b.orientation)
    pegs = {}
    for p in state.pegs:
        n = rng.normal(0.0, peg_sd, size=2)
        pegs[p.id] = p.center + n
    state.advance(1.0 / rate)
    return PerceivedScene(blocks, pegs)


# ---------------------------------------------------------------- PPM I/O


def encode_ppm(img: Image) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels.tobytes()


def decode_ppm(data: bytes, origin_px=(0, 0), source: str = "<bytes>") -> Image:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{source}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise ValueError(f"{source}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError(f"{source}: bad PPM header") from exc
    if maxval != 255:
        raise ValueError(f"{source}: unsupported maxval {maxval}")
    body = data[pos:]
    if len(body) != w * h * 3:
        raise ValueError(f"{source}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return Image(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3), origin_px)


def write_ppm(path, img: Image) -> None:
    Path(path).write_bytes(encode_ppm(img))


def read_ppm(path, origin_px=(0, 0)) -> Image:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ValueError(f"{path}: cannot read image ({exc.strerror})") from exc
    return decode_ppm(data, origin_px, source=str(path))
