"""Image preprocessing, supervision extraction and dataset persistence."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .render import Camera, Image, read_ppm, write_ppm
from .workspace import Pose2, make_pegs

CROP_PX = 150
BLOCK_RADIUS_MM = 12.0
BACKGROUND = (60, 60, 60)
CAPTURE_RATE = 5.0


@dataclass
class Hyperparameters:
    lam: float = 1.0  # corrective step length, mm
    nu: float = 2.0  # termination radius, mm
    omega: float = 0.70  # per-member probability threshold
    kappa: int = 3  # votes required
    mu: float = 1.0  # CE weight
    k: int = 4  # ensemble size

    def __post_init__(self):
        if not (self.lam > 0 and self.nu > 0 and 0 <= self.omega <= 1 and self.k >= 1):
            raise ValueError(f"invalid hyperparameters {self}")
        if not 1 <= self.kappa <= self.k:
            raise ValueError(f"kappa={self.kappa} must lie in [1, k={self.k}]")


@dataclass
class Frame:
    t: float
    image: Image
    p: Pose2


@dataclass
class RawTrajectory:
    subtask: str  # pick | place
    peg_id: int
    frames: list[Frame]
    capture_rate: float = CAPTURE_RATE
    instrument: str = ""
    id: int = 0

    def positions(self) -> np.ndarray:
        return np.array([f.p for f in self.frames], dtype=float).reshape(-1, 2)

    def validate(self) -> None:
        if self.subtask not in ("pick", "place"):
            raise ValueError(f"trajectory {self.id}: unknown subtask {self.subtask!r}")
        if len(self.frames) < 2:
            raise ValueError(f"trajectory {self.id}: needs at least 2 frames")
        ts = np.array([f.t for f in self.frames])
        if np.any(np.diff(ts) <= 0):
            raise ValueError(f"trajectory {self.id}: timestamps not strictly increasing")


@dataclass
class LabeledSample:
    image: Image
    action: Pose2
    termination: int


def is_red(pixels: np.ndarray) -> np.ndarray:
    px = pixels.astype(np.int16)
    r = px[..., 0]
    return (r >= 150) & (r - np.maximum(px[..., 1], px[..., 2]) >= 60)


def preprocess(raw: Image, peg_center, cam: Camera | None = None,
               block_radius_mm: float = BLOCK_RADIUS_MM) -> Image:
    """Crop a 150x150 window on the target peg and grey out red pixels beyond a block radius."""
    cam = cam or Camera()
    rect = cam.crop_rect(peg_center, CROP_PX)
    out = raw.crop(rect)
    u, v = cam.to_px(peg_center)
    cols = np.arange(rect[0], rect[0] + CROP_PX)
    rows = np.arange(rect[1], rect[1] + CROP_PX)
    d = np.hypot(cols[None, :] - u, rows[:, None] - v)
    far = (d > block_radius_mm / cam.mm_per_px) & is_red(out.pixels)
    out.pixels[far] = BACKGROUND
    return out


def _norm(dx, dy):
    """Euclidean length from correctly rounded operations only, scaled so tiny steps do not underflow."""
    dx, dy = np.abs(dx), np.abs(dy)
    m = np.maximum(dx, dy)
    s = np.where(m > 0, m, 1.0)
    a, b = dx / s, dy / s
    return m * np.sqrt(a * a + b * b)


def _next_index(P: np.ndarray, lam: float) -> np.ndarray:
    T = len(P) - 1
    diff = P[None, :, :] - P[:, None, :]
    D = _norm(diff[..., 0], diff[..., 1])
    later = np.triu(np.ones_like(D, dtype=bool), k=1)
    hit = later & (D >= lam)
    return np.where(hit.any(axis=1), hit.argmax(axis=1), T)


def action_labels(P, lam: float) -> np.ndarray:
    """Unit direction to the first waypoint at least `lam` away (else the last), scaled by `lam`."""
    P = np.asarray(P, dtype=float)
    disp = P[_next_index(P, lam)] - P
    n = _norm(disp[:, :1], disp[:, 1:])
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 0, lam * disp / safe, 0.0)


def termination_labels(P, nu: float) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    d = P[-1] - P
    return (_norm(d[:, 0], d[:, 1]) <= nu).astype(np.int64)


def _images(traj: RawTrajectory, cam: Camera | None, preprocessed: bool):
    if preprocessed:
        return [f.image for f in traj.frames]
    center = make_pegs()[traj.peg_id].center
    return [preprocess(f.image, center, cam) for f in traj.frames]


def extract_actions(traj: RawTrajectory, lam: float, cam: Camera | None = None,
                    preprocessed: bool = False):
    if lam <= 0:
        raise ValueError("lambda must be positive")
    acts = action_labels(traj.positions(), lam)
    return [(img, Pose2(*a)) for img, a in zip(_images(traj, cam, preprocessed), acts)]


def extract_termination(traj: RawTrajectory, nu: float, cam: Camera | None = None,
                        preprocessed: bool = False):
    if nu <= 0:
        raise ValueError("nu must be positive")
    flags = termination_labels(traj.positions(), nu)
    return [(img, int(f)) for img, f in zip(_images(traj, cam, preprocessed), flags)]


def label_trajectory(traj: RawTrajectory, hyper: Hyperparameters, cam: Camera | None = None):
    images = _images(traj, cam, preprocessed=False)
    P = traj.positions()
    acts = action_labels(P, hyper.lam)
    flags = termination_labels(P, hyper.nu)
    return [LabeledSample(img, Pose2(*a), int(f)) for img, a, f in zip(images, acts, flags)]


def stack_samples(trajs, hyper: Hyperparameters, cam: Camera | None = None):
    """Arrays (images uint8 (N,150,150,3), actions (N,2), flags (N,), traj index (N,))."""
    imgs, acts, flags, owner = [], [], [], []
    for i, tr in enumerate(trajs):
        for s in label_trajectory(tr, hyper, cam):
            imgs.append(s.image.pixels)
            acts.append(s.action)
            flags.append(s.termination)
            owner.append(i)
    return (
        np.stack(imgs) if imgs else np.zeros((0, CROP_PX, CROP_PX, 3), np.uint8),
        np.asarray(acts, dtype=float).reshape(-1, 2),
        np.asarray(flags, dtype=np.int64),
        np.asarray(owner, dtype=np.int64),
    )


# ---------------------------------------------------------------- persistence

MANIFEST = "manifest.jsonl"


def write_dataset(trajs, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for tr in trajs:
        frames = []
        for j, f in enumerate(tr.frames):
            rel = f"images/{tr.id:05d}_{j:03d}.ppm"
            write_ppm(directory / rel, f.image)
            frames.append({
                "t": f.t,
                "image_path": rel,
                "origin_px": list(f.image.origin_px),
                "p": [float(f.p[0]), float(f.p[1])],
            })
        rec = {
            "id": tr.id,
            "subtask": tr.subtask,
            "peg_id": tr.peg_id,
            "instrument": tr.instrument,
            "capture_rate": tr.capture_rate,
            "frames": frames,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    (directory / MANIFEST).write_text("\n".join(lines) + ("\n" if lines else ""))
    return directory


def read_dataset(directory) -> list[RawTrajectory]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise ValueError(f"{path}: manifest not found")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            frames = [
                Frame(
                    float(fr["t"]),
                    read_ppm(directory / fr["image_path"], tuple(fr.get("origin_px", (0, 0)))),
                    Pose2(float(fr["p"][0]), float(fr["p"][1])),
                )
                for fr in rec["frames"]
            ]
            tr = RawTrajectory(rec["subtask"], int(rec["peg_id"]), frames,
                               float(rec.get("capture_rate", CAPTURE_RATE)),
                               rec.get("instrument", ""), int(rec["id"]))
        except (KeyError, TypeError, IndexError, json.JSONDecodeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
        out.append(tr)
    return out
