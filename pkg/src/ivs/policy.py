"""Convolutional ensemble policy.

Each member has one convolutional trunk shared by a pick head and a place
head; a head maps trunk features to (action_x, action_y, termination logit).
Tensors are computed with torch on the CPU. Weights are initialised from a
numpy generator so they depend only on the seed, and dropout masks come from
the caller's numpy generator, which keeps training bit-reproducible.
"""
from __future__ import annotations

import contextlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datapipe import Hyperparameters
from .workspace import Pose2

SUBTASKS = ("pick", "place")
PROB_CLAMP = 1e-7
CHECKPOINT_VERSION = 2
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class Architecture:
    input_size: int = 150
    convs: tuple = ((8, 5), (16, 5), (32, 3))  # (filters, kernel); each followed by ReLU + 2x2 max-pool
    dense: int = 128
    dropout: float = 0.5
    outputs: int = 3
    input_shift: float = 0.5  # subtracted after scaling bytes to [0, 1]

    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) of the trunk output."""
        h = self.input_size
        c = 3
        for f, k in self.convs:
            h = (h - k + 1) // 2
            if h < 1:
                raise ValueError(f"architecture collapses spatially: {self}")
            c = f
        return c, h, h

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "convs": [list(c) for c in self.convs],
                "dense": self.dense, "dropout": self.dropout, "outputs": self.outputs,
                "input_shift": self.input_shift}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(int(d["input_size"]), tuple(tuple(int(v) for v in c) for c in d["convs"]),
                   int(d["dense"]), float(d["dropout"]), int(d.get("outputs", 3)),
                   float(d.get("input_shift", 0.0)))


DEFAULT_ARCH = Architecture()
# Small variant used for finite-difference gradient checks.
REDUCED_ARCH = Architecture(input_size=16, convs=((4, 3), (4, 3)), dense=8)


@contextlib.contextmanager
def single_thread():
    """Pin torch to one intra-op thread so reductions run in a fixed order."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def glorot(rng, shape, fan_in, fan_out, dtype):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


# ---------------------------------------------------------------- member


class EnsembleMember:
    """One network: shared conv trunk plus a dense head per subtask.

    Parameter layouts follow torch: conv W is (F, C, k, k); dense W is
    (in, out) and features are flattened in (C, H, W) order.
    """

    def __init__(self, arch: Architecture = DEFAULT_ARCH, seed: int = 0, dtype="float32"):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)
        arrays = {}
        c = 3
        for i, (f, k) in enumerate(arch.convs):
            arrays[f"conv{i}.W"] = glorot(rng, (f, c, k, k), c * k * k, f * k * k, self.dtype)
            arrays[f"conv{i}.b"] = np.zeros(f, self.dtype)
            c = f
        d = int(np.prod(arch.feature_shape()))
        for s in SUBTASKS:
            arrays[f"{s}.W1"] = glorot(rng, (d, arch.dense), d, arch.dense, self.dtype)
            arrays[f"{s}.b1"] = np.zeros(arch.dense, self.dtype)
            arrays[f"{s}.W2"] = glorot(rng, (arch.dense, arch.outputs), arch.dense, arch.outputs, self.dtype)
            arrays[f"{s}.b2"] = np.zeros(arch.outputs, self.dtype)
        self._params = {k: torch.from_numpy(v).requires_grad_(True) for k, v in arrays.items()}

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype.name]

    def params(self) -> dict[str, torch.Tensor]:
        """Flat-named parameter tensors; conv entries are the single trunk both heads use."""
        return self._params

    def trunk(self) -> list[torch.Tensor]:
        return [v for k, v in self._params.items() if k.startswith("conv")]

    def n_params(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def _prep(self, images) -> torch.Tensor:
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[None]
        s = self.arch.input_size
        if x.shape[1:] != (s, s, 3):
            raise ValueError(f"expected images of shape ({s}, {s}, 3), got {x.shape[1:]}")
        t = torch.from_numpy(np.ascontiguousarray(x)).to(self.torch_dtype)
        if x.dtype == np.uint8:
            t = t / 255.0
        return (t - self.arch.input_shift).permute(0, 3, 1, 2)

    def _logits(self, x: torch.Tensor, subtask: str, mask=None) -> torch.Tensor:
        if subtask not in SUBTASKS:
            raise ValueError(f"unknown subtask {subtask!r}")
        p = self._params
        h = x
        for i in range(len(self.arch.convs)):
            h = F.max_pool2d(F.relu(F.conv2d(h, p[f"conv{i}.W"], p[f"conv{i}.b"])), 2)
        h = h.flatten(1)
        a1 = F.relu(h @ p[f"{subtask}.W1"] + p[f"{subtask}.b1"])
        if mask is not None:
            a1 = a1 * mask
        return a1 @ p[f"{subtask}.W2"] + p[f"{subtask}.b2"]

    def _mask(self, n: int, rng) -> torch.Tensor | None:
        if self.arch.dropout <= 0:
            return None
        keep = 1.0 - self.arch.dropout
        m = (rng.random((n, self.arch.dense)) < keep).astype(self.dtype) / self.dtype.type(keep)
        return torch.from_numpy(m)

    def forward(self, images, subtask: str = "pick", mode: str = "eval", rng=None):
        """Actions (N, 2) and termination probabilities (N,) as numpy arrays."""
        x = self._prep(images)
        mask = self._mask(x.shape[0], rng or np.random.default_rng(0)) if mode == "train" else None
        with torch.no_grad(), single_thread():
            out = self._logits(x, subtask, mask)
        out = out.numpy()
        return out[:, :2].copy(), _sigmoid(out[:, 2])

    def loss_and_grad(self, images, actions, flags, subtask: str, mu: float = 1.0, rng=None,
                      train: bool = True):
        """MSE(action) + mu * CE(termination) on one batch, and its gradient per parameter name.

        Probabilities are clamped to [1e-7, 1 - 1e-7] inside the CE, so the CE
        gradient vanishes where the clamp is active.
        """
        x = self._prep(images)
        y = torch.from_numpy(np.asarray(actions, dtype=self.dtype).reshape(-1, 2))
        t = torch.from_numpy(np.asarray(flags, dtype=self.dtype).reshape(-1))
        mask = self._mask(x.shape[0], rng or np.random.default_rng(0)) if train else None
        for p in self._params.values():
            p.grad = None
        with single_thread():
            out = self._logits(x, subtask, mask)
            mse = torch.mean((out[:, :2] - y) ** 2)
            prob = torch.sigmoid(out[:, 2]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
            ce = torch.mean(-(t * torch.log(prob) + (1 - t) * torch.log(1 - prob)))
            loss = mse + mu * ce
            loss.backward()
        grads = {k: (p.grad.numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape), self.dtype))
                 for k, p in self._params.items()}
        return loss.item(), {"mse": mse.item(), "ce": ce.item()}, grads

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: dict) -> None:
        with torch.no_grad():
            for k, v in self._params.items():
                src = np.asarray(arrays[k], dtype=self.dtype)
                if src.shape != tuple(v.shape):
                    raise ValueError(f"parameter {k}: shape {src.shape} != {tuple(v.shape)}")
                v.copy_(torch.from_numpy(src))


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- ensemble


@dataclass
class EnsemblePolicy:
    members: list
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    arch: Architecture = DEFAULT_ARCH

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def kappa(self) -> int:
        return min(self.hyper.kappa, self.k)

    def member_outputs(self, image, subtask: str):
        acts, probs = [], []
        for m in self.members:
            a, p = m.forward(image, subtask, "eval")
            acts.append(a[0])
            probs.append(p[0])
        return np.array(acts, dtype=float), np.array(probs, dtype=float)

    def query(self, image, subtask: str = "pick"):
        acts, probs = self.member_outputs(image, subtask)
        return ensemble_vote(acts, probs, self.hyper.omega, self.kappa)

    def subset(self, k: int) -> "EnsemblePolicy":
        hyper = Hyperparameters(**{**asdict(self.hyper), "k": k, "kappa": min(self.hyper.kappa, k)})
        return EnsemblePolicy(self.members[:k], hyper, self.arch)


def ensemble_vote(actions, probs, omega: float, kappa: int):
    """Mean member action, and stop iff at least `kappa` members give probability >= omega."""
    actions = np.asarray(actions, dtype=float).reshape(-1, 2)
    probs = np.asarray(probs, dtype=float).reshape(-1)
    mean = np.sort(actions, axis=0).mean(axis=0)  # sorted sum: independent of member order
    votes = int(np.count_nonzero(probs >= omega))
    return Pose2(float(mean[0]), float(mean[1])), int(votes >= kappa)


def init_ensemble(k: int, seed: int, hyper: Hyperparameters | None = None,
                  arch: Architecture = DEFAULT_ARCH, dtype="float32") -> EnsemblePolicy:
    if k < 1:
        raise ValueError("k must be >= 1")
    hyper = hyper or Hyperparameters()
    hyper = Hyperparameters(**{**asdict(hyper), "k": k, "kappa": min(hyper.kappa, k)})
    return EnsemblePolicy([EnsembleMember(arch, seed + i, dtype) for i in range(k)], hyper, arch)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # adam | sgd
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9  # sgd only
    schedule: str = "constant"  # constant | cosine (per-epoch decay to zero)
    epochs: int = 25
    n_train: int = 150  # trajectories per subtask
    n_test: int = 30
    eval_batch: int = 64

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.lr <= 0 or self.epochs < 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class Dataset:
    """Labelled frames of one subtask; `traj` maps each frame to its source trajectory."""
    images: np.ndarray
    actions: np.ndarray
    flags: np.ndarray
    traj: np.ndarray

    def __len__(self):
        return len(self.flags)

    def select(self, traj_ids) -> "Dataset":
        m = np.isin(self.traj, traj_ids)
        return Dataset(self.images[m], self.actions[m], self.flags[m], self.traj[m])


def split_trajectories(data: Dataset, n_train: int, n_test: int, rng):
    ids = np.unique(data.traj)
    perm = rng.permutation(ids)
    n_train = min(n_train, len(ids))
    train_ids = perm[:n_train]
    test_ids = perm[n_train:n_train + n_test]
    return data.select(train_ids), data.select(test_ids)


def evaluate(member: EnsembleMember, data: Dataset, subtask: str, mu: float, batch: int = 64) -> dict:
    """Held-out losses, mean angular error (deg) on nonzero labels, termination accuracy."""
    tot = {"mse": 0.0, "ce": 0.0}
    preds, probs = [], []
    for i in range(0, len(data), batch):
        sl = slice(i, i + batch)
        a, p = member.forward(data.images[sl], subtask, "eval")
        preds.append(a)
        probs.append(p)
        n = len(a)
        y = data.actions[sl]
        t = data.flags[sl]
        pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
        tot["mse"] += float(np.mean((a - y) ** 2)) * n
        tot["ce"] += float(np.mean(-(t * np.log(pc) + (1 - t) * np.log(1 - pc)))) * n
    n = max(len(data), 1)
    preds = np.concatenate(preds) if preds else np.zeros((0, 2))
    probs = np.concatenate(probs) if probs else np.zeros(0)
    nz = np.linalg.norm(data.actions, axis=1) > 0
    if nz.any():
        cos = np.sum(preds[nz] * data.actions[nz], axis=1) / (
            np.linalg.norm(preds[nz], axis=1) * np.linalg.norm(data.actions[nz], axis=1) + 1e-12)
        ang = float(np.degrees(np.mean(np.arccos(np.clip(cos, -1, 1)))))
    else:
        ang = float("nan")
    acc = float(np.mean((probs >= 0.5) == (data.flags == 1))) if len(probs) else float("nan")
    mse, ce = tot["mse"] / n, tot["ce"] / n
    return {"mse": mse, "ce": ce, "total": mse + mu * ce, "angle_deg": ang, "term_acc": acc}


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=cfg.lr)


def train_member(member: EnsembleMember, pick_data: Dataset, place_data: Dataset,
                 hyper: Hyperparameters | None = None, seed: int = 0,
                 cfg: TrainConfig | None = None, log=None) -> dict:
    """Minibatch descent on MSE + mu*CE, alternating pick and place batches through the shared trunk."""
    hyper = hyper or Hyperparameters()
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(seed)
    splits = {}
    for s, data in (("pick", pick_data), ("place", place_data)):
        tr, te = split_trajectories(data, cfg.n_train, cfg.n_test, rng)
        if len(tr) == 0 or len(te) == 0:
            raise ValueError(f"empty {s} split (train {len(tr)}, held-out {len(te)})")
        splits[s] = (tr, te)
    params = member.params()
    opt = _optimizer(list(params.values()), cfg)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
             if cfg.schedule == "cosine" else None)

    def held_out():
        return {s: evaluate(member, te, s, hyper.mu, cfg.eval_batch) for s, (_, te) in splits.items()}

    report = {"seed": seed, "epochs": [], "n_train": {s: len(tr) for s, (tr, _) in splits.items()},
              "n_test": {s: len(te) for s, (_, te) in splits.items()}}
    report["initial"] = held_out()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        queues = {}
        for s, (tr, _) in splits.items():
            perm = rng.permutation(len(tr))
            queues[s] = [perm[i:i + cfg.batch_size] for i in range(0, len(perm), cfg.batch_size)]
        order = []
        for i in range(max(len(q) for q in queues.values())):
            for s in SUBTASKS:
                if i < len(queues[s]):
                    order.append((s, queues[s][i]))
        train_tot = 0.0
        with single_thread():
            for s, idx in order:
                tr = splits[s][0]
                loss, _, _ = member.loss_and_grad(tr.images[idx], tr.actions[idx], tr.flags[idx],
                                                  s, hyper.mu, rng)
                train_tot += loss
                opt.step()
        if sched is not None:
            sched.step()
        ev = held_out()
        rec = {"epoch": epoch + 1, "train_total": train_tot / max(len(order), 1), "held_out": ev,
               "seconds": time.perf_counter() - t0}
        report["epochs"].append(rec)
        if log is not None:
            log(f"member seed={seed} epoch {epoch + 1}/{cfg.epochs} train={rec['train_total']:.4f} "
                + " ".join(f"{s}:{ev[s]['total']:.4f}/{ev[s]['angle_deg']:.1f}deg/{ev[s]['term_acc']:.3f}"
                           for s in SUBTASKS)
                + f" ({rec['seconds']:.0f}s)")
    report["final"] = report["epochs"][-1]["held_out"] if report["epochs"] else report["initial"]
    for p in params.values():
        p.grad = None
    return report


def train_ensemble(ens: EnsemblePolicy, pick_data: Dataset, place_data: Dataset,
                   cfg: TrainConfig | None = None, log=None) -> list[dict]:
    return [train_member(m, pick_data, place_data, ens.hyper, m.seed, cfg, log) for m in ens.members]


# ---------------------------------------------------------------- checkpoints


def save_ensemble(ens: EnsemblePolicy, path) -> Path:
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": ens.arch.to_dict(),
        "hyper": asdict(ens.hyper),
        "dtype": ens.members[0].dtype.name,
        "seeds": [m.seed for m in ens.members],
        "names": list(ens.members[0].params().keys()),
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, m in enumerate(ens.members):
        arrays[f"member{i}"] = np.concatenate([a.ravel() for a in m.state_arrays().values()])
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_ensemble(path) -> EnsemblePolicy:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arch = Architecture.from_dict(meta["arch"])
        members = []
        for i, seed in enumerate(meta["seeds"]):
            m = EnsembleMember(arch, seed, meta["dtype"])
            flat = z[f"member{i}"]
            pos = 0
            arrays = {}
            for name, ref in m.params().items():
                n = ref.numel()
                arrays[name] = flat[pos:pos + n].reshape(tuple(ref.shape))
                pos += n
            if pos != flat.size:
                raise ValueError(f"{path}: member {i} has {flat.size} weights, expected {pos}")
            m.load_arrays(arrays)
            members.append(m)
    return EnsemblePolicy(members, Hyperparameters(**meta["hyper"]), arch)
