"""Charged-particle N-body trajectories and the binary dataset format.

File layout (all little-endian)::

    b"GADA" | version u32 | record count u32
    per record: N u32 | T u32 | H u32 | features N*H f64 | coords N*T*3 f64
                | edge count u32 | edges 2*u32 each
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from equiada import _kernels
from equiada.geometry import GeometricTrajectory, fully_connected_edges

log = logging.getLogger(__name__)

MAGIC = b"GADA"
VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ParticleSystem:
    charges: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    kappa: float = 1.0
    softening: float = 0.1
    dt: float = 0.001

    def __post_init__(self):
        q = np.asarray(self.charges, dtype=np.float64)
        if not np.all(np.isin(q, (-1.0, 1.0))):
            raise ValueError("charges must be +1 or -1")
        if self.dt <= 0 or self.softening <= 0:
            raise ValueError("dt and softening must be positive")
        object.__setattr__(self, "charges", q)
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.float64))
        object.__setattr__(self, "velocities", np.asarray(self.velocities, dtype=np.float64))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator, box: float = 1.0, vel_std: float = 0.5, **kw) -> "ParticleSystem":
        return cls(
            charges=rng.choice([-1.0, 1.0], size=n),
            positions=rng.uniform(-box, box, size=(n, 3)),
            velocities=vel_std * rng.standard_normal((n, 3)),
            **kw,
        )

    def integrate(self, n_frames: int, save_every: int) -> tuple[np.ndarray, np.ndarray]:
        """Positions and velocities ``(N, n_frames, 3)``, one frame per ``save_every`` steps."""
        frames, vels = _kernels.leapfrog(
            self.positions, self.velocities, self.charges, self.kappa, self.softening, self.dt, n_frames, save_every
        )
        return frames.transpose(1, 0, 2), vels.transpose(1, 0, 2)

    def energy(self, positions: np.ndarray, velocities: np.ndarray) -> float:
        kinetic = 0.5 * float(np.sum(velocities**2))
        diff = positions[:, None, :] - positions[None, :, :]
        r = np.sqrt(np.sum(diff**2, axis=-1) + self.softening)
        iu = np.triu_indices(len(self.charges), 1)
        potential = float(np.sum(self.kappa * np.outer(self.charges, self.charges)[iu] / r[iu]))
        return kinetic + potential


@dataclass(frozen=True)
class TrajectoryRecord:
    trajectory: GeometricTrajectory
    split: str = "train"
    seed: tuple = field(default=(), compare=False)


def charge_features(charges: np.ndarray) -> np.ndarray:
    """One-hot charge encoding: column 0 for -1, column 1 for +1."""
    charges = np.asarray(charges)
    return np.stack([charges < 0, charges > 0], axis=1).astype(np.float64)


def simulate_charged(
    n: int = 5,
    n_frames: int = 12,
    seed=0,
    dt: float = 0.001,
    save_every: int = 100,
    kappa: float = 1.0,
    softening: float = 0.1,
    cutoff: float = 10.0,
    max_retries: int = 20,
) -> TrajectoryRecord:
    """Simulate one charged-particle system, redrawing if a particle escapes ``cutoff``."""
    if n < 2:
        raise ValueError("need at least two particles")
    entropy = tuple(np.atleast_1d(seed).tolist())
    for attempt in range(max_retries):
        ss = np.random.SeedSequence(list(entropy) + [attempt])
        rng = np.random.default_rng(ss)
        system = ParticleSystem.random(n, rng, kappa=kappa, softening=softening, dt=dt)
        coords, _ = system.integrate(n_frames, save_every)
        if np.all(np.isfinite(coords)) and np.abs(coords).max() <= cutoff:
            traj = GeometricTrajectory(charge_features(system.charges), coords, fully_connected_edges(n))
            return TrajectoryRecord(traj, seed=entropy + (attempt,))
        log.debug("seed %s attempt %d escaped, redrawing", entropy, attempt)
    raise RuntimeError(f"particles escaped the cutoff radius {cutoff} after {max_retries} attempts (seed {entropy})")


@dataclass(frozen=True)
class DataConfig:
    n_particles: int = 5
    n_frames: int = 12
    n_train: int = 300
    n_val: int = 100
    n_test: int = 100
    dt: float = 0.001
    save_every: int = 100
    seed: int = 0

    @classmethod
    def full_scale(cls, **kw) -> "DataConfig":
        return cls(n_train=3000, n_val=2000, n_test=2000, **kw)


def make_dataset(cfg: DataConfig) -> dict[str, list[TrajectoryRecord]]:
    """Train/val/test records; each split draws from its own seed stream."""
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    out = {}
    for split_id, split in enumerate(SPLITS):
        if sizes[split] < 1:
            raise ValueError(f"split {split} needs at least one record")
        records = []
        for i in range(sizes[split]):
            rec = simulate_charged(
                cfg.n_particles, cfg.n_frames, seed=(cfg.seed, split_id, i), dt=cfg.dt, save_every=cfg.save_every
            )
            records.append(TrajectoryRecord(rec.trajectory, split, rec.seed))
        out[split] = records
    return out


# ------------------------------------------------------------------ file format


def encode_records(trajs: Sequence[GeometricTrajectory]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(trajs))]
    for t in trajs:
        n, frames, h = t.n_nodes, t.n_frames, t.node_features.shape[1]
        parts.append(struct.pack("<III", n, frames, h))
        parts.append(t.node_features.astype("<f8").tobytes())
        parts.append(t.coords.astype("<f8").tobytes())
        parts.append(struct.pack("<I", len(t.edges)))
        parts.append(t.edges.astype("<u4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(
                f"truncated file: need {self.pos + n} bytes for {what}, have {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def decode_records(buf: bytes) -> list[GeometricTrajectory]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported format version {version}, expected {VERSION}")
    count = r.u32("record count")
    out = []
    for k in range(count):
        n, frames, h = r.u32(f"record {k} N"), r.u32(f"record {k} T"), r.u32(f"record {k} H")
        feats = r.f64(n * h, f"record {k} features").reshape(n, h)
        coords = r.f64(n * frames * 3, f"record {k} coords").reshape(n, frames, 3)
        n_edges = r.u32(f"record {k} edge count")
        edges = np.frombuffer(r.take(8 * n_edges, f"record {k} edges"), dtype="<u4").astype(np.int64).reshape(-1, 2)
        out.append(GeometricTrajectory(feats, coords, edges))
    if r.pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - r.pos} trailing bytes after {count} records")
    return out


def write_dataset(path, trajs: Sequence[GeometricTrajectory | TrajectoryRecord]) -> None:
    trajs = [t.trajectory if isinstance(t, TrajectoryRecord) else t for t in trajs]
    Path(path).write_bytes(encode_records(trajs))


def read_dataset(path) -> list[GeometricTrajectory]:
    return decode_records(Path(path).read_bytes())


def write_splits(directory, splits: dict[str, list[TrajectoryRecord]]) -> None:
    """One file per split: ``<dir>/train.gada``, ``val.gada``, ``test.gada``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for split, records in splits.items():
        write_dataset(d / f"{split}.gada", records)


def read_splits(directory) -> dict[str, list[GeometricTrajectory]]:
    d = Path(directory)
    return {s: read_dataset(d / f"{s}.gada") for s in SPLITS if (d / f"{s}.gada").exists()}
