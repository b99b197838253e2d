"""Geometric graphs and trajectories, rigid motions, and center-of-mass removal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_edges(edges: np.ndarray, n_nodes: int) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
        raise ValueError(f"edge index out of range [0, {n_nodes})")
    if np.any(edges[:, 0] == edges[:, 1]):
        raise ValueError("self-loops are not allowed")
    return edges


@dataclass(frozen=True)
class GeometricTrajectory:
    """Node features ``(N, H)``, coordinates ``(N, T, 3)`` and directed edges ``(E, 2)``.

    A static geometric graph is the ``T = 1`` case.
    """

    node_features: np.ndarray
    coords: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.node_features, dtype=np.float64)
        x = np.asarray(self.coords, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"coords must be (N, T, 3), got {x.shape}")
        if h.ndim != 2 or h.shape[0] != x.shape[0] or h.shape[1] < 1:
            raise ValueError(f"node_features must be (N, H>0) with N={x.shape[0]}, got {h.shape}")
        if x.shape[1] < 1:
            raise ValueError("need at least one frame")
        if not np.all(np.isfinite(x)):
            raise ValueError("coordinates must be finite")
        object.__setattr__(self, "node_features", h)
        object.__setattr__(self, "coords", x)
        object.__setattr__(self, "edges", _check_edges(self.edges, x.shape[0]))

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coords.shape[1]

    def with_coords(self, coords: np.ndarray) -> "GeometricTrajectory":
        return GeometricTrajectory(self.node_features, coords, self.edges)


def GeometricGraph(node_features, coords, edges) -> GeometricTrajectory:
    """Single-frame trajectory from ``(N, 3)`` coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    return GeometricTrajectory(node_features, coords.reshape(-1, 1, 3), edges)


def fully_connected_edges(n: int) -> np.ndarray:
    idx = np.arange(n)
    i, j = np.meshgrid(idx, idx, indexing="ij")
    mask = i != j
    return np.stack([i[mask], j[mask]], axis=1)


@dataclass(frozen=True)
class RigidMotion:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        d = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-10 or abs(np.linalg.det(r) - 1.0) > 1e-10:
            raise ValueError("rotation must be orthogonal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", d)

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, seed, scale: float = 1.0) -> "RigidMotion":
        rng = np.random.default_rng(seed)
        return cls(random_rotation(rng), scale * rng.standard_normal(3))

    def compose(self, first: "RigidMotion") -> "RigidMotion":
        """``self ∘ first``: apply ``first`` then ``self``."""
        return RigidMotion(self.rotation @ first.rotation, self.rotation @ first.translation + self.translation)

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotation only, for displacement-like quantities."""
        return np.asarray(vectors) @ self.rotation.T


def apply_rigid_motion(traj: GeometricTrajectory, g: RigidMotion) -> GeometricTrajectory:
    return traj.with_coords(g.apply(traj.coords))


def random_rotation(seed) -> np.ndarray:
    """Haar-uniform rotation from QR of a Gaussian matrix.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def center_of_mass(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if coords.shape[0] == 0:
        raise ValueError("center of mass of an empty node set")
    return coords.mean(axis=0)


def com_project(coords: np.ndarray) -> np.ndarray:
    """Remove the joint mean over all (node, frame) rows of an ``(N, T, 3)`` array."""
    coords = np.asarray(coords, dtype=np.float64)
    return coords - coords.reshape(-1, 3).mean(axis=0)


def pairwise_sq_dist(coords_t: np.ndarray, edges: np.ndarray) -> np.ndarray:
    coords_t = np.asarray(coords_t, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    diff = coords_t[edges[:, 0]] - coords_t[edges[:, 1]]
    return np.einsum("ek,ek->e", diff, diff)
