"""Hot numeric kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
Set ``EQUIADA_DISABLE_NUMBA=1`` (or leave numba uninstalled) to force the
numpy path; :data:`USING_NUMBA` reports which path is active.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("EQUIADA_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by EQUIADA_DISABLE_NUMBA")
    from numba import njit

    USING_NUMBA = True
except ImportError:
    USING_NUMBA = False


# ---------------------------------------------------------------- numpy path


def segment_sum_numpy(values: np.ndarray, index: np.ndarray, n_segments: int) -> np.ndarray:
    out = np.zeros((n_segments,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def coulomb_forces_numpy(pos, charges, kappa, soft):
    diff = pos[:, None, :] - pos[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    inv = (r2 + soft) ** -1.5
    np.fill_diagonal(inv, 0.0)
    coef = kappa * np.outer(charges, charges) * inv
    return np.einsum("ij,ijk->ik", coef, diff)


def leapfrog_numpy(pos, vel, charges, kappa, soft, dt, n_frames, save_every):
    pos = pos.copy()
    vel = vel.copy()
    frames = np.empty((n_frames, pos.shape[0], 3))
    vels = np.empty((n_frames, pos.shape[0], 3))
    frames[0] = pos
    vels[0] = vel
    acc = coulomb_forces_numpy(pos, charges, kappa, soft)
    for f in range(1, n_frames):
        for _ in range(save_every):
            vel += 0.5 * dt * acc
            pos += dt * vel
            acc = coulomb_forces_numpy(pos, charges, kappa, soft)
            vel += 0.5 * dt * acc
        frames[f] = pos
        vels[f] = vel
    return frames, vels


# ---------------------------------------------------------------- numba path

if USING_NUMBA:

    @njit(cache=True)
    def _segment_sum_2d(values, index, n_segments):
        out = np.zeros((n_segments, values.shape[1]))
        for r in range(values.shape[0]):
            seg = index[r]
            for c in range(values.shape[1]):
                out[seg, c] += values[r, c]
        return out

    @njit(cache=True)
    def _coulomb_forces_nb(pos, charges, kappa, soft):
        n = pos.shape[0]
        acc = np.zeros((n, 3))
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                dx = pos[i, 0] - pos[j, 0]
                dy = pos[i, 1] - pos[j, 1]
                dz = pos[i, 2] - pos[j, 2]
                r2 = dx * dx + dy * dy + dz * dz
                coef = kappa * charges[i] * charges[j] * (r2 + soft) ** -1.5
                acc[i, 0] += coef * dx
                acc[i, 1] += coef * dy
                acc[i, 2] += coef * dz
        return acc

    @njit(cache=True)
    def _leapfrog_nb(pos, vel, charges, kappa, soft, dt, n_frames, save_every):
        pos = pos.copy()
        vel = vel.copy()
        n = pos.shape[0]
        frames = np.empty((n_frames, n, 3))
        vels = np.empty((n_frames, n, 3))
        frames[0] = pos
        vels[0] = vel
        acc = _coulomb_forces_nb(pos, charges, kappa, soft)
        for f in range(1, n_frames):
            for _ in range(save_every):
                vel += 0.5 * dt * acc
                pos += dt * vel
                acc = _coulomb_forces_nb(pos, charges, kappa, soft)
                vel += 0.5 * dt * acc
            frames[f] = pos
            vels[f] = vel
        return frames, vels

    def segment_sum(values: np.ndarray, index: np.ndarray, n_segments: int) -> np.ndarray:
        """Sum rows of ``values`` into ``n_segments`` buckets given by ``index``."""
        flat = np.ascontiguousarray(values, dtype=np.float64).reshape(values.shape[0], -1)
        out = _segment_sum_2d(flat, np.ascontiguousarray(index, dtype=np.int64), n_segments)
        return out.reshape((n_segments,) + values.shape[1:])

    def coulomb_forces(pos, charges, kappa, soft):
        return _coulomb_forces_nb(
            np.ascontiguousarray(pos, dtype=np.float64),
            np.ascontiguousarray(charges, dtype=np.float64),
            float(kappa),
            float(soft),
        )

    def leapfrog(pos, vel, charges, kappa, soft, dt, n_frames, save_every):
        """Kick-drift-kick integration; returns (frames, velocities), each n_frames x N x 3."""
        return _leapfrog_nb(
            np.ascontiguousarray(pos, dtype=np.float64),
            np.ascontiguousarray(vel, dtype=np.float64),
            np.ascontiguousarray(charges, dtype=np.float64),
            float(kappa),
            float(soft),
            float(dt),
            int(n_frames),
            int(save_every),
        )

else:
    segment_sum = segment_sum_numpy
    coulomb_forces = coulomb_forces_numpy
    leapfrog = leapfrog_numpy
