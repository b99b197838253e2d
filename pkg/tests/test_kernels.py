import os
import subprocess
import sys

import numpy as np
import pytest

from equiada import _kernels as K


def test_numba_active_by_default():
    assert K.USING_NUMBA


@pytest.mark.parametrize("n_segments", [1, 5, 17])
def test_segment_sum_paths_agree(rng, n_segments):
    vals = rng.standard_normal((60, 4, 3))
    idx = rng.integers(0, n_segments, 60)
    a = K.segment_sum_numpy(vals, idx, n_segments)
    b = K.segment_sum(vals, idx, n_segments)
    assert np.abs(a - b).max() <= 1e-12


def test_segment_sum_brute_force(rng):
    vals = rng.standard_normal((10, 2))
    idx = rng.integers(0, 3, 10)
    oracle = np.stack([vals[idx == s].sum(axis=0) for s in range(3)])
    assert np.abs(K.segment_sum(vals, idx, 3) - oracle).max() <= 1e-12


def test_forces_paths_agree(rng):
    pos, q = rng.uniform(-1, 1, (6, 3)), rng.choice([-1.0, 1.0], 6)
    assert np.abs(K.coulomb_forces_numpy(pos, q, 1.0, 0.1) - K.coulomb_forces(pos, q, 1.0, 0.1)).max() <= 1e-12


def test_leapfrog_paths_agree(rng):
    pos, vel, q = rng.uniform(-1, 1, (5, 3)), 0.5 * rng.standard_normal((5, 3)), rng.choice([-1.0, 1.0], 5)
    fa, va = K.leapfrog_numpy(pos, vel, q, 1.0, 0.1, 1e-3, 6, 50)
    fb, vb = K.leapfrog(pos, vel, q, 1.0, 0.1, 1e-3, 6, 50)
    assert np.abs(fa - fb).max() <= 1e-12 and np.abs(va - vb).max() <= 1e-12


def test_env_flag_selects_numpy_path():
    code = (
        "from equiada import _kernels as K; from equiada.simdata import simulate_charged;"
        "import sys; sys.stdout.buffer.write(simulate_charged(5, 4, seed=2).trajectory.coords.tobytes());"
        "sys.stderr.write(str(K.USING_NUMBA))"
    )
    env = {**os.environ, "EQUIADA_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, check=True)
    assert out.stderr.decode().strip().endswith("False")
    from equiada.simdata import simulate_charged

    fast = simulate_charged(5, 4, seed=2).trajectory.coords
    slow = np.frombuffer(out.stdout, dtype=np.float64).reshape(fast.shape)
    assert np.abs(fast - slow).max() <= 1e-12
