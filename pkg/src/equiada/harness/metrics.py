"""Trajectory forecasting errors and the marginal-density score."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


def _per_sample_displacement(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == truth.ndim:
        pred = pred[None]
    if pred.shape[1:] != truth.shape or truth.ndim != 3 or truth.shape[-1] != 3:
        raise ValueError(f"prediction {pred.shape} does not match truth {truth.shape}")
    if pred.shape[0] < 1:
        raise ValueError("need at least one sample")
    return np.linalg.norm(pred - truth[None], axis=-1)  # (K, N, T)


def ade(pred, truth) -> float:
    """Average displacement error; ``pred`` is ``(K, N, T, 3)`` or ``(N, T, 3)``."""
    return float(_per_sample_displacement(pred, truth).mean(axis=(1, 2)).mean())


def fde(pred, truth) -> float:
    """Final-frame displacement error averaged over nodes and samples."""
    return float(_per_sample_displacement(pred, truth)[:, :, -1].mean(axis=1).mean())


def marginal_score(samples, reference, bins: int = 50) -> float:
    """Mean absolute difference of per-frame coordinate histograms.

    For each frame and each of x/y/z, values are pooled over all systems and
    nodes, binned on shared edges spanning both sets, and normalised to
    probabilities. The score averages the per-bin absolute difference over
    bins, axes and frames.
    """
    s = np.asarray(samples, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if s.size == 0 or r.size == 0:
        raise ValueError("marginal score needs non-empty sample and reference sets")
    if bins < 2:
        raise ValueError("need at least two bins")
    if s.shape[2:] != r.shape[2:]:
        raise ValueError(f"frame/axis layout differs: {s.shape} vs {r.shape}")
    scores = []
    for t in range(s.shape[2]):
        for axis in range(3):
            a = s[:, :, t, axis].ravel()
            b = r[:, :, t, axis].ravel()
            lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
            if lo == hi:
                log.warning("degenerate value range at frame %d axis %d; scoring 0", t, axis)
                scores.append(0.0)
                continue
            edges = np.linspace(lo, hi, bins + 1)
            pa = np.histogram(a, edges)[0] / a.size
            pb = np.histogram(b, edges)[0] / b.size
            scores.append(float(np.abs(pa - pb).mean()))
    return float(np.mean(scores))
