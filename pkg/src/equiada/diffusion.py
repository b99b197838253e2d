"""Noise schedules, forward/reverse processes, losses and ancestral samplers.

Two processes are implemented:

* unconditional, living in the subspace of trajectories whose joint
  (node, frame) mean is zero; noise is projected onto that subspace;
* conditional, centred on an anchor built from the condition frames:
  ``x_tau = x_r + sqrt(abar) (x0 - x_r) + sqrt(1 - abar) eps``.

Predictors are callables ``predict(batch, x_tau, tau) -> Tensor`` so the
same code drives the base model, the fused model and test stubs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from equiada import numerics as nx
from equiada.backbone import DenoiserConfig, DenoiserModel
from equiada.batch import GraphBatch, graph_com_project, graph_com_project_np, graph_mean
from equiada.controls import FrameControl, couple_batch, decouple
from equiada.geometry import com_project

Predictor = Callable[[GraphBatch, nx.Tensor, np.ndarray], nx.Tensor]

COM_TOL = 1e-10


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by diffusion step ``tau`` in ``0..n_steps``; entry 0 is the clean state."""

    n_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def betas(self) -> np.ndarray:
        return self.beta[1:]

    @property
    def sigma2(self) -> np.ndarray:
        # reverse variance sigma_tau^2 = beta_tau
        return self.beta

    def check_step(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=np.int64)
        if np.any(tau < 1) or np.any(tau > self.n_steps):
            raise ValueError(f"diffusion step must be in 1..{self.n_steps}")
        return tau


def build_linear_schedule(
    n_steps: int = 1000, beta_start: float = 0.02, beta_end: float = 0.0001, increasing: bool = False
) -> NoiseSchedule:
    """Linear interpolation from ``beta_start`` to ``beta_end``.

    ``increasing=True`` reorders the endpoints so beta grows with ``tau``.
    """
    if n_steps < 1:
        raise ValueError("need at least one diffusion step")
    for b in (beta_start, beta_end):
        if not 0.0 < b < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {b}")
    if increasing:
        beta_start, beta_end = min(beta_start, beta_end), max(beta_start, beta_end)
    betas = np.linspace(beta_start, beta_end, n_steps) if n_steps > 1 else np.array([beta_start])
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    return NoiseSchedule(n_steps, beta, alpha, np.cumprod(alpha))


# ------------------------------------------------------------------ subspace process


def sample_subspace_gaussian(n_nodes: int, n_frames: int, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return com_project(rng.standard_normal((n_nodes, n_frames, 3)))


def _check_com_free(x: np.ndarray, what: str) -> None:
    dev = np.abs(np.asarray(x).reshape(-1, 3).mean(axis=0)).max()
    if dev > COM_TOL:
        raise ValueError(f"{what} is not centred (joint mean {dev:.2e})")


def forward_noise_uncond(x0: np.ndarray, tau: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    _check_com_free(x0, "x0")
    _check_com_free(eps, "noise")
    ab = sched.alpha_bar[sched.check_step(tau)]
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(eps)


def reverse_mean_uncond(x_tau, tau: int, eps_pred, sched: NoiseSchedule):
    tau = int(sched.check_step(tau))
    coef = sched.beta[tau] / math.sqrt(1.0 - sched.alpha_bar[tau])
    return (np.asarray(x_tau) - coef * np.asarray(eps_pred)) / math.sqrt(sched.alpha[tau])


# ------------------------------------------------------------------ anchored (conditional) process


def anchor_weights(gamma, h_hat):
    """Per-node weights ``w[i, t, s]`` over condition frames ``s``.

    ``gamma`` is ``(T,)`` and ``h_hat`` is ``(N, T_c)``. All but the last
    weight are ``gamma_t * h_hat[i, s]``; the last is one minus their sum.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h_hat.shape[1] < 1:
        raise ValueError("anchor needs at least one condition frame")
    w = gamma[None, :, None] * h_hat[:, None, :-1]
    last = 1.0 - w.sum(axis=-1, keepdims=True)
    return np.concatenate([w, last], axis=-1)


def anchor_mean(x_c, gamma, h_hat):
    """Anchor ``x_r`` ``(N, T, 3)`` from condition frames ``x_c`` ``(N, T_c, 3)``.

    Written relative to the last condition frame, which is algebraically the
    weighted sum with the closing weight and keeps translations exact.
    Accepts tensors so ``gamma`` and ``h_hat`` can carry gradients.
    """
    x_c = nx.as_tensor(x_c)
    gamma, h_hat = nx.as_tensor(gamma), nx.as_tensor(h_hat)
    n, t_c = x_c.shape[0], x_c.shape[1]
    if t_c < 1:
        raise ValueError("anchor needs at least one condition frame")
    t = gamma.shape[0]
    last = x_c[:, t_c - 1 : t_c]
    base = nx.broadcast_to(last, (n, t, 3))
    if t_c == 1:
        return base
    rel = nx.sub(x_c[:, : t_c - 1], last)  # (N, T_c-1, 3)
    w = nx.mul(nx.reshape(gamma, (1, t, 1)), nx.reshape(h_hat[:, : t_c - 1], (n, 1, t_c - 1)))
    return nx.add(base, nx.matmul(w, rel))


class ConditionalAnchor:
    """Learnable anchor: ``gamma`` per predicted frame and a small net for ``h_hat``.

    ``h_hat[i, s]`` is a sigmoid perceptron over node features and the
    relative position of condition frame ``s``.
    """

    def __init__(self, prefix: str = "anchor."):
        self.prefix = prefix

    def init_params(self, params: nx.ParamSet, in_dim: int, n_frames: int, hidden: int = 16, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        params.add(self.prefix + "gamma", np.zeros(n_frames))
        params.add(self.prefix + "hnet.0.W", rng.uniform(-1, 1, (in_dim + 1, hidden)) / math.sqrt(in_dim + 1))
        params.add(self.prefix + "hnet.0.b", np.zeros(hidden))
        params.add(self.prefix + "hnet.1.W", rng.uniform(-1, 1, (hidden, 1)) / math.sqrt(hidden))
        params.add(self.prefix + "hnet.1.b", np.zeros(1))

    def h_hat(self, p: Mapping[str, nx.Tensor], h_raw: np.ndarray, t_c: int):
        h_raw = np.asarray(h_raw, dtype=np.float64)
        n = h_raw.shape[0]
        pos = np.arange(t_c) / max(t_c - 1, 1)
        inp = np.concatenate([np.repeat(h_raw[:, None, :], t_c, axis=1), np.broadcast_to(pos[None, :, None], (n, t_c, 1))], -1)
        layers = [(p[self.prefix + f"hnet.{k}.W"], p[self.prefix + f"hnet.{k}.b"]) for k in range(2)]
        return nx.reshape(nx.sigmoid(nx.mlp_forward(layers, inp)), (n, t_c))

    def __call__(self, p: Mapping[str, nx.Tensor], h_raw: np.ndarray, x_c):
        x_c = nx.as_tensor(x_c)
        return anchor_mean(x_c, p[self.prefix + "gamma"], self.h_hat(p, h_raw, x_c.shape[1]))


def forward_noise_cond(x0, x_r, tau: int, eps, sched: NoiseSchedule):
    x0, x_r, eps = (np.asarray(a, dtype=np.float64) for a in (x0, x_r, eps))
    if not x0.shape == x_r.shape == eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape}, x_r {x_r.shape}, eps {eps.shape}")
    ab = sched.alpha_bar[sched.check_step(tau)]
    return x_r + math.sqrt(ab) * (x0 - x_r) + math.sqrt(1.0 - ab) * eps


def reverse_mean_cond(x_tau, x_r, tau: int, eps_pred, sched: NoiseSchedule):
    tau = int(sched.check_step(tau))
    coef = sched.beta[tau] / math.sqrt(1.0 - sched.alpha_bar[tau])
    x_tau, x_r = np.asarray(x_tau), np.asarray(x_r)
    return x_r + (x_tau - x_r - coef * np.asarray(eps_pred)) / math.sqrt(sched.alpha[tau])


# ------------------------------------------------------------------ losses


def _per_node(values: np.ndarray, batch: GraphBatch) -> np.ndarray:
    return np.asarray(values)[batch.node_graph][:, None, None]


def draw_training_noise(batch: GraphBatch, sched: NoiseSchedule, seed, subspace: bool):
    """Per-graph steps ``tau`` and Gaussian noise (projected when ``subspace``)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tau = rng.integers(1, sched.n_steps + 1, size=batch.n_graphs)
    eps = rng.standard_normal(batch.coords.shape)
    if subspace:
        eps = graph_com_project_np(eps, batch.node_graph, batch.n_graphs)
    return tau, eps


def denoising_loss_uncond(predict: Predictor, batch: GraphBatch, tau, eps, sched: NoiseSchedule) -> nx.Tensor:
    """Mean over graphs of the summed squared error between subspace noise and prediction."""
    x0 = graph_com_project_np(batch.coords, batch.node_graph, batch.n_graphs)
    ab = _per_node(sched.alpha_bar[sched.check_step(tau)], batch)
    x_tau = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    pred = predict(batch.with_coords(x_tau), nx.Tensor(x_tau), tau)
    err = nx.tsum(nx.square(nx.sub(pred, eps)))
    return nx.mul(err, 1.0 / batch.n_graphs)


def loss_uncond(predict: Predictor, batch: GraphBatch, sched: NoiseSchedule, seed) -> nx.Tensor:
    tau, eps = draw_training_noise(batch, sched, seed, subspace=True)
    return denoising_loss_uncond(predict, batch, tau, eps, sched)


def denoising_loss_cond(predict: Predictor, batch: GraphBatch, x_r, tau, eps, sched: NoiseSchedule) -> nx.Tensor:
    """Anchored denoising loss; ``x_r`` may be a tensor depending on trainable weights."""
    ab = _per_node(sched.alpha_bar[sched.check_step(tau)], batch)
    x_r = nx.as_tensor(x_r)
    x_tau = nx.add(nx.add(x_r, nx.mul(nx.sub(batch.coords, x_r), np.sqrt(ab))), np.sqrt(1.0 - ab) * eps)
    pred = predict(batch.with_coords(x_tau.data), x_tau, tau)
    err = nx.tsum(nx.square(nx.sub(pred, eps)))
    return nx.mul(err, 1.0 / batch.n_graphs)


def loss_cond(predict: Predictor, batch: GraphBatch, x_r, sched: NoiseSchedule, seed) -> nx.Tensor:
    tau, eps = draw_training_noise(batch, sched, seed, subspace=False)
    return denoising_loss_cond(predict, batch, x_r, tau, eps, sched)


# ------------------------------------------------------------------ samplers


@dataclass
class SamplerResult:
    sample: np.ndarray
    path: list[np.ndarray] | None = None


def _noise_source(seed, noise):
    if noise is not None:
        it = iter(noise)
        return lambda shape: np.asarray(next(it), dtype=np.float64).reshape(shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return lambda shape: rng.standard_normal(shape)


def sample_uncond(
    predict: Predictor,
    batch: GraphBatch,
    sched: NoiseSchedule,
    seed=0,
    noise=None,
    keep_path: bool = False,
) -> SamplerResult:
    """Ancestral sampling in the centred subspace.

    ``batch`` supplies features, edges and the output shape. ``noise``, if
    given, is a sequence of ``n_steps`` standard-normal arrays (prior first)
    used in place of the seeded generator.
    """
    draw = _noise_source(seed, noise)
    proj = lambda a: graph_com_project_np(a, batch.node_graph, batch.n_graphs)
    shape = batch.coords.shape
    x = proj(draw(shape))
    path = [x] if keep_path else None
    for tau in range(sched.n_steps, 0, -1):
        taus = np.full(batch.n_graphs, tau)
        eps = predict(batch.with_coords(x), nx.Tensor(x), taus).data
        mu = reverse_mean_uncond(x, tau, proj(eps), sched)
        x = mu + math.sqrt(sched.sigma2[tau]) * proj(draw(shape)) if tau > 1 else mu
        x = proj(x)
        if keep_path:
            path.append(x)
    return SamplerResult(x, path)


def sample_cond(
    predict: Predictor,
    batch: GraphBatch,
    x_r: np.ndarray,
    sched: NoiseSchedule,
    seed=0,
    noise=None,
    keep_path: bool = False,
) -> SamplerResult:
    """Ancestral sampling starting from ``N(x_r, I)``; ``noise`` as in :func:`sample_uncond`."""
    if x_r is None:
        raise ValueError("conditional sampling needs an anchor")
    x_r = np.asarray(x_r, dtype=np.float64)
    draw = _noise_source(seed, noise)
    shape = x_r.shape
    x = x_r + draw(shape)
    path = [x] if keep_path else None
    for tau in range(sched.n_steps, 0, -1):
        taus = np.full(batch.n_graphs, tau)
        eps = predict(batch.with_coords(x), nx.Tensor(x), taus).data
        mu = reverse_mean_cond(x, x_r, tau, eps, sched)
        x = mu + math.sqrt(sched.sigma2[tau]) * draw(shape) if tau > 1 else mu
        if keep_path:
            path.append(x)
    return SamplerResult(x, path)


# ------------------------------------------------------------------ conditional denoiser


class ConditionalDenoiser:
    """``eps(x_tau, x_c, tau)``: the base network run on condition + target frames.

    Condition frames are prefixed to the noised frames and the output is cut
    back to the target frames; the anchor weights live in the same ParamSet.
    """

    def __init__(
        self, config: DenoiserConfig, n_frames: int, cond_frames: int, seed: int = 0, params: nx.ParamSet | None = None
    ):
        self.net = DenoiserModel(config, params=params, seed=seed)
        self.cond_frames = cond_frames
        self.anchor = ConditionalAnchor()
        if params is None:
            self.anchor.init_params(self.net.params, config.in_dim, n_frames, seed=seed + 1)
        self.n_frames = n_frames

    @property
    def params(self) -> nx.ParamSet:
        return self.net.params

    @property
    def config(self) -> DenoiserConfig:
        return self.net.config

    def predictor(self, x_c: np.ndarray, p: Mapping[str, nx.Tensor] | None = None) -> Predictor:
        p = self.params.tensors(track=False) if p is None else p

        def predict(batch, x_tau, tau):
            controls = [FrameControl(f) for f in batch.split(x_c)]
            ci = couple_batch(batch, x_tau, controls)
            eps, _ = self.net.forward(ci.batch, ci.x, tau, p=p)
            return decouple(eps, ci.record)

        return predict

    def anchor_for(self, batch: GraphBatch, x_c, p: Mapping[str, nx.Tensor] | None = None):
        p = self.params.tensors(track=False) if p is None else p
        return self.anchor(p, batch.node_features, x_c)
