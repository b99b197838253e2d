"""SE(3)-equivariant trajectory denoiser.

Each layer is an EGNN-style message-passing step applied per frame, plus a
per-node attention over the frame axis. Coordinate updates are built only
from relative vectors (``x_i - x_j`` within a frame and ``x_i^s - x_i^t``
across frames) scaled by invariant scalars, so displacements rotate with the
input and ignore translations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from equiada import numerics as nx
from equiada.batch import GraphBatch, graph_com_project
from equiada.geometry import GeometricTrajectory


@dataclass(frozen=True)
class DenoiserConfig:
    in_dim: int = 2
    hidden: int = 128
    n_layers: int = 6
    time_dim: int = 32
    attn_dim: int = 16
    frame_pe_dim: int = 8
    max_tau: int = 1000
    subspace: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def time_embed(tau, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding; ``tau`` scalar -> ``(dim,)``, array -> ``(len, dim)``."""
    if dim % 2:
        raise ValueError(f"time embedding dimension must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.multiply.outer(np.asarray(tau, dtype=np.float64), freqs)
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def frame_encoding(n_frames: int, dim: int) -> np.ndarray:
    return time_embed(np.arange(n_frames), dim, max_period=100.0)


def _init_linear(rng, fan_in: int, fan_out: int, gain: float = 1.0):
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_layer_params(params: nx.ParamSet, prefix: str, cfg: DenoiserConfig, rng) -> None:
    """Add one layer's weights under ``prefix`` (e.g. ``"layer0."``)."""
    h, td, a, pe = cfg.hidden, cfg.time_dim, cfg.attn_dim, cfg.frame_pe_dim
    shapes = {
        "msg.0": (2 * h + 1 + td, h, 1.0),
        "msg.1": (h, h, 1.0),
        "coord.0": (h, h, 1.0),
        "coord.1": (h, 1, 1e-2),
        "feat.0": (2 * h, h, 1.0),
        "feat.1": (h, h, 1.0),
    }
    for name, (fi, fo, gain) in shapes.items():
        w, b = _init_linear(rng, fi, fo, gain)
        params.add(f"{prefix}{name}.W", w)
        params.add(f"{prefix}{name}.b", b)
    params.add(f"{prefix}attn.q", _init_linear(rng, h + pe, a)[0])
    params.add(f"{prefix}attn.k", _init_linear(rng, h + pe, a)[0])
    params.add(f"{prefix}attn.gate", _init_linear(rng, h, 1, 1e-2)[0])


def _mlp(p: Mapping[str, nx.Tensor], prefix: str, n: int):
    return [(p[f"{prefix}.{k}.W"], p[f"{prefix}.{k}.b"]) for k in range(n)]


def layer_forward(
    p: Mapping[str, nx.Tensor],
    prefix: str,
    h,
    x,
    edges: np.ndarray,
    t_emb_edges: np.ndarray,
    attn_dim: int,
    frame_pe_dim: int,
):
    """One equivariant layer.

    ``h`` is ``(N, hidden)``, ``x`` is ``(N, T, 3)``, ``edges`` are ``(i, j)``
    pairs where node ``i`` receives from ``j``. Returns ``(h_new, dx)`` with
    ``dx`` a translation-invariant, rotation-equivariant ``(N, T, 3)``
    displacement.
    """
    h, x = nx.as_tensor(h), nx.as_tensor(x)
    n, t = x.shape[0], x.shape[1]
    hid = h.shape[1]
    recv, send = edges[:, 0], edges[:, 1]
    e = recv.size
    inv_deg = 1.0 / np.maximum(np.bincount(recv, minlength=n), 1).astype(np.float64)

    if e:
        hi = nx.reshape(nx.take_rows(h, recv), (e, 1, hid))
        hj = nx.reshape(nx.take_rows(h, send), (e, 1, hid))
        rel = nx.sub(nx.take_rows(x, recv), nx.take_rows(x, send))
        d2 = nx.tsum(nx.square(rel), axis=-1, keepdims=True)
        temb = t_emb_edges[:, None, :]
        msg_in = nx.concat(
            [
                nx.broadcast_to(hi, (e, t, hid)),
                nx.broadcast_to(hj, (e, t, hid)),
                d2,
                np.broadcast_to(temb, (e, t, temb.shape[-1])),
            ],
            axis=-1,
        )
        m = nx.mlp_forward(_mlp(p, prefix + "msg", 2), msg_in, final_activation=True)
        c = nx.mlp_forward(_mlp(p, prefix + "coord", 2), m)
        dx_space = nx.mul(nx.segment_sum(nx.mul(rel, c), recv, n), inv_deg[:, None, None])
        m_bar = nx.mul(nx.segment_sum(m, recv, n), inv_deg[:, None, None])
    else:
        dx_space = nx.Tensor(np.zeros((n, t, 3)))
        m_bar = nx.Tensor(np.zeros((n, t, hid)))

    pe = np.broadcast_to(frame_encoding(t, frame_pe_dim), (n, t, frame_pe_dim))
    ft = nx.concat([m_bar, pe], axis=-1)
    q = nx.matmul(ft, p[prefix + "attn.q"])
    k = nx.matmul(ft, p[prefix + "attn.k"])
    attn = nx.softmax(nx.mul(nx.matmul(q, nx.swapaxes(k, 1, 2)), 1.0 / math.sqrt(attn_dim)), axis=-1)
    gate = nx.matmul(m_bar, p[prefix + "attn.gate"])
    xc = nx.sub(x, nx.tmean(x, axis=1, keepdims=True))
    dx_time = nx.mul(gate, nx.sub(nx.matmul(attn, xc), xc))
    dx = nx.add(dx_space, dx_time)

    agg = nx.tmean(m_bar, axis=1)
    h_new = nx.add(h, nx.mlp_forward(_mlp(p, prefix + "feat", 2), nx.concat([h, agg], axis=-1)))
    return h_new, dx


class DenoiserModel:
    """Stack of equivariant layers behind a linear feature embedding."""

    def __init__(self, config: DenoiserConfig, params: nx.ParamSet | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = nx.ParamSet()
            rng = np.random.default_rng(seed)
            w, b = _init_linear(rng, config.in_dim, config.hidden)
            params.add("embed.W", w)
            params.add("embed.b", b)
            for k in range(config.n_layers):
                init_layer_params(params, f"layer{k}.", config, rng)
        self.params = params

    @property
    def depth(self) -> int:
        return self.config.n_layers

    def layer_names(self, k: int) -> list[str]:
        return [n for n in self.params.names() if n.startswith(f"layer{k}.")]

    def embed(self, p: Mapping[str, nx.Tensor], h_raw):
        return nx.linear(h_raw, p["embed.W"], p["embed.b"])

    def edge_time_embedding(self, batch: GraphBatch, tau, edges: np.ndarray | None = None) -> np.ndarray:
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (batch.n_graphs,))
        if np.any(tau < 0) or np.any(tau > self.config.max_tau):
            raise ValueError(f"diffusion step out of range [0, {self.config.max_tau}]")
        edges = batch.edges if edges is None else edges
        return time_embed(tau, self.config.time_dim)[batch.node_graph[edges[:, 0]]]

    def forward(self, batch: GraphBatch, x, tau, p: Mapping[str, nx.Tensor] | None = None, h_raw=None):
        """Predicted noise ``(N, T, 3)`` and final features for noised coords ``x``.

        ``tau`` is a scalar or one step per graph. ``h_raw`` overrides the
        batch's node features (coupling operators use this).
        """
        cfg = self.config
        p = self.params.tensors(track=False) if p is None else p
        temb = self.edge_time_embedding(batch, tau)
        h = self.embed(p, batch.node_features if h_raw is None else h_raw)
        x = nx.as_tensor(x)
        dx = None
        for k in range(cfg.n_layers):
            h, dx = layer_forward(p, f"layer{k}.", h, x, batch.edges, temb, cfg.attn_dim, cfg.frame_pe_dim)
            if k < cfg.n_layers - 1:
                x = nx.add(x, dx)
        if cfg.subspace:
            dx = graph_com_project(dx, batch.node_graph, batch.n_graphs)
        return dx, h


def denoiser_forward(model: DenoiserModel, traj: GeometricTrajectory, tau) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the denoiser on one trajectory; returns plain arrays."""
    batch = GraphBatch.from_trajectories([traj])
    eps, h = model.forward(batch, traj.coords, tau)
    return eps.data, h.data
