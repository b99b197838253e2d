"""Geometric controls and their coupling / decoupling operators.

Three control kinds are supported:

* :class:`GlobalControl` - a vector lifted to node-feature space and added
  to every node's features.
* :class:`SubgraphControl` - extra nodes and edges merged into the input
  graph (a supergraph); the output is restricted back to the input nodes.
* :class:`FrameControl` - extra frames concatenated to the trajectory; the
  output keeps only the input frames.

:func:`couple_batch` works on tape tensors so encoder weights can be trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from equiada import numerics as nx
from equiada.batch import GraphBatch
from equiada.geometry import GeometricTrajectory, RigidMotion


@dataclass(frozen=True)
class GlobalControl:
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64).reshape(-1))

    def moved(self, g: RigidMotion) -> "GlobalControl":
        return self


@dataclass(frozen=True)
class SubgraphControl:
    """Control graph plus optional ``(input_node, control_node)`` cross edges.

    With ``cross_edges=None`` every control node is linked to every input
    node. Edges are added in both directions.
    """

    graph: GeometricTrajectory
    cross_edges: np.ndarray | None = None

    def moved(self, g: RigidMotion) -> "SubgraphControl":
        return SubgraphControl(self.graph.with_coords(g.apply(self.graph.coords)), self.cross_edges)


@dataclass(frozen=True)
class FrameControl:
    frames: np.ndarray  # (N, T_ctrl, 3)
    position: str = "prefix"

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 3:
            raise ValueError(f"frame control must be (N, T_ctrl, 3), got {f.shape}")
        if self.position not in ("prefix", "suffix"):
            raise ValueError(f"position must be 'prefix' or 'suffix', got {self.position!r}")
        object.__setattr__(self, "frames", f)

    def moved(self, g: RigidMotion) -> "FrameControl":
        return FrameControl(g.apply(self.frames), self.position)


Control = Union[GlobalControl, SubgraphControl, FrameControl]

KINDS = {GlobalControl: "global", SubgraphControl: "subgraph", FrameControl: "frame"}


def control_kind(control: Control) -> str:
    try:
        return KINDS[type(control)]
    except KeyError:
        raise TypeError(f"not a control: {type(control).__name__}") from None


@dataclass(frozen=True)
class CouplingRecord:
    kind: str
    node_index: np.ndarray
    frame_index: slice
    coupled_nodes: int
    coupled_frames: int


@dataclass(frozen=True)
class CoupledInput:
    batch: GraphBatch
    h_raw: nx.Tensor
    x: nx.Tensor
    record: CouplingRecord = field(repr=False)


# ------------------------------------------------------------------ global encoder


class GlobalEncoder:
    """Two-layer perceptron lifting a K-vector to node-feature space.

    The output layer starts at zero, so coupling is the identity until trained.
    """

    def __init__(self, prefix: str = "encoder."):
        self.prefix = prefix

    def init_params(self, params: nx.ParamSet, k: int, out_dim: int, hidden: int = 32, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        params.add(self.prefix + "0.W", rng.uniform(-1, 1, (k, hidden)) / np.sqrt(k))
        params.add(self.prefix + "0.b", np.zeros(hidden))
        params.add(self.prefix + "1.W", np.zeros((hidden, out_dim)))
        params.add(self.prefix + "1.b", np.zeros(out_dim))

    def __call__(self, p: Mapping[str, nx.Tensor], vectors):
        layers = [(p[self.prefix + f"{k}.W"], p[self.prefix + f"{k}.b"]) for k in range(2)]
        return nx.mlp_forward(layers, vectors)


# ------------------------------------------------------------------ coupling


def couple_batch(
    batch: GraphBatch,
    x,
    controls: Sequence[Control],
    h_raw=None,
    encoder: GlobalEncoder | None = None,
    p: Mapping[str, nx.Tensor] | None = None,
) -> CoupledInput:
    """Apply the coupling operator graph-by-graph; one control per graph, all of one kind."""
    x = nx.as_tensor(x)
    h = nx.as_tensor(batch.node_features if h_raw is None else h_raw)
    if len(controls) != batch.n_graphs:
        raise ValueError(f"need one control per graph ({batch.n_graphs}), got {len(controls)}")
    kinds = {control_kind(c) for c in controls}
    if len(kinds) != 1:
        raise ValueError(f"mixed control kinds in one batch: {sorted(kinds)}")
    kind = kinds.pop()
    n, t = batch.n_nodes, batch.n_frames

    if kind == "global":
        if encoder is None or p is None:
            raise ValueError("global control needs an encoder and its parameters")
        vecs = np.stack([c.vector for c in controls])
        lifted = encoder(p, vecs)
        if lifted.shape[1] != h.shape[1]:
            raise ValueError(f"global control: encoder output {lifted.shape[1]} != feature dim {h.shape[1]}")
        h = nx.add(h, nx.take_rows(lifted, batch.node_graph))
        record = CouplingRecord(kind, np.arange(n), slice(0, t), n, t)
        return CoupledInput(batch, h, x, record)

    if kind == "frame":
        frames = []
        for g, c in enumerate(controls):
            count = int(np.sum(batch.node_graph == g))
            if c.frames.shape[0] != count:
                raise ValueError(f"frame control: {c.frames.shape[0]} control nodes != {count} input nodes")
            frames.append(c.frames)
        t_ctrl = {f.shape[1] for f in frames}
        positions = {c.position for c in controls}
        if len(t_ctrl) != 1 or len(positions) != 1:
            raise ValueError("frame control: all graphs in a batch need equal length and position")
        t_ctrl, position = t_ctrl.pop(), positions.pop()
        order = np.argsort(batch.node_graph, kind="stable")
        stacked = np.empty((n, t_ctrl, 3))
        stacked[order] = np.concatenate(frames)
        if position == "prefix":
            xc = nx.concat([stacked, x], axis=1)
            keep = slice(t_ctrl, t_ctrl + t)
        else:
            xc = nx.concat([x, stacked], axis=1)
            keep = slice(0, t)
        coupled = GraphBatch(batch.node_features, xc.data, batch.edges, batch.node_graph, batch.n_graphs)
        record = CouplingRecord(kind, np.arange(n), keep, n, t + t_ctrl)
        return CoupledInput(coupled, h, xc, record)

    # subgraph: control nodes are appended after all input nodes
    feats, coords, edges, graph_ids = [], [], [], []
    offset = n
    for g, c in enumerate(controls):
        sub = c.graph
        if sub.node_features.shape[1] != h.shape[1]:
            raise ValueError(f"subgraph control: feature dim {sub.node_features.shape[1]} != {h.shape[1]}")
        if sub.n_frames not in (1, t):
            raise ValueError(f"subgraph control: {sub.n_frames} frames, expected 1 or {t}")
        members = np.flatnonzero(batch.node_graph == g)
        m = sub.n_nodes
        feats.append(sub.node_features)
        coords.append(np.broadcast_to(sub.coords, (m, t, 3)))
        graph_ids.append(np.full(m, g))
        if m:
            edges.append(sub.edges + offset)
            if c.cross_edges is None:
                ii, jj = np.meshgrid(members, np.arange(m) + offset, indexing="ij")
                cross = np.stack([ii.ravel(), jj.ravel()], axis=1)
            else:
                ce = np.asarray(c.cross_edges, dtype=np.int64).reshape(-1, 2)
                if ce.size and (ce[:, 0].max() >= members.size or ce[:, 1].max() >= m or ce.min() < 0):
                    raise ValueError("subgraph control: cross edge index out of range")
                cross = np.stack([members[ce[:, 0]], ce[:, 1] + offset], axis=1)
            edges.append(cross)
            edges.append(cross[:, ::-1])
        offset += m
    if offset == n:
        record = CouplingRecord(kind, np.arange(n), slice(0, t), n, t)
        return CoupledInput(batch, h, x, record)
    extra_feats = np.concatenate(feats)
    extra_coords = np.concatenate(coords)
    hc = nx.concat([h, extra_feats], axis=0)
    xc = nx.concat([x, extra_coords], axis=0)
    coupled = GraphBatch(
        node_features=np.concatenate([batch.node_features, extra_feats]),
        coords=xc.data,
        edges=np.concatenate([batch.edges] + edges).astype(np.int64),
        node_graph=np.concatenate([batch.node_graph] + graph_ids).astype(np.int64),
        n_graphs=batch.n_graphs,
    )
    record = CouplingRecord(kind, np.arange(n), slice(0, t), offset, t)
    return CoupledInput(coupled, hc, xc, record)


def decouple(output, record: CouplingRecord):
    """Restrict a coupled ``(N', T', ...)`` output to the input nodes and frames."""
    out = nx.as_tensor(output)
    if out.shape[0] != record.coupled_nodes or (out.ndim > 2 and out.shape[1] != record.coupled_frames):
        raise ValueError(
            f"{record.kind} record expects ({record.coupled_nodes}, {record.coupled_frames}, ...), got {out.shape}"
        )
    if record.kind == "global":
        return out
    if record.coupled_nodes != record.node_index.size:
        out = nx.take_rows(out, record.node_index)
    if out.ndim > 2 and record.frame_index != slice(0, record.coupled_frames):
        out = out[:, record.frame_index]
    return out


def couple(
    traj: GeometricTrajectory,
    control: Control,
    encoder: GlobalEncoder | None = None,
    params: nx.ParamSet | None = None,
) -> tuple[GeometricTrajectory, CouplingRecord]:
    """Single-trajectory coupling returning plain arrays."""
    batch = GraphBatch.from_trajectories([traj])
    p = params.tensors(track=False) if params is not None else None
    ci = couple_batch(batch, traj.coords, [control], encoder=encoder, p=p)
    return GeometricTrajectory(ci.h_raw.data, ci.x.data, ci.batch.edges), ci.record


# ------------------------------------------------------------------ coupled-control audit


@dataclass
class AuditReport:
    max_deviation: float
    deviations: list[float]
    tol: float
    failing_seed: int | None

    @property
    def passed(self) -> bool:
        return self.failing_seed is None

    def __str__(self) -> str:
        status = "PASS" if self.passed else f"FAIL (seed {self.failing_seed})"
        return f"{status}: max deviation {self.max_deviation:.3e} over {len(self.deviations)} trials (tol {self.tol:g})"


def composed_output(denoiser, traj: GeometricTrajectory, control: Control, tau, encoder=None, p=None) -> np.ndarray:
    """``g ∘ ε ∘ f`` evaluated on one trajectory (``g`` here is decoupling)."""
    batch = GraphBatch.from_trajectories([traj])
    ci = couple_batch(batch, traj.coords, [control], encoder=encoder, p=p)
    eps, _ = denoiser.forward(ci.batch, ci.x, tau, h_raw=ci.h_raw)
    return decouple(eps, ci.record).data


def audit_map(fn, traj: GeometricTrajectory, control: Control | None, trials: int = 20, tol: float = 1e-8, seed: int = 0) -> AuditReport:
    """Check ``fn(g.traj, g.control) == R fn(traj, control)`` over random rigid motions ``g``.

    ``fn`` returns a displacement-like ``(N, T, 3)`` array. Deviation is the
    max abs difference relative to the largest output entry. ``control`` may
    be ``None`` for maps that take no control.
    """
    devs, failing = [], None
    for k in range(trials):
        trial_seed = seed + k
        g = RigidMotion.random(trial_seed)
        base = fn(traj, control)
        moved = fn(traj.with_coords(g.apply(traj.coords)), None if control is None else control.moved(g))
        scale = max(np.abs(base).max(initial=0.0), 1e-12)
        dev = float(np.abs(g.rotate(base) - moved).max(initial=0.0) / scale)
        devs.append(dev)
        if failing is None and not dev <= tol:
            failing = trial_seed
    return AuditReport(max(devs, default=0.0), devs, tol, failing)


def audit_coupled(
    denoiser,
    traj: GeometricTrajectory,
    control: Control,
    trials: int = 20,
    tol: float = 1e-8,
    tau=1,
    encoder: GlobalEncoder | None = None,
    params: nx.ParamSet | None = None,
    seed: int = 0,
) -> AuditReport:
    """Check that decouple ∘ denoiser ∘ couple commutes with random rigid motions.

    The motion is applied to the trajectory and to the control's geometric
    content; global vectors are left alone.
    """
    p = params.tensors(track=False) if params is not None else None
    return audit_map(
        lambda t, c: composed_output(denoiser, t, c, tau, encoder, p), traj, control, trials, tol, seed
    )
