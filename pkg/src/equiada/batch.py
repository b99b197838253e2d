"""Disjoint-union batching of trajectories and per-graph tensor reductions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from equiada import numerics as nx
from equiada.geometry import GeometricTrajectory


@dataclass(frozen=True)
class GraphBatch:
    """Several trajectories with equal frame count stacked as one graph.

    ``node_graph[i]`` is the graph id of node ``i``; edges use global node ids.
    """

    node_features: np.ndarray  # (N_tot, H)
    coords: np.ndarray  # (N_tot, T, 3)
    edges: np.ndarray  # (E, 2)
    node_graph: np.ndarray  # (N_tot,)
    n_graphs: int

    @classmethod
    def from_trajectories(cls, trajs: Sequence[GeometricTrajectory]) -> "GraphBatch":
        if not trajs:
            raise ValueError("empty batch")
        frames = {t.n_frames for t in trajs}
        if len(frames) != 1:
            raise ValueError(f"all trajectories in a batch need the same frame count, got {sorted(frames)}")
        offsets = np.cumsum([0] + [t.n_nodes for t in trajs[:-1]])
        return cls(
            node_features=np.concatenate([t.node_features for t in trajs]),
            coords=np.concatenate([t.coords for t in trajs]),
            edges=np.concatenate([t.edges + o for t, o in zip(trajs, offsets)]).reshape(-1, 2),
            node_graph=np.concatenate([np.full(t.n_nodes, g) for g, t in enumerate(trajs)]).astype(np.int64),
            n_graphs=len(trajs),
        )

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coords.shape[1]

    def with_coords(self, coords: np.ndarray) -> "GraphBatch":
        return GraphBatch(self.node_features, np.asarray(coords, dtype=np.float64), self.edges, self.node_graph, self.n_graphs)

    def nodes_per_graph(self) -> np.ndarray:
        return np.bincount(self.node_graph, minlength=self.n_graphs)

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        """Cut a node-indexed array back into per-graph pieces."""
        bounds = np.cumsum(self.nodes_per_graph())[:-1]
        order = np.argsort(self.node_graph, kind="stable")
        return np.split(np.asarray(values)[order], bounds)

    def trajectories(self) -> list[GeometricTrajectory]:
        out = []
        for g in range(self.n_graphs):
            idx = np.flatnonzero(self.node_graph == g)
            remap = -np.ones(self.n_nodes, dtype=np.int64)
            remap[idx] = np.arange(idx.size)
            mask = np.isin(self.edges[:, 0], idx)
            out.append(GeometricTrajectory(self.node_features[idx], self.coords[idx], remap[self.edges[mask]]))
        return out


def graph_mean(values, node_graph: np.ndarray, n_graphs: int):
    """Per-graph mean of ``(N_tot, T, 3)`` values over all (node, frame) rows -> ``(G, 3)``."""
    t = nx.as_tensor(values)
    counts = np.bincount(node_graph, minlength=n_graphs).astype(np.float64) * t.shape[1]
    per_node = nx.tsum(t, axis=1)
    sums = nx.segment_sum(per_node, node_graph, n_graphs)
    return nx.div(sums, np.maximum(counts, 1.0)[:, None])


def graph_com_project(values, node_graph: np.ndarray, n_graphs: int):
    """Subtract each graph's joint (node, frame) mean; works on tensors and arrays."""
    t = nx.as_tensor(values)
    mean = graph_mean(t, node_graph, n_graphs)
    shift = nx.take_rows(mean, node_graph)
    return nx.sub(t, nx.reshape(shift, (t.shape[0], 1, 3)))


def graph_com_project_np(values: np.ndarray, node_graph: np.ndarray, n_graphs: int) -> np.ndarray:
    return graph_com_project(values, node_graph, n_graphs).data
