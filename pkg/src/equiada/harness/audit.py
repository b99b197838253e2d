"""Randomized equivariance audits for base denoisers, coupled controls and fused adapters."""

from __future__ import annotations

import numpy as np

from equiada import numerics as nx
from equiada.adapter import AdapterStack
from equiada.backbone import DenoiserModel
from equiada.batch import GraphBatch
from equiada.controls import (
    AuditReport,
    FrameControl,
    GlobalControl,
    GlobalEncoder,
    SubgraphControl,
    audit_map,
    audit_coupled,
)
from equiada.diffusion import ConditionalDenoiser
from equiada.geometry import GeometricTrajectory, fully_connected_edges
from equiada.harness.config import RunConfig
from equiada.harness.training import base_network, base_predictor


def random_trajectory(rng: np.random.Generator, in_dim: int, n_frames: int, n_nodes: int | None = None):
    n = int(rng.integers(2, 7)) if n_nodes is None else n_nodes
    return GeometricTrajectory(
        rng.standard_normal((n, in_dim)), rng.standard_normal((n, n_frames, 3)), fully_connected_edges(n)
    )


def merge_reports(reports: list[AuditReport], tol: float) -> AuditReport:
    devs = [d for r in reports for d in r.deviations]
    failing = next((r.failing_seed for r in reports if not r.passed), None)
    return AuditReport(max(devs, default=0.0), devs, tol, failing)


def _random_tau(rng, cfg) -> int:
    return int(rng.integers(1, cfg.max_tau + 1))


def audit_denoiser(model, trials: int = 50, tol: float = 1e-8, seed: int = 0, n_frames: int = 4) -> AuditReport:
    """Rigid-motion equivariance of the base noise prediction over random graphs, motions and steps.

    A conditional base is audited together with its condition frames, which
    move with the trajectory.
    """
    rng = np.random.default_rng([seed, 11])
    cfg = model.config
    reports = []
    for k in range(trials):
        tau = _random_tau(rng, cfg)
        if isinstance(model, ConditionalDenoiser):
            t_c = model.cond_frames
            traj = random_trajectory(rng, cfg.in_dim, t_c + n_frames)

            def fn(tr, _, tau=tau, t_c=t_c):
                target = tr.with_coords(tr.coords[:, t_c:])
                batch = GraphBatch.from_trajectories([target])
                return model.predictor(tr.coords[:, :t_c])(batch, nx.as_tensor(target.coords), tau).data

        else:
            traj = random_trajectory(rng, cfg.in_dim, n_frames)

            def fn(tr, _, tau=tau):
                return model.forward(GraphBatch.from_trajectories([tr]), tr.coords, tau)[0].data

        reports.append(audit_map(fn, traj, None, trials=1, tol=tol, seed=seed + k))
    return merge_reports(reports, tol)


def random_control(kind: str, traj: GeometricTrajectory, rng: np.random.Generator, global_dim: int = 4):
    if kind == "global":
        return GlobalControl(np.eye(global_dim)[rng.integers(global_dim)])
    if kind == "subgraph":
        m = int(rng.integers(1, 4))
        frames = int(rng.choice([1, traj.n_frames]))
        sub = random_trajectory(rng, traj.node_features.shape[1], frames, m)
        return SubgraphControl(sub)
    if kind == "frame":
        return FrameControl(rng.standard_normal((traj.n_nodes, int(rng.integers(1, 4)), 3)))
    raise ValueError(f"unknown control kind {kind!r}")


def random_encoder(in_dim: int, global_dim: int, seed: int) -> tuple[GlobalEncoder, nx.ParamSet]:
    """A global encoder with non-zero output weights, so the coupling is not trivially the identity."""
    enc = GlobalEncoder()
    params = nx.ParamSet()
    enc.init_params(params, global_dim, in_dim, seed=seed)
    params.assign("encoder.1.W", np.random.default_rng(seed).standard_normal(params["encoder.1.W"].shape))
    return enc, params


def audit_controls(
    net: DenoiserModel, kinds=("global", "subgraph", "frame"), trials: int = 20, tol: float = 1e-8, seed: int = 0
) -> dict[str, AuditReport]:
    """decouple ∘ denoiser ∘ couple equivariance for every control kind, on fresh random inputs."""
    out = {}
    for kind in kinds:
        rng = np.random.default_rng([seed, 13, len(kind)])
        enc, params = random_encoder(net.config.in_dim, 4, seed) if kind == "global" else (None, None)
        traj = random_trajectory(rng, net.config.in_dim, 4)
        control = random_control(kind, traj, rng)
        tau = _random_tau(rng, net.config)
        out[kind] = audit_coupled(net, traj, control, trials, tol, tau, enc, params, seed)
    return out


def audit_fused(
    stack: AdapterStack, base_model, cfg: RunConfig, trials: int = 20, tol: float = 1e-8, seed: int = 0
) -> AuditReport:
    """Equivariance of the fused score ``base + adapter`` under the adapter's control kind."""
    cond_base = isinstance(base_model, ConditionalDenoiser)
    kind = stack.config.control
    if kind == "frame":
        pre = cfg.finetune_cond_frames
    else:
        pre = base_model.cond_frames if cond_base else 0
    rng = np.random.default_rng([seed, 17])
    reports = []
    for k in range(trials):
        tau = _random_tau(rng, stack.base.config)
        traj = random_trajectory(rng, stack.base.config.in_dim, pre + cfg.pred_frames)
        control = GlobalControl(np.eye(stack.config.global_dim)[0]) if kind == "global" else None

        def fn(tr, ctrl, tau=tau):
            target = tr.with_coords(tr.coords[:, pre:])
            cond = tr.coords[:, :pre]
            batch = GraphBatch.from_trajectories([target])
            bp = base_predictor(base_model, cond) if cond_base else None
            c = FrameControl(cond) if kind == "frame" else ctrl
            return stack.fused_predictor([c], base_predict=bp)(batch, nx.as_tensor(target.coords), tau).data

        reports.append(audit_map(fn, traj, control, trials=1, tol=tol, seed=seed + k))
    return merge_reports(reports, tol)


def full_audit(base_model, cfg: RunConfig, stack: AdapterStack | None = None, trials: int = 50, tol: float = 1e-8, seed: int = 0):
    """All audits as ``{name: AuditReport}``."""
    out = {"denoiser": audit_denoiser(base_model, trials, tol, seed)}
    for kind, rep in audit_controls(base_network(base_model), trials=trials, tol=tol, seed=seed).items():
        out[f"coupled_{kind}"] = rep
    if stack is not None:
        out[f"fused_{stack.config.control}"] = audit_fused(stack, base_model, cfg, trials, tol, seed)
    return out
