"""Equivariant adapters on a frozen denoiser.

Every adapter block runs ``couple -> trainable layer copy -> decouple ->
equivariant zero-convolution``. Block outputs are summed into a residual
score ``s`` that is added to the frozen base prediction. Zero-convolution
coefficients start at exactly zero, so ``base + s`` equals ``base`` at
initialisation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from equiada import numerics as nx
from equiada.backbone import DenoiserModel, init_layer_params, layer_forward
from equiada.batch import GraphBatch, graph_mean
from equiada.controls import Control, FrameControl, GlobalEncoder, control_kind, couple_batch, decouple
from equiada.diffusion import (
    ConditionalAnchor,
    NoiseSchedule,
    denoising_loss_cond,
    denoising_loss_uncond,
    draw_training_noise,
)

STRATEGIES = ("strided", "first", "last")
MODES = ("standard", "no_zero_conv", "no_trainable_copy")


def zero_conv_apply(coords, feats, phi_x, phi_h, node_graph: np.ndarray | None = None, n_graphs: int = 1):
    """``(phi_x * (x - xbar), phi_h * h)`` with ``xbar`` the per-graph mean over all rows."""
    coords = nx.as_tensor(coords)
    if coords.ndim == 2:
        coords = nx.reshape(coords, (coords.shape[0], 1, 3))
    if node_graph is None:
        node_graph = np.zeros(coords.shape[0], dtype=np.int64)
    mean = nx.take_rows(graph_mean(coords, node_graph, n_graphs), node_graph)
    centred = nx.sub(coords, nx.reshape(mean, (coords.shape[0], 1, 3)))
    return nx.mul(phi_x, centred), nx.mul(feats, phi_h)


def select_copy_layers(depth: int, budget: int, strategy: str = "strided") -> list[int]:
    """Layers of the base to copy: every ``depth // budget``-th, or the first/last ``budget``."""
    if not 1 <= budget <= depth:
        raise ValueError(f"adapter budget must be in 1..{depth}, got {budget}")
    if strategy == "strided":
        stride = depth // budget
        return list(range(0, depth, stride))[:budget]
    if strategy == "first":
        return list(range(budget))
    if strategy == "last":
        return list(range(depth - budget, depth))
    raise ValueError(f"unknown layer selection strategy {strategy!r}")


@dataclass(frozen=True)
class AdapterConfig:
    n_blocks: int = 3
    strategy: str = "strided"
    control: str = "frame"
    mode: str = "standard"
    global_dim: int = 0
    n_frames: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class AdapterStack:
    """Trainable adapter attached to a frozen :class:`DenoiserModel`.

    ``params`` holds only adapter weights (layer copies, zero-conv
    coefficients, per-block global encoders, the anchor for frame control);
    it never aliases the base ParamSet.
    """

    def __init__(self, base: DenoiserModel, config: AdapterConfig, params: nx.ParamSet | None = None, source_layers=None):
        if config.control not in ("global", "subgraph", "frame"):
            raise ValueError(f"unknown control kind {config.control!r}")
        if config.mode not in MODES:
            raise ValueError(f"unknown ablation mode {config.mode!r}")
        base.params.freeze()
        self.base = base
        self.config = config
        self.source_layers = (
            list(source_layers)
            if source_layers is not None
            else select_copy_layers(base.depth, config.n_blocks, config.strategy)
        )
        self.encoders = [GlobalEncoder(f"block{b}.encoder.") for b in range(len(self.source_layers))]
        self.anchor = ConditionalAnchor("anchor.") if config.control == "frame" else None
        if params is None:
            params = self._init_params()
        self.params = params

    def _init_params(self) -> nx.ParamSet:
        cfg, bcfg = self.config, self.base.config
        rng = np.random.default_rng(cfg.seed)
        params = nx.ParamSet()
        for b, src in enumerate(self.source_layers):
            prefix = f"block{b}.layer."
            if cfg.mode == "no_trainable_copy":
                init_layer_params(params, prefix, bcfg, rng)
            else:
                for name in self.base.layer_names(src):
                    params.add(prefix + name[len(f"layer{src}.") :], self.base.params[name].copy())
            if cfg.mode == "no_zero_conv":
                params.add(f"block{b}.zc.phi_x", rng.normal(0.0, 0.01, size=()))
                params.add(f"block{b}.zc.phi_h", rng.normal(0.0, 0.01, size=bcfg.hidden))
            else:
                params.add(f"block{b}.zc.phi_x", np.zeros(()))
                params.add(f"block{b}.zc.phi_h", np.zeros(bcfg.hidden))
            if cfg.control == "global":
                if cfg.global_dim < 1:
                    raise ValueError("global control needs global_dim >= 1")
                self.encoders[b].init_params(params, cfg.global_dim, bcfg.in_dim, seed=cfg.seed + 101 + b)
        if self.anchor is not None:
            self.anchor.init_params(params, bcfg.in_dim, cfg.n_frames, seed=cfg.seed + 7)
        return params

    @property
    def n_blocks(self) -> int:
        return len(self.source_layers)

    def forward(self, batch: GraphBatch, x, tau, controls: Sequence[Control], p=None, p_base=None):
        """Residual score ``s`` ``(N, T, 3)`` and the summed feature correction."""
        p = self.params.tensors(track=False) if p is None else p
        p_base = self.base.params.tensors(track=False) if p_base is None else p_base
        for c in controls:
            if control_kind(c) != self.config.control:
                raise ValueError(f"adapter bound to {self.config.control} control, got {control_kind(c)}")
        bcfg = self.base.config
        x = nx.as_tensor(x)
        score, feats = None, None
        for b in range(self.n_blocks):
            ci = couple_batch(batch, x, controls, h_raw=batch.node_features, encoder=self.encoders[b], p=p)
            h = self.base.embed(p_base, ci.h_raw)
            temb = self.base.edge_time_embedding(ci.batch, tau)
            h_out, dx = layer_forward(
                p, f"block{b}.layer.", h, ci.x, ci.batch.edges, temb, bcfg.attn_dim, bcfg.frame_pe_dim
            )
            dx = decouple(dx, ci.record)
            if ci.record.coupled_nodes != ci.record.node_index.size:
                h_out = nx.take_rows(h_out, ci.record.node_index)
            zx, zh = zero_conv_apply(
                dx, h_out, p[f"block{b}.zc.phi_x"], p[f"block{b}.zc.phi_h"], batch.node_graph, batch.n_graphs
            )
            score = zx if score is None else nx.add(score, zx)
            feats = zh if feats is None else nx.add(feats, zh)
        return score, feats

    def fused_predictor(
        self, controls: Sequence[Control], p=None, p_base=None, attached: bool = True, base_predict=None
    ):
        """``predict(batch, x, tau)`` returning ``base + s`` (or ``base`` when detached).

        ``base_predict`` replaces the plain base network, e.g. by a
        conditional base that consumes its own condition frames.
        """
        p_base = self.base.params.tensors(track=False) if p_base is None else p_base

        def predict(batch, x, tau):
            if base_predict is not None:
                eps = base_predict(batch, x, tau)
            else:
                eps, _ = self.base.forward(batch, x, tau, p=p_base)
            if not attached:
                return eps
            s, _ = self.forward(batch, x, tau, controls, p=p, p_base=p_base)
            return nx.add(eps, s)

        return predict

    def anchor_for(self, batch: GraphBatch, controls: Sequence[FrameControl], p=None):
        p = self.params.tensors(track=False) if p is None else p
        x_c = np.empty((batch.n_nodes, controls[0].frames.shape[1], 3))
        order = np.argsort(batch.node_graph, kind="stable")
        x_c[order] = np.concatenate([c.frames for c in controls])
        return self.anchor(p, batch.node_features, x_c)


def adapter_forward(stack: AdapterStack, batch: GraphBatch, x, tau, controls) -> np.ndarray:
    return stack.forward(batch, x, tau, controls)[0].data


def fused_score(stack: AdapterStack, batch: GraphBatch, x, tau, controls) -> np.ndarray:
    return stack.fused_predictor(controls)(batch, nx.as_tensor(x), tau).data


def ablation_mode(stack: AdapterStack, mode: str) -> AdapterStack:
    """A fresh stack on the same base, built under ablation ``mode``."""
    if mode not in MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    cfg = AdapterConfig(**{**stack.config.to_dict(), "mode": mode})
    return AdapterStack(stack.base, cfg, source_layers=stack.source_layers)


# ------------------------------------------------------------------ fine-tuning


def finetune_loss(
    stack: AdapterStack,
    batch: GraphBatch,
    controls: Sequence[Control],
    sched: NoiseSchedule,
    tau,
    eps,
    p=None,
    attached: bool = True,
    base_predict=None,
) -> nx.Tensor:
    """Fused denoising loss for given steps and noise.

    Frame control trains on the anchored process with the anchor built from
    the control frames; other controls use the centred process.
    """
    p = stack.params.tensors() if p is None else p
    p_base = stack.base.params.tensors(track=False)
    predict = stack.fused_predictor(controls, p=p, p_base=p_base, attached=attached, base_predict=base_predict)
    if stack.config.control == "frame":
        x_r = stack.anchor_for(batch, controls, p=p)
        return denoising_loss_cond(predict, batch, x_r, tau, eps, sched)
    return denoising_loss_uncond(predict, batch, tau, eps, sched)


def finetune_noise(stack: AdapterStack, batch: GraphBatch, sched: NoiseSchedule, seed):
    return draw_training_noise(batch, sched, seed, subspace=stack.config.control != "frame")


def finetune_step(
    stack: AdapterStack,
    batch: GraphBatch,
    controls: Sequence[Control],
    sched: NoiseSchedule,
    opt: nx.OptimizerState,
    seed,
    base_predict=None,
) -> float:
    """One Adam step on the adapter; returns the batch loss before the update."""
    if stack.base.params.trainable_names():
        raise nx.ContractError("base parameters must be frozen during fine-tuning")
    tau, eps = finetune_noise(stack, batch, sched, seed)
    p = stack.params.tensors()
    loss = finetune_loss(stack, batch, controls, sched, tau, eps, p=p, base_predict=base_predict)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite fine-tune loss at optimizer step {opt.step}")
    grads = nx.backward(loss, p)
    nx.adam_step(stack.params, grads, opt)
    return value


def gradient_norms(stack: AdapterStack, batch, controls, sched, seed) -> dict[str, float]:
    """L2 norm of the fine-tune gradient per parameter group (copy, zero-conv, ...)."""
    tau, eps = finetune_noise(stack, batch, sched, seed)
    p = stack.params.tensors()
    grads = nx.backward(finetune_loss(stack, batch, controls, sched, tau, eps, p=p), p)
    groups: dict[str, float] = {}
    for name, g in grads.items():
        key = "copy" if ".layer." in name else "zero_conv" if ".zc." in name else name.split(".")[0]
        groups[key] = groups.get(key, 0.0) + float(np.sum(g * g))
    return {k: float(np.sqrt(v)) for k, v in groups.items()}
