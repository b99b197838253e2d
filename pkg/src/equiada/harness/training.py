"""Pretraining, adapter fine-tuning and evaluation loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from equiada import numerics as nx
from equiada.adapter import AdapterConfig, AdapterStack, finetune_loss, finetune_noise, finetune_step
from equiada.backbone import DenoiserModel
from equiada.batch import GraphBatch, graph_com_project_np
from equiada.controls import FrameControl, GlobalControl
from equiada.diffusion import ConditionalDenoiser, draw_training_noise, denoising_loss_cond, denoising_loss_uncond
from equiada.diffusion import sample_cond, sample_uncond
from equiada.geometry import GeometricTrajectory, fully_connected_edges
from equiada.harness.checkpoint import Checkpoint, params_hash
from equiada.harness.config import ConfigError, RunConfig
from equiada.harness.metrics import ade, fde, marginal_score
from equiada.simdata import charge_features

log = logging.getLogger(__name__)

VAL_NOISE_SEED = 10_007


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, last_good: nx.ParamSet):
        super().__init__(f"non-finite loss at step {step}; last good parameters kept")
        self.step = step
        self.last_good = last_good


# ------------------------------------------------------------------ data windows


@dataclass
class TaskData:
    """Targets as a batch plus the condition frames preceding them."""

    batch: GraphBatch
    cond: np.ndarray  # (N_tot, T_c, 3)

    def controls(self) -> list[FrameControl]:
        return [FrameControl(f) for f in self.batch.split(self.cond)]

    def subset(self, idx: Sequence[int]) -> "TaskData":
        trajs = self.batch.trajectories()
        conds = self.batch.split(self.cond)
        return make_task([trajs[i] for i in idx], [conds[i] for i in idx])


def make_task(targets: Sequence[GeometricTrajectory], conds: Sequence[np.ndarray]) -> TaskData:
    return TaskData(GraphBatch.from_trajectories(targets), np.concatenate(conds))


def task_windows(trajs: Sequence[GeometricTrajectory], cond_frames: int, pred_frames: int) -> TaskData:
    need = cond_frames + pred_frames
    targets, conds = [], []
    for t in trajs:
        if t.n_frames < need:
            raise ConfigError(f"records have {t.n_frames} frames, need {need}")
        targets.append(t.with_coords(t.coords[:, cond_frames:need]))
        conds.append(t.coords[:, :cond_frames])
    return make_task(targets, conds)


class Batcher:
    """Random minibatches of pre-cut task windows."""

    def __init__(self, task: TaskData, batch_size: int, rng: np.random.Generator):
        self.trajs = task.batch.trajectories()
        self.conds = task.batch.split(task.cond)
        self.batch_size = min(batch_size, len(self.trajs))
        self.rng = rng

    def __call__(self) -> TaskData:
        idx = self.rng.choice(len(self.trajs), self.batch_size, replace=False)
        return make_task([self.trajs[i] for i in idx], [self.conds[i] for i in idx])


# ------------------------------------------------------------------ base models


def build_base(cfg: RunConfig, params: nx.ParamSet | None = None):
    dcfg = cfg.denoiser_config()
    if cfg.task == "uncond":
        return DenoiserModel(dcfg, params=params, seed=cfg.seed)
    return ConditionalDenoiser(dcfg, cfg.pred_frames, cfg.cond_frames, seed=cfg.seed, params=params)


def base_network(model) -> DenoiserModel:
    return model.net if isinstance(model, ConditionalDenoiser) else model


def base_predictor(model, cond: np.ndarray | None, p=None):
    """Predictor for the base model; conditional bases use the last frames of ``cond``."""
    if isinstance(model, ConditionalDenoiser):
        return model.predictor(cond[:, -model.cond_frames :], p)
    p = model.params.tensors(track=False) if p is None else p
    return lambda b, x, tau: model.forward(b, x, tau, p=p)[0]


def pretrain_loss(model, task: TaskData, sched, tau, eps, p) -> nx.Tensor:
    if isinstance(model, ConditionalDenoiser):
        cond = task.cond[:, -model.cond_frames :]
        x_r = model.anchor_for(task.batch, cond, p)
        return denoising_loss_cond(model.predictor(cond, p), task.batch, x_r, tau, eps, sched)
    return denoising_loss_uncond(base_predictor(model, None, p), task.batch, tau, eps, sched)


def _noise(model, task: TaskData, sched, seed):
    return draw_training_noise(task.batch, sched, seed, subspace=not isinstance(model, ConditionalDenoiser))


@dataclass
class TrainResult:
    params: nx.ParamSet
    loss_history: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    initial_val: float = float("nan")
    best_val: float = float("nan")
    best_step: int = 0

    @property
    def final_val(self) -> float:
        return self.val_history[-1][1] if self.val_history else self.initial_val


def _train_loop(cfg, params: nx.ParamSet, loss_at, val_loss, n_train: int, sample_batch) -> TrainResult:
    """Shared Adam loop with periodic validation and best-by-validation selection."""
    opt = nx.OptimizerState(lr=cfg.lr)
    noise_rng = np.random.default_rng([cfg.seed, 2])
    result = TrainResult(params.copy())
    result.initial_val = result.best_val = val_loss(params)
    last_good = params.copy()
    for step in range(1, cfg.steps + 1):
        task = sample_batch()
        p = params.tensors()
        loss = loss_at(task, p, noise_rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingAborted(step, last_good)
        nx.adam_step(params, nx.backward(loss, p), opt)
        result.loss_history.append(value)
        if step % cfg.val_every == 0 or step == cfg.steps:
            v = val_loss(params)
            result.val_history.append((step, v))
            last_good = params.copy()
            if v < result.best_val:
                result.best_val, result.best_step = v, step
                result.params = params.copy()
            log.info("step %d train %.4f val %.4f", step, value, v)
    return result


def pretrain(cfg: RunConfig, train: Sequence[GeometricTrajectory], val: Sequence[GeometricTrajectory]):
    """Train a base denoiser; returns ``(model, TrainResult)`` with the best-validation weights loaded."""
    model = build_base(cfg)
    sched = cfg.schedule()
    train_task = task_windows(train, cfg.cond_frames, cfg.pred_frames)
    val_task = task_windows(val[: cfg.val_size], cfg.cond_frames, cfg.pred_frames)
    val_tau, val_eps = _noise(model, val_task, sched, VAL_NOISE_SEED)

    def val_loss(params):
        return float(pretrain_loss(model, val_task, sched, val_tau, val_eps, params.tensors(track=False)).data)

    def loss_at(task, p, rng):
        tau, eps = _noise(model, task, sched, rng)
        return pretrain_loss(model, task, sched, tau, eps, p)

    batcher = Batcher(train_task, cfg.batch_size, np.random.default_rng([cfg.seed, 1]))
    result = _train_loop(cfg, model.params, loss_at, val_loss, len(train), batcher)
    return build_base(cfg, params=result.params), result


def base_from_checkpoint(ckpt: Checkpoint):
    cfg = RunConfig(**ckpt.manifest["config"])
    model = build_base(cfg, params=ckpt.params)
    model.params.freeze()
    return model, cfg


# ------------------------------------------------------------------ fine-tuning


def global_controls(batch: GraphBatch, k: int) -> list[GlobalControl]:
    """One-hot class per system: the number of positively charged particles."""
    out = []
    for feats in batch.split(batch.node_features):
        cls = int(feats[:, 1].sum())
        out.append(GlobalControl(np.eye(k)[min(cls, k - 1)]))
    return out


def finetune_controls(stack: AdapterStack, task: TaskData):
    if stack.config.control == "frame":
        return task.controls()
    if stack.config.control == "global":
        return global_controls(task.batch, stack.config.global_dim)
    raise ConfigError("subgraph fine-tuning needs control subgraphs, which the particle data does not provide")


def make_stack(base_model, cfg: RunConfig) -> AdapterStack:
    acfg = AdapterConfig(
        n_blocks=cfg.adapter_blocks,
        strategy=cfg.adapter_strategy,
        control=cfg.control,
        mode=cfg.ablation,
        global_dim=cfg.n_particles + 1 if cfg.control == "global" else 0,
        n_frames=cfg.pred_frames,
        seed=cfg.seed,
    )
    return AdapterStack(base_network(base_model), acfg)


def finetune(base_model, cfg: RunConfig, train, val):
    """Train an adapter on the frame-control (or global-control) task; the base stays frozen."""
    if base_model.params.trainable_names():
        raise nx.ContractError("base parameters must be frozen during fine-tuning")
    stack = make_stack(base_model, cfg)
    base_hash = params_hash(stack.base.params)
    sched = cfg.schedule()
    t_c = cfg.finetune_cond_frames
    train_task = task_windows(train, t_c, cfg.pred_frames)
    val_task = task_windows(val[: cfg.val_size], t_c, cfg.pred_frames)
    val_controls = finetune_controls(stack, val_task)
    val_tau, val_eps = finetune_noise(stack, val_task.batch, sched, VAL_NOISE_SEED)
    cond_base = isinstance(base_model, ConditionalDenoiser)

    def bp(task):
        return base_predictor(base_model, task.cond) if cond_base else None

    def val_loss(params):
        p = params.tensors(track=False)
        return float(
            finetune_loss(stack, val_task.batch, val_controls, sched, val_tau, val_eps, p=p, base_predict=bp(val_task)).data
        )

    def loss_at(task, p, rng):
        tau, eps = finetune_noise(stack, task.batch, sched, rng)
        return finetune_loss(stack, task.batch, finetune_controls(stack, task), sched, tau, eps, p=p, base_predict=bp(task))

    batcher = Batcher(train_task, cfg.batch_size, np.random.default_rng([cfg.seed, 3]))
    result = _train_loop(cfg, stack.params, loss_at, val_loss, len(train), batcher)
    stack.params = result.params
    if params_hash(stack.base.params) != base_hash:
        raise nx.ContractError("base parameters changed during fine-tuning")
    return stack, result, base_hash


# ------------------------------------------------------------------ evaluation


def _mean(values) -> float:
    return float(np.mean(values))


def _split_samples(batch: GraphBatch, x: np.ndarray) -> np.ndarray:
    return np.stack(batch.split(x))


def evaluate(
    base_model, cfg: RunConfig, test, stack: AdapterStack | None = None, k: int | None = None, first_sample: int = 0
) -> dict[str, float]:
    """Sampling-based metrics on the pretrain task and, with an adapter, the fine-tune task.

    Sample ``j`` of every record uses seed ``(cfg.seed, j, group)`` so a
    K-sample report is the mean of K single-sample reports taken with
    ``first_sample = 0 .. K-1``.
    """
    test = list(test)[: cfg.eval_records]
    if not test:
        raise ValueError("empty test set")
    k = cfg.samples_k if k is None else k
    sched = cfg.schedule()
    report: dict[str, float] = {}
    cond_base = isinstance(base_model, ConditionalDenoiser)
    net = base_network(base_model)

    pre = task_windows(test, cfg.cond_frames, cfg.pred_frames)
    truth = _split_samples(pre.batch, pre.batch.coords)

    def pretrain_metrics(predict_for, prefix):
        runs = []
        for j in range(first_sample, first_sample + k):
            rng = np.random.default_rng([cfg.seed, j, 0])
            if cond_base:
                x_r = base_model.anchor_for(pre.batch, pre.cond[:, -base_model.cond_frames :]).data
                x = sample_cond(predict_for(pre), pre.batch, x_r, sched, rng).sample
                runs.append(_split_samples(pre.batch, x))
            else:
                x = sample_uncond(predict_for(pre), pre.batch, sched, rng).sample
                runs.append(_split_samples(pre.batch, x))
        if cond_base:
            report[f"{prefix}_pretrain_ade"] = _mean([_mean([ade(r[i], truth[i]) for i in range(len(truth))]) for r in runs])
            report[f"{prefix}_pretrain_fde"] = _mean([_mean([fde(r[i], truth[i]) for i in range(len(truth))]) for r in runs])
        else:
            ref = np.stack([graph_com_project_np(t, np.zeros(len(t), dtype=np.int64), 1) for t in truth])
            report[f"{prefix}_pretrain_marginal"] = _mean([marginal_score(r, ref, cfg.marginal_bins) for r in runs])

    pretrain_metrics(lambda task: base_predictor(base_model, task.cond), "base")
    if stack is None:
        return report

    pretrain_metrics(
        lambda task: stack.fused_predictor(
            finetune_controls(stack, task) if stack.config.control != "frame" else task.controls(),
            attached=False,
            base_predict=base_predictor(base_model, task.cond) if cond_base else None,
        ),
        "detached",
    )

    ft = task_windows(test, cfg.finetune_cond_frames, cfg.pred_frames)
    ft_truth = _split_samples(ft.batch, ft.batch.coords)
    controls = finetune_controls(stack, ft)
    bp = base_predictor(base_model, ft.cond) if cond_base else None
    for attached, prefix in ((True, "fused"), (False, "base_zero_shot")):
        predict = stack.fused_predictor(controls, attached=attached, base_predict=bp)
        ades, fdes = [], []
        for j in range(first_sample, first_sample + k):
            rng = np.random.default_rng([cfg.seed, j, 1])
            if stack.config.control == "frame":
                x_r = stack.anchor_for(ft.batch, controls).data
                x = sample_cond(predict, ft.batch, x_r, sched, rng).sample
            else:
                x = sample_uncond(predict, ft.batch, sched, rng).sample
            s = _split_samples(ft.batch, x)
            ades.append(_mean([ade(s[i], ft_truth[i]) for i in range(len(ft_truth))]))
            fdes.append(_mean([fde(s[i], ft_truth[i]) for i in range(len(ft_truth))]))
        report[f"{prefix}_finetune_ade"] = _mean(ades)
        report[f"{prefix}_finetune_fde"] = _mean(fdes)
    return report


def format_report(report: dict[str, float]) -> str:
    return "".join(f"{name}\t{value!r}\n" for name, value in report.items())


# ------------------------------------------------------------------ sampling


def random_templates(cfg: RunConfig, count: int, seed) -> list[GeometricTrajectory]:
    """Particle graphs with random charges and zero coordinates (only features and edges are used)."""
    rng = np.random.default_rng(seed)
    n = cfg.n_particles
    out = []
    for _ in range(count):
        feats = charge_features(rng.choice([-1.0, 1.0], size=n))
        out.append(GeometricTrajectory(feats, np.zeros((n, cfg.pred_frames, 3)), fully_connected_edges(n)))
    return out


def generate(base_model, cfg: RunConfig, seed, stack: AdapterStack | None = None, records=None, count: int = 1):
    """One sample per record (or per random template) from the base or fused model.

    Conditional bases and frame-control adapters read their condition frames
    from ``records``; unconditional runs fall back to random templates.
    """
    cond_base = isinstance(base_model, ConditionalDenoiser)
    frame = stack is not None and stack.config.control == "frame"
    if records is None:
        if cond_base or frame:
            raise ValueError("conditional sampling needs records to take condition frames from")
        records = random_templates(cfg, count, [cfg.seed, 5])
    records = list(records)[:count]
    if not records:
        raise ValueError("nothing to sample")
    sched = cfg.schedule()
    rng = np.random.default_rng(seed)

    if frame:
        task = task_windows(records, cfg.finetune_cond_frames, cfg.pred_frames)
        controls = task.controls()
        bp = base_predictor(base_model, task.cond) if cond_base else None
        predict = stack.fused_predictor(controls, base_predict=bp)
        x_r = stack.anchor_for(task.batch, controls).data
        x = sample_cond(predict, task.batch, x_r, sched, rng).sample
        return task.batch.with_coords(x).trajectories()

    if cond_base:
        task = task_windows(records, base_model.cond_frames, cfg.pred_frames)
    else:
        task = make_task(
            [r.with_coords(np.zeros((r.n_nodes, cfg.pred_frames, 3))) for r in records],
            [np.zeros((r.n_nodes, 0, 3)) for r in records],
        )
    bp = base_predictor(base_model, task.cond)
    if stack is None:
        predict = bp
    else:
        predict = stack.fused_predictor(finetune_controls(stack, task), base_predict=bp if cond_base else None)
    if cond_base:
        x_r = base_model.anchor_for(task.batch, task.cond[:, -base_model.cond_frames :]).data
        x = sample_cond(predict, task.batch, x_r, sched, rng).sample
    else:
        x = sample_uncond(predict, task.batch, sched, rng).sample
    return task.batch.with_coords(x).trajectories()
