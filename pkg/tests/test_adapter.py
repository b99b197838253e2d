import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from equiada import numerics as nx
from equiada.adapter import (
    AdapterConfig,
    AdapterStack,
    ablation_mode,
    adapter_forward,
    finetune_loss,
    finetune_noise,
    finetune_step,
    fused_score,
    gradient_norms,
    select_copy_layers,
    zero_conv_apply,
)
from equiada.backbone import DenoiserConfig, DenoiserModel
from equiada.batch import GraphBatch
from equiada.controls import FrameControl, GlobalControl, SubgraphControl, audit_map
from equiada.diffusion import build_linear_schedule, denoising_loss_cond, denoising_loss_uncond
from equiada.geometry import RigidMotion
from equiada.harness.checkpoint import params_hash

from conftest import random_traj

KINDS = ("global", "subgraph", "frame")


def make_stack(kind, n_layers=3, blocks=2, mode="standard", seed=0, n_frames=3):
    cfg = DenoiserConfig(hidden=8, n_layers=n_layers, time_dim=8, attn_dim=4, frame_pe_dim=4, max_tau=10)
    base = DenoiserModel(cfg, seed=seed)
    acfg = AdapterConfig(n_blocks=blocks, control=kind, mode=mode, global_dim=4 if kind == "global" else 0, n_frames=n_frames, seed=seed)
    return AdapterStack(base, acfg)


def make_control(kind, traj, rng):
    if kind == "global":
        return GlobalControl(np.eye(4)[rng.integers(4)])
    if kind == "subgraph":
        return SubgraphControl(random_traj(rng, n=2, t=traj.n_frames))
    return FrameControl(rng.standard_normal((traj.n_nodes, 2, 3)))


def perturb(stack, rng, scale=0.1):
    for name in stack.params.names():
        if ".zc." in name or ".encoder.1." in name:
            stack.params.assign(name, scale * rng.standard_normal(stack.params[name].shape))


# ---------------------------------------------------------------- zero-conv


def test_zero_conv_fresh_is_zero(rng):
    x, h = rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 8))
    zx, zh = zero_conv_apply(x, h, np.zeros(()), np.zeros(8))
    assert not np.any(zx.data) and not np.any(zh.data)


def test_zero_conv_analytic():
    x = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    zx, zh = zero_conv_apply(x, np.ones((2, 3)), np.array(1.0), np.zeros(3))
    np.testing.assert_array_equal(zx.data[:, 0], x)
    np.testing.assert_array_equal(zh.data, 0.0)


@given(st.integers(0, 10_000))
def test_zero_conv_group_action(seed):
    rng = np.random.default_rng(seed)
    x, h = rng.standard_normal((5, 2, 3)), rng.standard_normal((5, 4))
    phi_x, phi_h = rng.standard_normal(()), rng.standard_normal(4)
    g = RigidMotion.random(seed, scale=4)
    base = zero_conv_apply(x, h, phi_x, phi_h)[0].data
    assert np.abs(zero_conv_apply(x + g.translation, h, phi_x, phi_h)[0].data - base).max() <= 1e-12
    assert np.abs(zero_conv_apply(g.rotate(x), h, phi_x, phi_h)[0].data - g.rotate(base)).max() <= 1e-12


# ---------------------------------------------------------------- layer selection


def test_select_copy_layers():
    assert select_copy_layers(6, 3, "strided") == [0, 2, 4]
    assert select_copy_layers(6, 6, "strided") == list(range(6))
    assert select_copy_layers(6, 1, "first") == [0]
    assert select_copy_layers(6, 2, "last") == [4, 5]
    with pytest.raises(ValueError):
        select_copy_layers(6, 7)
    with pytest.raises(ValueError):
        select_copy_layers(6, 2, "random")


def test_copies_start_bitwise_equal():
    stack = make_stack("frame")
    for b, src in enumerate(stack.source_layers):
        for name in stack.base.layer_names(src):
            suffix = name[len(f"layer{src}.") :]
            assert stack.params[f"block{b}.layer.{suffix}"].tobytes() == stack.base.params[name].tobytes()
    assert stack.base.params.trainable_names() == []


def test_zc_starts_bitwise_zero():
    stack = make_stack("global")
    for b in range(stack.n_blocks):
        assert stack.params[f"block{b}.zc.phi_x"].tobytes() == np.zeros(()).tobytes()
        assert not np.any(stack.params[f"block{b}.zc.phi_h"])


def test_params_disjoint_from_base():
    stack = make_stack("frame")
    assert not set(stack.params.names()) & set(stack.base.params.names())


# ---------------------------------------------------------------- adapter / fused score


@pytest.mark.parametrize("kind", KINDS)
def test_fresh_adapter_zero_and_fused_equals_base(kind, rng):
    stack = make_stack(kind)
    for _ in range(5):
        traj = random_traj(rng, n=4, t=3)
        batch = GraphBatch.from_trajectories([traj])
        ctrl = [make_control(kind, traj, rng)]
        tau = int(rng.integers(1, 11))
        assert not np.any(adapter_forward(stack, batch, traj.coords, tau, ctrl))
        base = stack.base.forward(batch, traj.coords, tau)[0].data
        assert np.abs(fused_score(stack, batch, traj.coords, tau, ctrl) - base).max() == 0.0


@pytest.mark.parametrize("kind", KINDS)
def test_perturbed_adapter_equivariant(kind, rng):
    stack = make_stack(kind)
    perturb(stack, rng)
    traj = random_traj(rng, n=4, t=3)
    ctrl = make_control(kind, traj, rng)

    def score(t, c):
        return adapter_forward(stack, GraphBatch.from_trajectories([t]), t.coords, 4, [c])

    assert np.abs(score(traj, ctrl)).max() > 0
    assert audit_map(score, traj, ctrl, trials=5).passed

    def fused(t, c):
        return fused_score(stack, GraphBatch.from_trajectories([t]), t.coords, 4, [c])

    assert audit_map(fused, traj, ctrl, trials=5).passed


def test_zero_base_stub_gives_adapter_score(rng):
    stack = make_stack("frame")
    perturb(stack, rng)
    traj = random_traj(rng, n=4, t=3)
    batch = GraphBatch.from_trajectories([traj])
    ctrl = [make_control("frame", traj, rng)]
    zero = lambda b, x, t: nx.Tensor(np.zeros(x.shape))
    fused = stack.fused_predictor(ctrl, base_predict=zero)(batch, nx.Tensor(traj.coords), 3).data
    np.testing.assert_array_equal(fused, adapter_forward(stack, batch, traj.coords, 3, ctrl))


def test_control_kind_binding(rng):
    stack = make_stack("frame")
    traj = random_traj(rng)
    with pytest.raises(ValueError):
        adapter_forward(stack, GraphBatch.from_trajectories([traj]), traj.coords, 1, [GlobalControl([1.0])])


def test_copy_gradient_live_once_phi_nonzero(rng):
    stack = make_stack("frame", blocks=1)
    stack.params.assign("block0.zc.phi_x", np.array(0.1))
    traj = random_traj(rng, n=3, t=3)
    batch = GraphBatch.from_trajectories([traj])
    ctrl = [make_control("frame", traj, rng)]
    name = "block0.layer.coord.1.W"

    def loss(p):
        s, _ = stack.forward(batch, traj.coords, 3, ctrl, p=p)
        return nx.tsum(nx.square(s))

    p = stack.params.tensors()
    analytic = nx.backward(loss(p), p)[name][0, 0]
    h = 1e-5
    vals = []
    for sign in (1, -1):
        q = stack.params.tensors(track=False)
        arr = stack.params[name].copy()
        arr[0, 0] += sign * h
        q[name] = nx.Tensor(arr)
        vals.append(float(loss(q).data))
    fd = (vals[0] - vals[1]) / (2 * h)
    assert abs(analytic) > 0
    assert abs(analytic - fd) <= 1e-6 * max(abs(fd), 1e-12)


# ---------------------------------------------------------------- fine-tuning


def _toy(rng, graphs=2, n=2, t=3):
    trajs = [random_traj(rng, n=n, t=t) for _ in range(graphs)]
    return GraphBatch.from_trajectories(trajs)


def _controls(kind, batch, rng):
    return [make_control(kind, t, rng) for t in batch.trajectories()]


@pytest.mark.parametrize("kind", KINDS)
def test_step0_loss_equals_base_loss(kind, rng):
    stack = make_stack(kind)
    sched = build_linear_schedule(10)
    batch = _toy(rng)
    ctrls = _controls(kind, batch, rng)
    tau, eps = finetune_noise(stack, batch, sched, 3)
    fused = float(finetune_loss(stack, batch, ctrls, sched, tau, eps).data)
    base_pred = lambda b, x, t: stack.base.forward(b, x, t)[0]
    if kind == "frame":
        x_r = stack.anchor_for(batch, ctrls).data
        base = float(denoising_loss_cond(base_pred, batch, x_r, tau, eps, sched).data)
    else:
        base = float(denoising_loss_uncond(base_pred, batch, tau, eps, sched).data)
    assert fused == base


def test_zero_lr_step_changes_nothing(rng):
    stack = make_stack("frame")
    before = params_hash(stack.params)
    loss = finetune_step(stack, _toy(rng), _controls("frame", _toy(rng), rng), build_linear_schedule(10), nx.OptimizerState(lr=0.0), 0)
    assert np.isfinite(loss)
    assert params_hash(stack.params) == before


def test_base_bitwise_frozen_over_100_steps(rng):
    stack = make_stack("frame", n_layers=2, blocks=1)
    base_before = params_hash(stack.base.params)
    adapter_before = params_hash(stack.params)
    sched = build_linear_schedule(10)
    opt = nx.OptimizerState(lr=1e-3)
    batch = _toy(rng)
    ctrls = _controls("frame", batch, rng)
    for step in range(100):
        finetune_step(stack, batch, ctrls, sched, opt, step)
    assert params_hash(stack.base.params) == base_before
    assert params_hash(stack.params) != adapter_before


def test_unfrozen_base_refused(rng):
    stack = make_stack("frame")
    stack.base.params.set_trainable(True)
    batch = _toy(rng)
    with pytest.raises(nx.ContractError):
        finetune_step(stack, batch, _controls("frame", batch, rng), build_linear_schedule(10), nx.OptimizerState(), 0)


def test_gradient_liveness_after_one_step(rng):
    stack = make_stack("frame", blocks=1)
    sched = build_linear_schedule(10)
    batch = _toy(rng)
    ctrls = _controls("frame", batch, rng)
    g0 = gradient_norms(stack, batch, ctrls, sched, 1)
    assert g0["copy"] == 0.0 and g0["zero_conv"] > 0.0
    finetune_step(stack, batch, ctrls, sched, nx.OptimizerState(lr=1e-3), 1)
    g1 = gradient_norms(stack, batch, ctrls, sched, 2)
    assert g1["copy"] > 0.0


def test_finetune_grad_check(rng):
    stack = make_stack("frame", n_layers=2, blocks=1)
    for name in stack.params.names():
        stack.params.assign(name, stack.params[name] + 0.3 * rng.standard_normal(stack.params[name].shape))
    sched = build_linear_schedule(10)
    batch = _toy(rng, graphs=1)
    ctrls = _controls("frame", batch, rng)
    tau, eps = finetune_noise(stack, batch, sched, 5)
    assert nx.grad_check(lambda p: finetune_loss(stack, batch, ctrls, sched, tau, eps, p=p), stack.params) <= 1e-4


# ---------------------------------------------------------------- ablations


def test_ablation_modes(rng):
    stack = make_stack("frame")
    traj = random_traj(rng, n=4, t=3)
    batch = GraphBatch.from_trajectories([traj])
    ctrl = [make_control("frame", traj, rng)]
    base = stack.base.forward(batch, traj.coords, 4)[0].data

    assert np.abs(fused_score(ablation_mode(stack, "standard"), batch, traj.coords, 4, ctrl) - base).max() == 0.0
    noisy = ablation_mode(stack, "no_zero_conv")
    assert np.abs(fused_score(noisy, batch, traj.coords, 4, ctrl) - base).max() > 0.0

    fresh = ablation_mode(stack, "no_trainable_copy")
    for b in range(fresh.n_blocks):
        copy = {k[len(f"block{b}.layer.") :]: v for k, v in fresh.params.items() if k.startswith(f"block{b}.layer.")}
        for layer in range(stack.base.depth):
            same = all(
                np.array_equal(copy[n[len(f"layer{layer}.") :]], stack.base.params[n]) for n in stack.base.layer_names(layer)
            )
            assert not same
    with pytest.raises(ValueError):
        ablation_mode(stack, "bogus")
