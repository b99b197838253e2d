import logging
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from equiada.geometry import RigidMotion
from equiada.harness import training as tr
from equiada.harness.checkpoint import CheckpointError, load_checkpoint, params_hash, save_checkpoint
from equiada.harness.config import ConfigError, RunConfig, dump_config, parse_config
from equiada.harness.metrics import ade, fde, marginal_score
from equiada.simdata import make_dataset

TOY = dict(
    n_particles=3,
    cond_frames=2,
    finetune_cond_frames=2,
    pred_frames=3,
    n_steps=20,
    hidden=8,
    n_layers=2,
    time_dim=8,
    attn_dim=4,
    batch_size=8,
    val_size=8,
    val_every=50,
    n_train=50,
    n_val=8,
    n_test=4,
    eval_records=3,
    samples_k=2,
    adapter_blocks=1,
)


@pytest.fixture(scope="module")
def toy_data():
    splits = make_dataset(RunConfig(**TOY).data_config())
    return {name: [r.trajectory for r in recs] for name, recs in splits.items()}


# ---------------------------------------------------------------- config


def test_defaults_are_desk_scale():
    cfg = RunConfig()
    assert (cfg.n_particles, cfg.cond_frames, cfg.pred_frames, cfg.n_steps, cfg.hidden, cfg.n_layers) == (5, 4, 8, 100, 32, 2)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'hiden'"):
        parse_config("hiden = 4\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("# comment\nsteps = many\n")
    with pytest.raises(ConfigError):
        parse_config("hidden = 0")
    with pytest.raises(ConfigError):
        parse_config("task = joint")


def test_full_preset():
    cfg = parse_config("preset = full\nseed = 3\n")
    assert (cfg.n_steps, cfg.batch_size, cfg.lr, cfg.n_layers, cfg.hidden) == (1000, 128, 1e-4, 6, 128)
    assert (cfg.cond_frames, cfg.finetune_cond_frames, cfg.pred_frames) == (10, 15, 20)
    assert cfg.seed == 3


def test_config_dump_round_trip():
    cfg = RunConfig(**TOY, beta_increasing=True)
    assert parse_config(dump_config(cfg)) == cfg


# ---------------------------------------------------------------- metrics


def test_ade_fde_zero_on_truth(rng):
    truth = rng.standard_normal((4, 3, 3))
    assert ade(truth, truth) == 0.0 and fde(truth, truth) == 0.0


def test_ade_fde_345():
    truth = np.zeros((1, 1, 3))
    pred = np.array([[[3.0, 4.0, 0.0]]])
    assert ade(pred, truth) == 5.0 and fde(pred, truth) == 5.0


def test_ade_fde_two_frames():
    truth = np.zeros((2, 2, 3))
    pred = np.zeros((2, 2, 3))
    pred[:, 0, 0] = 1.0
    pred[:, 1, 1] = 3.0
    assert ade(pred, truth) == 2.0 and fde(pred, truth) == 3.0


def test_ade_averages_samples(rng):
    truth = rng.standard_normal((3, 2, 3))
    preds = rng.standard_normal((5, 3, 2, 3))
    assert ade(preds, truth) == pytest.approx(np.mean([ade(p, truth) for p in preds]), abs=1e-15)
    assert fde(preds, truth) == pytest.approx(np.mean([fde(p, truth) for p in preds]), abs=1e-15)


def test_ade_shape_mismatch():
    with pytest.raises(ValueError):
        ade(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)))


@given(st.integers(0, 2**31))
@settings(max_examples=20)
def test_ade_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    truth, pred = rng.standard_normal((2, 3, 4, 3))
    g = RigidMotion.random(seed)
    assert abs(ade(g.apply(pred), g.apply(truth)) - ade(pred, truth)) <= 1e-12
    assert abs(fde(g.apply(pred), g.apply(truth)) - fde(pred, truth)) <= 1e-12


def test_marginal_zero_on_identical(rng):
    x = rng.standard_normal((6, 3, 4, 3))
    assert marginal_score(x, x.copy()) == 0.0


def _two_histogram_oracle(a, b, bins):
    """Per-axis, per-frame loop with explicit bin assignment."""
    total, count = 0.0, 0
    for t in range(a.shape[2]):
        for axis in range(3):
            va = [float(v) for v in a[:, :, t, axis].ravel()]
            vb = [float(v) for v in b[:, :, t, axis].ravel()]
            lo, hi = min(va + vb), max(va + vb)
            width = (hi - lo) / bins
            ha, hb = [0] * bins, [0] * bins
            for vals, hist in ((va, ha), (vb, hb)):
                for v in vals:
                    hist[min(int((v - lo) / width), bins - 1)] += 1
            total += sum(abs(ha[i] / len(va) - hb[i] / len(vb)) for i in range(bins)) / bins
            count += 1
    return total / count


def test_marginal_disjoint_halves():
    # two points in each set, all four on one axis; a left, b right
    a = np.zeros((1, 2, 1, 3))
    b = np.zeros((1, 2, 1, 3))
    a[0, :, 0, 0] = [0.0, 1.0]
    b[0, :, 0, 0] = [3.0, 4.0]
    a[0, :, 0, 1:] = b[0, :, 0, 1:] = [[0.0, 5.0], [1.0, 6.0]]
    bins = 4
    # x axis: a occupies bins 0, 1 and b bins 2, 3 with mass 1/2 each -> 4 * 0.5 / 4
    x_score = 0.5
    assert marginal_score(a, b, bins) == pytest.approx((x_score + 0 + 0) / 3, abs=1e-15)
    assert abs(marginal_score(a, b, bins) - _two_histogram_oracle(a, b, bins)) <= 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_marginal_matches_oracle_four_points(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 2, 2, 3))
    b = rng.standard_normal((1, 4, 2, 3)) + 0.5
    for bins in (2, 3, 7):
        assert abs(marginal_score(a, b, bins) - _two_histogram_oracle(a, b, bins)) <= 1e-15


def test_marginal_order_invariant(rng):
    a, b = rng.standard_normal((2, 5, 3, 4, 3))
    perm = rng.permutation(5)
    assert marginal_score(a[perm], b) == marginal_score(a, b)


def test_marginal_degenerate_warns(caplog):
    a = np.ones((2, 2, 1, 3))
    with caplog.at_level(logging.WARNING):
        assert marginal_score(a, a.copy()) == 0.0
    assert "degenerate" in caplog.text


def test_marginal_errors():
    with pytest.raises(ValueError):
        marginal_score(np.zeros((0, 2, 1, 3)), np.zeros((1, 2, 1, 3)))
    with pytest.raises(ValueError):
        marginal_score(np.zeros((1, 2, 1, 3)), np.zeros((1, 2, 1, 3)), bins=1)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = tr.build_base(RunConfig(**TOY))
    saved = save_checkpoint(tmp_path / "m.ckpt", model.params, {"kind": "base", "config": RunConfig(**TOY).to_dict()})
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.blob_hash == saved.blob_hash == params_hash(model.params)
    for name in model.params.names():
        assert back.params[name].tobytes() == model.params[name].tobytes()
    restored, cfg = tr.base_from_checkpoint(back)
    assert cfg == RunConfig(**TOY)


def test_checkpoint_tamper_detected(tmp_path):
    model = tr.build_base(RunConfig(**TOY))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.params, {"kind": "base"})
    buf = bytearray(path.read_bytes())
    buf[-3] ^= 0xFF
    path.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="hash mismatch"):
        load_checkpoint(path)
    path.write_bytes(b"junk")
    with pytest.raises(CheckpointError, match="not an equiada checkpoint"):
        load_checkpoint(path)


# ---------------------------------------------------------------- training


def test_pretrain_zero_budget(toy_data):
    cfg = RunConfig(**TOY, steps=0)
    model, result = tr.pretrain(cfg, toy_data["train"], toy_data["val"])
    assert result.loss_history == [] and result.val_history == []
    assert params_hash(model.params) == params_hash(tr.build_base(cfg).params)


@pytest.mark.parametrize("task", ["uncond", "cond"])
def test_pretrain_200_steps_reduces_loss(toy_data, task):
    cfg = RunConfig(**TOY, task=task, steps=200, lr=3e-3)
    _, result = tr.pretrain(cfg, toy_data["train"], toy_data["val"])
    h = result.loss_history
    assert len(h) == 200
    assert np.mean(h[-20:]) < np.mean(h[:20])
    assert result.best_val < result.initial_val


def test_pretrain_deterministic(toy_data):
    cfg = RunConfig(**TOY, steps=20)
    a, ra = tr.pretrain(cfg, toy_data["train"], toy_data["val"])
    b, rb = tr.pretrain(cfg, toy_data["train"], toy_data["val"])
    assert params_hash(a.params) == params_hash(b.params)
    assert ra.loss_history == rb.loss_history


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts(toy_data):
    cfg = RunConfig(**TOY, steps=5, lr=1e300)
    with pytest.raises(tr.TrainingAborted, match="step") as info:
        tr.pretrain(cfg, toy_data["train"], toy_data["val"])
    assert info.value.step >= 2


@pytest.fixture(scope="module")
def toy_base(toy_data):
    model, _ = tr.pretrain(RunConfig(**TOY, steps=30), toy_data["train"], toy_data["val"])
    model.params.freeze()
    return model


def test_finetune_zero_budget(toy_base, toy_data):
    cfg = RunConfig(**TOY, steps=0)
    stack, result, _ = tr.finetune(toy_base, cfg, toy_data["train"], toy_data["val"])
    assert result.loss_history == []
    for b in range(stack.n_blocks):
        assert not np.any(stack.params[f"block{b}.zc.phi_x"])
        assert not np.any(stack.params[f"block{b}.zc.phi_h"])
    ev = dict(TOY, steps=0)
    report = tr.evaluate(toy_base, RunConfig(**ev), toy_data["test"], stack)
    assert report["fused_finetune_ade"] == report["base_zero_shot_finetune_ade"]


def test_finetune_200_steps_frame_control(toy_base, toy_data):
    cfg = RunConfig(**TOY, steps=200, lr=3e-3)
    before = params_hash(toy_base.params)
    stack, result, recorded = tr.finetune(toy_base, cfg, toy_data["train"], toy_data["val"])
    assert recorded == before == params_hash(toy_base.params)
    assert np.mean(result.loss_history[-20:]) < np.mean(result.loss_history[:20])
    assert result.best_val < result.initial_val


def test_finetune_refuses_unfrozen_base(toy_data):
    cfg = RunConfig(**TOY, steps=1)
    model = tr.build_base(cfg)
    with pytest.raises(Exception, match="frozen"):
        tr.finetune(model, cfg, toy_data["train"], toy_data["val"])


def test_subgraph_finetune_unsupported(toy_base, toy_data):
    cfg = RunConfig(**TOY, steps=1, control="subgraph")
    with pytest.raises(ConfigError, match="subgraph"):
        tr.finetune(toy_base, cfg, toy_data["train"], toy_data["val"])


def test_global_finetune_runs(toy_base, toy_data):
    cfg = RunConfig(**TOY, steps=3, control="global")
    stack, result, _ = tr.finetune(toy_base, cfg, toy_data["train"], toy_data["val"])
    assert len(result.loss_history) == 3 and stack.config.global_dim == 4


# ---------------------------------------------------------------- evaluation


def test_evaluate_empty_test_set(toy_base):
    with pytest.raises(ValueError, match="empty"):
        tr.evaluate(toy_base, RunConfig(**TOY), [])


def test_k_samples_average_single_runs(toy_base, toy_data):
    cfg = RunConfig(**TOY)
    stack, _, _ = tr.finetune(toy_base, cfg.replace(steps=5), toy_data["train"], toy_data["val"])
    full = tr.evaluate(toy_base, cfg, toy_data["test"], stack, k=5)
    singles = [tr.evaluate(toy_base, cfg, toy_data["test"], stack, k=1, first_sample=j) for j in range(5)]
    for name, value in full.items():
        assert value == float(np.mean([s[name] for s in singles])), name


def test_detached_equals_base(toy_base, toy_data):
    cfg = RunConfig(**TOY)
    stack, _, _ = tr.finetune(toy_base, cfg.replace(steps=20), toy_data["train"], toy_data["val"])
    report = tr.evaluate(toy_base, cfg, toy_data["test"], stack)
    assert report["detached_pretrain_marginal"] == report["base_pretrain_marginal"]
    alone = tr.evaluate(toy_base, cfg, toy_data["test"])
    assert alone["base_pretrain_marginal"] == report["base_pretrain_marginal"]


def test_evaluate_deterministic(toy_base, toy_data):
    cfg = RunConfig(**TOY)
    a = tr.format_report(tr.evaluate(toy_base, cfg, toy_data["test"]))
    b = tr.format_report(tr.evaluate(toy_base, cfg, toy_data["test"]))
    assert a == b and a.startswith("base_pretrain_marginal\t")


def test_generate_requires_records_for_frame(toy_base, toy_data):
    cfg = RunConfig(**TOY)
    stack = tr.make_stack(toy_base, cfg)
    with pytest.raises(ValueError):
        tr.generate(toy_base, cfg, 0, stack=stack)
    out = tr.generate(toy_base, cfg, 0, stack=stack, records=toy_data["test"], count=2)
    assert len(out) == 2 and out[0].coords.shape == (3, 3, 3)
    free = tr.generate(toy_base, cfg, 0, count=3)
    assert all(abs(t.coords.mean(axis=(0, 1))).max() <= 1e-10 for t in free)
