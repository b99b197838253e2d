"""``equiada`` command line: simulate, pretrain, finetune, sample, eval, audit."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from equiada.adapter import AdapterConfig, AdapterStack
from equiada.harness import training as tr
from equiada.harness.audit import full_audit
from equiada.harness.checkpoint import CheckpointError, load_checkpoint, params_hash, save_checkpoint
from equiada.harness.config import ConfigError, RunConfig, load_config
from equiada.simdata import DatasetFormatError, make_dataset, read_splits, write_dataset, write_splits

log = logging.getLogger("equiada")

# Settings a fine-tune or eval run inherits from the base checkpoint.
BASE_KEYS = (
    "task",
    "cond_frames",
    "pred_frames",
    "n_particles",
    "n_steps",
    "beta_start",
    "beta_end",
    "beta_increasing",
    "hidden",
    "n_layers",
    "time_dim",
    "attn_dim",
)
EVAL_KEYS = ("samples_k", "eval_records", "marginal_bins", "seed")
TAIL = 20


class CommandError(RuntimeError):
    pass


def _splits(directory, need=("train", "val")) -> dict:
    splits = read_splits(directory)
    missing = [s for s in need if s not in splits]
    if missing:
        raise CommandError(f"{directory}: missing split file(s) {', '.join(s + '.gada' for s in missing)}")
    return splits


def _with_base(cfg: RunConfig, base_cfg: RunConfig) -> RunConfig:
    return cfg.replace(**{k: getattr(base_cfg, k) for k in BASE_KEYS})


def _history(result) -> dict:
    return {
        "initial_val": result.initial_val,
        "best_val": result.best_val,
        "best_step": result.best_step,
        "final_val": result.final_val,
        "loss_tail": result.loss_history[-TAIL:],
        "val_history": result.val_history,
    }


def load_base(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "base":
        raise CheckpointError(f"{path}: expected a base checkpoint, found {ckpt.kind!r}")
    model, cfg = tr.base_from_checkpoint(ckpt)
    return ckpt, model, cfg


def load_adapter(path, base_ckpt, base_model):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "adapter":
        raise CheckpointError(f"{path}: expected an adapter checkpoint, found {ckpt.kind!r}")
    m = ckpt.manifest
    if m["base_sha256"] != base_ckpt.blob_hash:
        raise CheckpointError(
            f"{path}: adapter was trained on base {m['base_sha256'][:12]}, given base {base_ckpt.blob_hash[:12]}"
        )
    stack = AdapterStack(
        tr.base_network(base_model), AdapterConfig(**m["adapter_config"]), params=ckpt.params, source_layers=m["source_layers"]
    )
    return stack, RunConfig(**m["config"])


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    splits = make_dataset(cfg.data_config())
    write_splits(args.out, splits)
    print(f"wrote {', '.join(f'{s}: {len(r)}' for s, r in splits.items())} records to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    splits = _splits(args.data)
    manifest = {"kind": "base", "config": cfg.to_dict(), "step": cfg.steps}
    try:
        model, result = tr.pretrain(cfg, splits["train"], splits["val"])
    except tr.TrainingAborted as exc:
        fallback = Path(str(args.out) + ".last-good")
        save_checkpoint(fallback, exc.last_good, {**manifest, "step": exc.step, "aborted": True})
        raise CommandError(f"{exc}; saved {fallback}") from None
    ckpt = save_checkpoint(args.out, model.params, {**manifest, **_history(result)})
    print(f"base checkpoint {args.out} sha256 {ckpt.blob_hash}")
    print(f"validation loss {result.initial_val:.6g} -> {result.best_val:.6g} (best at step {result.best_step})")
    return 0


def cmd_finetune(args) -> int:
    base_ckpt, base_model, base_cfg = load_base(args.base)
    cfg = _with_base(load_config(args.config), base_cfg)
    splits = _splits(args.data)
    before = params_hash(base_model.params)
    if before != base_ckpt.blob_hash:
        raise CheckpointError(f"{args.base}: loaded parameters do not match the recorded hash")
    stack, result, _ = tr.finetune(base_model, cfg, splits["train"], splits["val"])
    after = params_hash(base_model.params)
    manifest = {
        "kind": "adapter",
        "config": cfg.to_dict(),
        "adapter_config": stack.config.to_dict(),
        "source_layers": stack.source_layers,
        "base_sha256": base_ckpt.blob_hash,
        "base_sha256_after": after,
        "base_unchanged": before == after,
        "step": cfg.steps,
        **_history(result),
    }
    ckpt = save_checkpoint(args.out, stack.params, manifest)
    print(f"adapter checkpoint {args.out} sha256 {ckpt.blob_hash} (base {base_ckpt.blob_hash[:12]} unchanged)")
    print(f"validation loss {result.initial_val:.6g} -> {result.best_val:.6g} (best at step {result.best_step})")
    return 0


def cmd_sample(args) -> int:
    base_ckpt, base_model, cfg = load_base(args.ckpt)
    stack = None
    if args.adapter:
        stack, cfg = load_adapter(args.adapter, base_ckpt, base_model)
    records = None
    if args.data:
        records = _splits(args.data, need=("test",))["test"]
    samples = tr.generate(base_model, cfg, args.seed, stack=stack, records=records, count=args.count)
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} sample(s) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    base_ckpt, base_model, cfg = load_base(args.base)
    stack = None
    if args.adapter:
        stack, cfg = load_adapter(args.adapter, base_ckpt, base_model)
    if args.config:
        override = load_config(args.config)
        cfg = cfg.replace(**{k: getattr(override, k) for k in EVAL_KEYS})
    test = _splits(args.data, need=("test",))["test"]
    report = tr.evaluate(base_model, cfg, test, stack)
    text = tr.format_report(report)
    Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_audit(args) -> int:
    base_ckpt, base_model, cfg = load_base(args.ckpt)
    stack = None
    if args.adapter:
        stack, cfg = load_adapter(args.adapter, base_ckpt, base_model)
    reports = full_audit(base_model, cfg, stack, trials=args.trials, tol=args.tol, seed=args.seed)
    for name, rep in reports.items():
        print(f"{name}\t{rep}")
    return 0 if all(r.passed for r in reports.values()) else 1


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="equiada", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate train/val/test charged-particle splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("pretrain", help="train a base denoiser")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="train an adapter on a frozen base")
    p.add_argument("--base", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("sample", help="draw trajectories from a base or fused model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapter")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory supplying graphs and condition frames")
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="sampling metrics on the test split")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config", help="overrides samples_k, eval_records, marginal_bins and seed")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("audit", help="randomized equivariance audits")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapter")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CommandError, ConfigError, CheckpointError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"equiada {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
