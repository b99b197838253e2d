"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from equiada.backbone import DenoiserConfig
from equiada.diffusion import NoiseSchedule, build_linear_schedule
from equiada.simdata import DataConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a pretrain / fine-tune / eval run needs. Defaults are desk scale."""

    task: str = "uncond"
    cond_frames: int = 4
    finetune_cond_frames: int = 4
    pred_frames: int = 8
    n_particles: int = 5
    n_steps: int = 100
    beta_start: float = 0.02
    beta_end: float = 0.0001
    beta_increasing: bool = False
    hidden: int = 32
    n_layers: int = 2
    time_dim: int = 32
    attn_dim: int = 16
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-3
    seed: int = 0
    val_every: int = 100
    val_size: int = 100
    adapter_blocks: int = 2
    adapter_strategy: str = "strided"
    control: str = "frame"
    ablation: str = "standard"
    samples_k: int = 5
    eval_records: int = 100
    marginal_bins: int = 50
    n_train: int = 300
    n_val: int = 100
    n_test: int = 100
    sim_dt: float = 0.001
    sim_save_every: int = 100

    def __post_init__(self):
        if self.task not in ("uncond", "cond"):
            raise ConfigError(f"task must be 'uncond' or 'cond', got {self.task!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and f.name not in ("seed", "steps") and v < 1:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.control not in ("global", "subgraph", "frame"):
            raise ConfigError(f"unknown control {self.control!r}")

    @classmethod
    def full_scale(cls, **overrides) -> "RunConfig":
        """Hyper-parameters of the N-body experiments at full size."""
        base = dict(
            cond_frames=10,
            finetune_cond_frames=15,
            pred_frames=20,
            n_steps=1000,
            hidden=128,
            n_layers=6,
            time_dim=32,
            batch_size=128,
            lr=1e-4,
            adapter_blocks=3,
            n_train=3000,
            n_val=2000,
            n_test=2000,
        )
        base.update(overrides)
        return cls(**base)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def total_frames(self) -> int:
        return max(self.cond_frames, self.finetune_cond_frames) + self.pred_frames

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            in_dim=2,
            hidden=self.hidden,
            n_layers=self.n_layers,
            time_dim=self.time_dim,
            attn_dim=self.attn_dim,
            max_tau=self.n_steps,
            subspace=self.task == "uncond",
        )

    def schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.n_steps, self.beta_start, self.beta_end, self.beta_increasing)

    def data_config(self) -> DataConfig:
        return DataConfig(
            n_particles=self.n_particles,
            n_frames=self.total_frames,
            n_train=self.n_train,
            n_val=self.n_val,
            n_test=self.n_test,
            dt=self.sim_dt,
            save_every=self.sim_save_every,
            seed=self.seed,
        )


def _parse_value(raw: str, typ):
    if typ in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; ``preset = full`` switches defaults."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values: dict = {}
    preset = "desk"
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if raw not in ("desk", "full"):
                raise ConfigError(f"line {lineno}: preset must be 'desk' or 'full'")
            preset = raw
            continue
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return RunConfig.full_scale(**values) if preset == "full" else RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
