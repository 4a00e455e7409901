"""Run configuration: `key = value` files with typed, domain-checked keys.

Defaults follow the plain-REINFORCE baseline configuration (128 envs,
10,000-molecule budget, lr 1e-4, prioritized replay of batch 10 from a
100-entry buffer) with a desk-scale policy (64-dim embedding, one GRU
layer of 128). Unknown keys, bad types, and out-of-domain values are
errors that name the offending line.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .metrics import DescriptorRanges
from .rl_core import BaselineState, RegConfig, ShapingConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "SweepSpec",
    "SWEEP_GRID",
    "parse_run_config",
    "parse_config_text",
    "parse_sweep_spec",
    "sample_grid_configs",
]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # batch / budget
    num_envs: int = 128
    total_smiles: int = 10000
    replicates: int = 1
    seed: int = 0
    # optimizer
    lr: float = 1e-4
    lr_annealing: bool = False
    lr_final: float = 1e-4
    # experience replay
    experience_replay: bool = True
    replay_batch_size: int = 10
    replay_buffer_size: int = 100
    replay_sampler: str = "prioritized"
    # reward shaping
    shaping: str = "acegen"
    sigma: float = 0.0
    alpha: float = 1.0
    # baseline / regularizers
    baseline: str = "none"
    mab_decay: float = 0.1
    topk: float = 1.0
    kl_coef: float = 0.0
    entropy_coef: float = 0.0
    likely_penalty: float = 0.0
    # exploration
    rnd_coef: float = 0.0
    rnd_lr: float = 1e-3
    df: str = "none"
    df_threshold: float = 0.65
    df_bin_capacity: int = 25
    # policy
    embedding_dim: int = 64
    hidden_dim: int = 128
    num_layers: int = 1
    mlp_hidden: int = 0
    max_len: int = 100
    # task
    task: str = "aromatic_frac"
    task_target: str = "Cc1ccccc1CC(N)C=O"
    mpo_targets: str = "heavy_atoms:16:6,aromatic_fraction:0.5:0.25,length:24:8"
    # pretraining (used by the pretrain command)
    pretrain_epochs: int = 12
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 64
    # metrics
    auc_interval: int = 100
    sediv_sample: int = 1000
    sediv_threshold: float = 0.65
    unique_includes_invalid: bool = True
    filter_length: Tuple[float, float] = (1, 1000)
    filter_heavy_atoms: Tuple[float, float] = (0, 1000)
    filter_ring_closures: Tuple[float, float] = (0, 100)
    filter_hetero_fraction: Tuple[float, float] = (0.0, 1.0)

    def shaping_config(self) -> ShapingConfig:
        return ShapingConfig(variant=self.shaping, sigma=self.sigma, alpha=self.alpha)

    def reg_config(self) -> RegConfig:
        return RegConfig(
            lambda_kl=self.kl_coef,
            lambda_ent=self.entropy_coef,
            lambda_all=self.likely_penalty,
            topk_frac=self.topk,
        )

    def baseline_state(self) -> BaselineState:
        return BaselineState(kind=self.baseline, decay=self.mab_decay)

    def descriptor_ranges(self) -> DescriptorRanges:
        return DescriptorRanges(
            length=self.filter_length,
            heavy_atoms=self.filter_heavy_atoms,
            ring_closures=self.filter_ring_closures,
            hetero_fraction=self.filter_hetero_fraction,
        )


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_range(raw: str) -> Tuple[float, float]:
    parts = raw.split(":")
    if len(parts) != 2:
        raise ValueError(f"expected 'lo:hi', got {raw!r}")
    lo, hi = float(parts[0]), float(parts[1])
    if lo > hi:
        raise ValueError(f"range {raw!r} has lo > hi")
    return (lo, hi)


def _positive(x):
    if x <= 0:
        raise ValueError("must be > 0")
    return x


def _non_negative(x):
    if x < 0:
        raise ValueError("must be >= 0")
    return x


def _unit_interval(x):
    if not (0.0 < x <= 1.0):
        raise ValueError("must be in (0, 1]")
    return x


def _at_least_one(x):
    if x < 1:
        raise ValueError("must be >= 1")
    return x


def _choice(options):
    def check(x):
        if x not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return x

    return check


# key -> (raw parser, domain check)
_SCHEMA: Dict[str, Tuple] = {
    "num_envs": (int, _at_least_one),
    "total_smiles": (int, _non_negative),
    "replicates": (int, _at_least_one),
    "seed": (int, lambda x: x),
    "lr": (float, _non_negative),
    "lr_annealing": (_parse_bool, lambda x: x),
    "lr_final": (float, _non_negative),
    "experience_replay": (_parse_bool, lambda x: x),
    "replay_batch_size": (int, _at_least_one),
    "replay_buffer_size": (int, _at_least_one),
    "replay_sampler": (str, _choice(("uniform", "prioritized"))),
    "shaping": (str, _choice(("none", "reinvent", "acegen"))),
    "sigma": (float, _non_negative),
    "alpha": (float, lambda x: x if x >= 1 else _fail("must be >= 1")),
    "baseline": (str, _choice(("none", "mab", "loo"))),
    "mab_decay": (float, _unit_interval),
    "topk": (float, _unit_interval),
    "kl_coef": (float, _non_negative),
    "entropy_coef": (float, _non_negative),
    "likely_penalty": (float, _non_negative),
    "rnd_coef": (float, _non_negative),
    "rnd_lr": (float, _positive),
    "df": (str, _choice(("none", "unique", "similar"))),
    "df_threshold": (float, _unit_interval),
    "df_bin_capacity": (int, _at_least_one),
    "embedding_dim": (int, _at_least_one),
    "hidden_dim": (int, _at_least_one),
    "num_layers": (int, _at_least_one),
    "mlp_hidden": (int, _non_negative),
    "max_len": (int, lambda x: x if x >= 2 else _fail("must be >= 2")),
    "task": (str, _choice(("aromatic_frac", "property_mpo", "similarity"))),
    "task_target": (str, lambda x: x),
    "mpo_targets": (str, lambda x: x),
    "pretrain_epochs": (int, _at_least_one),
    "pretrain_lr": (float, _non_negative),
    "pretrain_batch_size": (int, _at_least_one),
    "auc_interval": (int, _at_least_one),
    "sediv_sample": (int, _at_least_one),
    "sediv_threshold": (float, _unit_interval),
    "unique_includes_invalid": (_parse_bool, lambda x: x),
    "filter_length": (_parse_range, lambda x: x),
    "filter_heavy_atoms": (_parse_range, lambda x: x),
    "filter_ring_closures": (_parse_range, lambda x: x),
    "filter_hetero_fraction": (_parse_range, lambda x: x),
}


def _fail(msg):
    raise ValueError(msg)


def _read_pairs(text: str, source: str) -> List[Tuple[int, str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        pairs.append((lineno, key.strip(), value.strip()))
    return pairs


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, key, value in _read_pairs(text, source):
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser, check = _SCHEMA[key]
        try:
            parsed = check(parser(value))
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
        setattr(cfg, key, parsed)
    env_seed = os.environ.get("RNG_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"RNG_SEED={env_seed!r} is not an integer") from None
    return cfg


def parse_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


# ---------------------------------------------------------------------------
# Hyperparameter sweep

SWEEP_GRID: Dict[str, List] = {
    "num_envs": [32, 64, 128, 256],
    "lr": [1e-4, 5e-4],
    "lr_annealing": [False, True],
    "experience_replay": [False, True],
    "replay_batch_size": [10, 20, 50],
    "replay_buffer_size": [100, 500],
    "replay_sampler": ["uniform", "prioritized"],
    "sigma": [0.0, 1e-3, 5e-3, 1e-2],
    "kl_coef": [0.0, 5e-3, 1e-2, 5e-2],
    "alpha": [1.0, 2.0, 3.0, 4.0, 5.0],
    "topk": [0.25, 0.5, 0.75, 1.0],
    "baseline": ["none", "mab", "loo"],
    "entropy_coef": [0.0, 1e-3, 1e-2],
    "likely_penalty": [0.0, 10.0, 50.0],
    "rnd_coef": [0.0, 0.5, 1.0],
}


@dataclass
class SweepSpec:
    num_samples: int = 10
    tasks: List[str] = field(default_factory=lambda: ["aromatic_frac"])
    seed: int = 0
    metric: str = "top10_auc"
    base: RunConfig = field(default_factory=RunConfig)
    grid: Dict[str, List] = field(default_factory=lambda: {k: list(v) for k, v in SWEEP_GRID.items()})


def parse_sweep_spec(path) -> SweepSpec:
    """Spec file: num_samples / tasks / seed / metric plus optional
    `grid.<key> = v1, v2, ...` overrides; any RunConfig key sets the base
    configuration shared by all sampled runs."""
    spec = SweepSpec()
    base_lines = []
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    source = str(path)
    for lineno, key, value in _read_pairs(text, source):
        if key == "num_samples":
            spec.num_samples = int(value)
            if spec.num_samples < 1:
                raise ConfigError(f"{source}:{lineno}: num_samples must be >= 1")
        elif key == "tasks":
            spec.tasks = [t.strip() for t in value.split(",") if t.strip()]
            if not spec.tasks:
                raise ConfigError(f"{source}:{lineno}: empty task list")
        elif key == "seed":
            spec.seed = int(value)
        elif key == "metric":
            if value not in ("top10_auc", "top10_avg"):
                raise ConfigError(f"{source}:{lineno}: unsupported metric {value!r}")
            spec.metric = value
        elif key.startswith("grid."):
            gkey = key[len("grid."):]
            if gkey not in SWEEP_GRID:
                raise ConfigError(f"{source}:{lineno}: unknown grid key {gkey!r}")
            parser, check = _SCHEMA[gkey]
            try:
                spec.grid[gkey] = [check(parser(v.strip())) for v in value.split(",")]
            except ValueError as e:
                raise ConfigError(f"{source}:{lineno}: bad grid values for {gkey}: {e}") from None
        elif key in _SCHEMA:
            base_lines.append(f"{key} = {value}")
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    if base_lines:
        spec.base = parse_config_text("\n".join(base_lines), source=source)
    return spec


def sample_grid_configs(spec: SweepSpec) -> List[Tuple[int, RunConfig]]:
    """Uniform draws from the grid, without replacement when it fits.

    Decodes mixed-radix indices so the draw is deterministic in the spec
    seed. Returns (config_id, RunConfig) pairs; config_id is the grid
    index, useful for reproducing a row.
    """
    import numpy as np

    keys = sorted(spec.grid)
    sizes = [len(spec.grid[k]) for k in keys]
    total = math.prod(sizes)
    rng = np.random.default_rng(spec.seed)
    n = spec.num_samples
    if n <= total:
        picks = rng.choice(total, size=n, replace=False)
    else:
        picks = rng.integers(0, total, size=n)
    out = []
    for config_id in picks.tolist():
        cfg = replace(spec.base)
        idx = config_id
        for k, size in zip(keys, sizes):
            idx, pos = divmod(idx, size)
            setattr(cfg, k, spec.grid[k][pos])
        out.append((int(config_id), cfg))
    return out
