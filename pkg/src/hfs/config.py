"""Run configuration: JSON parsing, defaults and cross-field validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .mainnet import build_arch

ALGORITHMS = ("hfn", "fedavg", "fedprox", "fedper", "local")
PRESETS = ("desk", "mnist", "fmnist", "cifar10", "cifar100")


@dataclass
class DatasetConfig:
    kind: str = "synth"
    num_classes: int = 4
    samples_per_class: int = 100
    image_size: int = 8
    channels: int = 3
    noise_sigma: float = 0.5
    images: str | None = None
    labels: str | None = None


@dataclass
class PartitionConfig:
    kind: str = "dirichlet"
    alpha: float = 0.5
    num_groups: int = 5
    clients_per_group: int = 4
    classes_per_client: int = 2


@dataclass
class RunConfig:
    """Every knob of one experiment.

    Defaults follow the reference settings: SGD with Nesterov momentum 0.9,
    weight decay 5e-4, 4 local and 4 fine-tuning epochs, batch 128, 100
    users joining at rate 0.25, Dir(0.5) partitions, embedding size 128 and
    a 16x16x3x3 basic filter.
    """

    algorithm: str = "hfn"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    train_ratio: float = 0.8
    clients: int = 100
    join_rate: float = 0.25
    rounds: int = 90
    local_epochs: int = 4
    fine_tune_epochs: int = 4
    fine_tune_embeddings: bool = False
    batch_size: int = 128
    lr: float = 0.01
    lr_schedule: str = "fixed"
    lr_milestones: list[int] = field(default_factory=list)
    lr_gamma: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    prox_mu: float = 0.01
    embedding_size: int = 128
    hidden_size: int | None = None
    embedding_init: str = "shared"
    basic_in: int = 16
    basic_out: int = 16
    kernel_size: int = 3
    arch: str = "desk"
    seed: int = 0
    out_dir: str = "runs/hfs"
    dtype: str = "float64"
    eval_every: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **changes: Any) -> "RunConfig":
        cfg = replace(self, **{k: v for k, v in changes.items() if v is not None})
        validate(cfg)
        return cfg


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key {where}{unknown[0]!r} (known keys: {', '.join(sorted(known))})")
    kwargs = {}
    for key, value in raw.items():
        if key == "dataset":
            value = _build(DatasetConfig, value, "dataset.")
        elif key == "partition":
            value = _build(PartitionConfig, value, "partition.")
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    validate(cfg)
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    """Read and validate a JSON run config; unknown keys are rejected."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw)


def _need(ok: bool, key: str, constraint: str, value: Any) -> None:
    if not ok:
        raise ConfigError(f"config key {key!r} must satisfy {constraint}, got {value!r}")


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validate(cfg: RunConfig) -> None:
    _need(cfg.algorithm in ALGORITHMS, "algorithm", f"one of {ALGORITHMS}", cfg.algorithm)
    _need(_is_int(cfg.clients) and cfg.clients >= 1, "clients", "integer K >= 1", cfg.clients)
    _need(_is_num(cfg.join_rate) and 0 < cfg.join_rate <= 1, "join_rate", "0 < C <= 1", cfg.join_rate)
    _need(_is_int(cfg.rounds) and cfg.rounds >= 0, "rounds", "integer T >= 0", cfg.rounds)
    _need(_is_int(cfg.local_epochs) and cfg.local_epochs >= 1, "local_epochs", "integer E >= 1", cfg.local_epochs)
    _need(_is_int(cfg.fine_tune_epochs) and cfg.fine_tune_epochs >= 0, "fine_tune_epochs", "integer >= 0",
          cfg.fine_tune_epochs)
    _need(_is_int(cfg.batch_size) and cfg.batch_size >= 1, "batch_size", "integer B >= 1", cfg.batch_size)
    _need(_is_num(cfg.lr) and cfg.lr > 0, "lr", "lr > 0", cfg.lr)
    _need(cfg.lr_schedule in ("fixed", "multistep"), "lr_schedule", "'fixed' or 'multistep'", cfg.lr_schedule)
    _need(all(_is_int(m) and m >= 1 for m in cfg.lr_milestones), "lr_milestones", "positive round numbers",
          cfg.lr_milestones)
    _need(_is_num(cfg.lr_gamma) and 0 < cfg.lr_gamma <= 1, "lr_gamma", "0 < gamma <= 1", cfg.lr_gamma)
    _need(_is_num(cfg.momentum) and 0 <= cfg.momentum < 1, "momentum", "0 <= momentum < 1", cfg.momentum)
    _need(_is_num(cfg.weight_decay) and cfg.weight_decay >= 0, "weight_decay", ">= 0", cfg.weight_decay)
    _need(_is_num(cfg.prox_mu) and cfg.prox_mu >= 0, "prox_mu", ">= 0", cfg.prox_mu)
    _need(_is_num(cfg.train_ratio) and 0 < cfg.train_ratio < 1, "train_ratio", "0 < ratio < 1", cfg.train_ratio)
    for key in ("embedding_size", "basic_in", "basic_out", "kernel_size"):
        value = getattr(cfg, key)
        _need(_is_int(value) and value >= 1, key, "positive integer", value)
    _need(cfg.hidden_size is None or (_is_int(cfg.hidden_size) and cfg.hidden_size >= 1), "hidden_size",
          "positive integer or null", cfg.hidden_size)
    _need(cfg.embedding_init in ("shared", "per_client"), "embedding_init", "'shared' or 'per_client'",
          cfg.embedding_init)
    _need(cfg.arch in PRESETS, "arch", f"one of {PRESETS}", cfg.arch)
    _need(_is_int(cfg.seed) and cfg.seed >= 0, "seed", "non-negative integer", cfg.seed)
    _need(cfg.dtype in ("float64", "float32"), "dtype", "'float64' or 'float32'", cfg.dtype)
    _need(_is_int(cfg.eval_every) and cfg.eval_every >= 0, "eval_every", "integer >= 0", cfg.eval_every)

    ds = cfg.dataset
    _need(ds.kind in ("synth", "idx"), "dataset.kind", "'synth' or 'idx'", ds.kind)
    if ds.kind == "idx":
        _need(bool(ds.images) and bool(ds.labels), "dataset.images", "both images and labels paths set",
              (ds.images, ds.labels))
    else:
        for key in ("num_classes", "samples_per_class", "image_size", "channels"):
            value = getattr(ds, key)
            _need(_is_int(value) and value >= 1, f"dataset.{key}", "positive integer", value)
        _need(ds.num_classes >= 2, "dataset.num_classes", ">= 2", ds.num_classes)
        _need(_is_num(ds.noise_sigma) and ds.noise_sigma >= 0, "dataset.noise_sigma", ">= 0", ds.noise_sigma)

    part = cfg.partition
    _need(part.kind in ("dirichlet", "group"), "partition.kind", "'dirichlet' or 'group'", part.kind)
    if part.kind == "dirichlet":
        _need(_is_num(part.alpha) and part.alpha > 0, "partition.alpha", "alpha > 0", part.alpha)
    else:
        for key in ("num_groups", "clients_per_group", "classes_per_client"):
            value = getattr(part, key)
            _need(_is_int(value) and value >= 1, f"partition.{key}", "positive integer", value)
        k = part.num_groups * part.clients_per_group
        _need(cfg.clients == k, "clients", f"K == num_groups * clients_per_group = {k}", cfg.clients)
        if ds.kind == "synth":
            _need(part.num_groups * part.classes_per_client <= ds.num_classes, "partition.classes_per_client",
                  f"num_groups * classes_per_client <= {ds.num_classes} classes", part.classes_per_client)

    if cfg.algorithm == "hfn":
        _need(cfg.kernel_size == 3, "kernel_size", "3 (all presets use 3x3 kernels)", cfg.kernel_size)
        num_classes = ds.num_classes if ds.kind == "synth" else 10
        in_channels = ds.channels if ds.kind == "synth" else None
        try:
            build_arch(cfg.arch, num_classes, in_channels=in_channels, basic=(cfg.basic_in, cfg.basic_out))
        except ConfigError as exc:
            raise ConfigError(f"config keys 'basic_in'/'basic_out' violate the tiling rule: {exc}") from None


def default_config_text() -> str:
    return json.dumps(RunConfig().to_dict(), indent=2)
