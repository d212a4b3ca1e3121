"""Main classification network: injected conv weights (theta) + local head (beta)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DomainError
from .numerics import Tensor


@dataclass(frozen=True)
class ConvSpec:
    """One bias-free conv layer.

    ``residual`` marks the first conv of a two-conv residual block; the
    block's input is added (through a parameter-free shortcut) to the output
    of the following conv before its ReLU.
    """

    c_in: int
    c_out: int
    f: int = 3
    stride: int = 1
    residual: bool = False

    @property
    def padding(self) -> int:
        return self.f // 2


@dataclass(frozen=True)
class MainNetArch:
    name: str
    in_channels: int
    convs: tuple[ConvSpec, ...]
    num_classes: int
    pool: str = "global_avg"

    @property
    def in_features(self) -> int:
        return self.convs[-1].c_out

    def conv_shapes(self) -> list[tuple[int, int, int, int]]:
        return [(c.c_out, c.c_in, c.f, c.f) for c in self.convs]

    def conv_param_count(self) -> int:
        return sum(math.prod(s) for s in self.conv_shapes())

    def classifier_param_count(self) -> int:
        return self.num_classes * self.in_features + self.num_classes

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "pool": self.pool,
            "convs": [asdict(c) for c in self.convs],
        }


@dataclass
class BetaParams:
    """Personalization layer: classifier weight (classes x features) and bias."""

    W: Tensor
    b: Tensor

    def params(self) -> list[Tensor]:
        return [self.W, self.b]

    def replace(self, params: Sequence[Tensor]) -> "BetaParams":
        return BetaParams(*params)


# Preset channel plans: (conv1 width, group widths, residual blocks per group).
_PRESET_PLANS = {
    "mnist": (1, 16, (16, 32, 64), 1),
    "fmnist": (1, 16, (16, 32, 64), 6),
    "cifar10": (3, 16, (16, 32, 64), 6),
    "cifar100": (3, 32, (32, 64, 128), 6),
}


def _preset_convs(in_channels: int, stem: int, widths: Sequence[int], blocks: int) -> list[ConvSpec]:
    convs = [ConvSpec(in_channels, stem)]
    prev = stem
    for g, width in enumerate(widths):
        for blk in range(blocks):
            stride = 2 if g > 0 and blk == 0 else 1
            convs.append(ConvSpec(prev, width, stride=stride, residual=True))
            convs.append(ConvSpec(width, width))
            prev = width
    return convs


def build_arch(preset: str | Mapping, num_classes: int = 10, in_channels: int | None = None,
               basic: tuple[int, int] | None = None) -> MainNetArch:
    """Build a preset ("desk", "mnist", "fmnist", "cifar10", "cifar100") or an explicit spec.

    An explicit spec is a mapping with ``convs`` (list of dicts with c_in,
    c_out and optionally f, stride, residual) plus ``in_channels`` and
    ``num_classes``. When ``basic=(N_in, N_out)`` is given, every conv is
    checked against the hypernetwork tiling rule.
    """
    if isinstance(preset, Mapping):
        try:
            convs = tuple(ConvSpec(**c) for c in preset["convs"])
            arch = MainNetArch(
                name=str(preset.get("name", "custom")),
                in_channels=int(preset.get("in_channels", convs[0].c_in)),
                convs=convs,
                num_classes=int(preset.get("num_classes", num_classes)),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"invalid explicit architecture spec: {exc}") from None
    elif preset == "desk":
        c = 3 if in_channels is None else in_channels
        arch = MainNetArch("desk", c, (ConvSpec(c, 16), ConvSpec(16, 16), ConvSpec(16, 32, stride=2)),
                           num_classes)
    elif preset in _PRESET_PLANS:
        default_c, stem, widths, blocks = _PRESET_PLANS[preset]
        c = default_c if in_channels is None else in_channels
        arch = MainNetArch(preset, c, tuple(_preset_convs(c, stem, widths, blocks)), num_classes)
    else:
        raise ConfigError(f"unknown architecture preset {preset!r}")
    validate_arch(arch, basic)
    return arch


def validate_arch(arch: MainNetArch, basic: tuple[int, int] | None = None) -> None:
    if not arch.convs:
        raise ConfigError("architecture needs at least one conv layer")
    if arch.num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if arch.convs[0].c_in != arch.in_channels:
        raise ConfigError(f"first conv expects {arch.convs[0].c_in} channels, input has {arch.in_channels}")
    for i, (a, b) in enumerate(zip(arch.convs, arch.convs[1:]), start=1):
        if b.c_in != a.c_out:
            raise ConfigError(f"conv {i} takes {b.c_in} channels but conv {i - 1} emits {a.c_out}")
    for i, conv in enumerate(arch.convs):
        if conv.residual and (i + 1 >= len(arch.convs) or arch.convs[i + 1].residual):
            raise ConfigError(f"residual conv {i} must be followed by a plain conv closing the block")
        if conv.c_out < conv.c_in and conv.residual:
            raise ConfigError(f"residual block at conv {i} cannot shrink channels")
    if basic is not None:
        n_in, n_out = basic
        for i, conv in enumerate(arch.convs):
            if conv.c_out % n_out:
                raise ConfigError(f"conv {i}: C_out={conv.c_out} is not a multiple of basic N_out={n_out}")
            if conv.c_in % n_in and not (i == 0 and conv.c_in < n_in):
                raise ConfigError(f"conv {i}: C_in={conv.c_in} is not a multiple of basic N_in={n_in}")


def init_beta(arch: MainNetArch, rng: np.random.Generator, dtype=np.float64) -> BetaParams:
    bound = 1.0 / math.sqrt(arch.in_features)
    W = rng.uniform(-bound, bound, size=(arch.num_classes, arch.in_features))
    return BetaParams(Tensor(W, requires_grad=True, dtype=dtype, name="beta.W"),
                      Tensor(np.zeros(arch.num_classes), requires_grad=True, dtype=dtype, name="beta.b"))


def init_conv_weights(arch: MainNetArch, rng: np.random.Generator, dtype=np.float64) -> list[Tensor]:
    """He-uniform conv kernels for the baselines that learn theta directly."""
    out = []
    for i, shape in enumerate(arch.conv_shapes()):
        bound = math.sqrt(6.0 / (shape[1] * shape[2] * shape[3]))
        out.append(Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype,
                          name=f"conv{i}"))
    return out


def _shortcut(x: Tensor, stride: int, c_out: int) -> Tensor:
    if stride > 1:
        x = x[:, :, ::stride, ::stride]
    extra = c_out - x.shape[1]
    if extra:
        pad = Tensor(np.zeros((x.shape[0], extra) + x.shape[2:], dtype=x.dtype))
        x = nx.concat([x, pad], axis=1)
    return x


def features(arch: MainNetArch, theta: Sequence[Tensor], images: Tensor) -> Tensor:
    """Conv stack + pooling: N x C x H x W -> N x in_features."""
    if len(theta) != len(arch.convs):
        raise ContractError(f"arch has {len(arch.convs)} conv layers, got {len(theta)} kernels")
    for i, (w, shape) in enumerate(zip(theta, arch.conv_shapes())):
        if w.shape != shape:
            raise ContractError(f"conv {i} kernel has shape {w.shape}, expected {shape}")
    x = images
    block_input, block_stride = None, 1
    for conv, w in zip(arch.convs, theta):
        if conv.residual:
            block_input, block_stride = x, conv.stride
        x = nx.conv2d(x, w, stride=conv.stride, padding=conv.padding)
        if block_input is not None and not conv.residual:
            x = x + _shortcut(block_input, block_stride, conv.c_out)
            block_input = None
        x = nx.relu(x)
    return nx.global_avg_pool(x)


def forward(arch: MainNetArch, theta: Sequence[Tensor], beta: BetaParams, images, labels=None):
    """Return (logits, loss); loss is None when ``labels`` is None."""
    if not isinstance(images, Tensor):
        images = Tensor(images, dtype=beta.W.dtype)
    if images.ndim != 4 or images.shape[1] != arch.in_channels:
        raise ContractError(f"batch shape {images.shape} does not match {arch.in_channels}-channel input")
    logits = nx.linear(features(arch, theta, images), beta.W, beta.b)
    loss = None if labels is None else nx.softmax_cross_entropy(logits, labels)
    return logits, loss


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index.
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(arch: MainNetArch, theta: Sequence[Tensor], beta: BetaParams, images: np.ndarray,
             labels: np.ndarray, batch_size: int = 512) -> float:
    """Top-1 accuracy of the network on (images, labels)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    hits = 0
    for start in range(0, len(labels), batch_size):
        logits, _ = forward(arch, theta, beta, images[start:start + batch_size])
        hits += int(np.sum(np.argmax(logits.data, axis=1) == labels[start:start + batch_size]))
    return hits / len(labels)
