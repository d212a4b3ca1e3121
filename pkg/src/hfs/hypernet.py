"""Shared two-layer linear hypernetwork and conv-weight tiling.

A basic filter F has shape (N_in*f) x (N_out*f). For input-channel row i the
hidden code is ``a_i = W_i v + B_i`` and the output slab is
``W_out a_i + B_out`` (shape f x N_out*f); stacking the N_in slabs gives F.
Larger conv layers are assembled from a grid of basic filters, one embedding
per tile, in row-major (input block, output block) order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor

if TYPE_CHECKING:
    from .mainnet import MainNetArch

PHI_BLOCKS = ("W", "B", "W_out", "B_out")


@dataclass(frozen=True)
class HyperNetConfig:
    n_v: int
    d: int | None = None
    n_in: int = 16
    n_out: int = 16
    f: int = 3

    def __post_init__(self):
        if self.d is None:
            object.__setattr__(self, "d", self.n_v)
        for key in ("n_v", "d", "n_in", "n_out", "f"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"hypernet {key} must be a positive integer, got {value!r}")

    def block_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "W": (self.n_in, self.d, self.n_v),
            "B": (self.n_in, self.d),
            "W_out": (self.f, self.n_out * self.f, self.d),
            "B_out": (self.f, self.n_out * self.f),
        }


def param_count(cfg: HyperNetConfig) -> int:
    """Number of scalars in phi: N_v*d*N_in + d*N_in + f^2*N_out*d + f^2*N_out."""
    f2 = cfg.f * cfg.f
    return cfg.n_v * cfg.d * cfg.n_in + cfg.d * cfg.n_in + f2 * cfg.n_out * cfg.d + f2 * cfg.n_out


@dataclass
class HyperNet:
    """phi = {W_1..W_Nin, B_1..B_Nin, W_out, B_out}.

    The N_in matrices W_i are held as one (N_in, d, N_v) tensor and the
    biases B_i as one (N_in, d) tensor; flattening that layout row-major
    yields exactly the wire order W_1..W_Nin, B_1..B_Nin.
    """

    cfg: HyperNetConfig
    W: Tensor
    B: Tensor
    W_out: Tensor
    B_out: Tensor

    def params(self) -> list[Tensor]:
        return [self.W, self.B, self.W_out, self.B_out]

    def replace(self, params: Sequence[Tensor]) -> "HyperNet":
        return HyperNet(self.cfg, *params)

    def to_vector(self) -> np.ndarray:
        """Flat float64 phi in wire order."""
        return np.concatenate([p.data.astype(np.float64).ravel() for p in self.params()])

    @classmethod
    def from_vector(cls, cfg: HyperNetConfig, vec: np.ndarray, dtype=np.float64) -> "HyperNet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (param_count(cfg),):
            raise ContractError(f"phi vector has {vec.size} entries, config needs {param_count(cfg)}")
        blocks, pos = [], 0
        for name, shape in cfg.block_shapes().items():
            n = math.prod(shape)
            blocks.append(Tensor(vec[pos:pos + n].reshape(shape), requires_grad=True, dtype=dtype, name=name))
            pos += n
        return cls(cfg, *blocks)


def init_hypernet(cfg: HyperNetConfig, seed, dtype=np.float64) -> HyperNet:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = cfg.block_shapes()
    w_bound = 1.0 / math.sqrt(cfg.n_v)
    out_bound = 1.0 / math.sqrt(cfg.d)
    W = rng.uniform(-w_bound, w_bound, size=shapes["W"])
    W_out = rng.uniform(-out_bound, out_bound, size=shapes["W_out"])
    return HyperNet(
        cfg,
        Tensor(W, requires_grad=True, dtype=dtype, name="W"),
        Tensor(np.zeros(shapes["B"]), requires_grad=True, dtype=dtype, name="B"),
        Tensor(W_out, requires_grad=True, dtype=dtype, name="W_out"),
        Tensor(np.zeros(shapes["B_out"]), requires_grad=True, dtype=dtype, name="B_out"),
    )


def serialize_phi(hn: HyperNet) -> bytes:
    """Little-endian float64 bytes of phi in wire order."""
    return hn.to_vector().astype("<f8").tobytes()


def deserialize_phi(cfg: HyperNetConfig, payload: bytes, dtype=np.float64) -> HyperNet:
    return HyperNet.from_vector(cfg, np.frombuffer(payload, dtype="<f8"), dtype=dtype)


# -- generation ----------------------------------------------------------------

def generate_basic_filters(hn: HyperNet, embeddings: Tensor) -> Tensor:
    """Batched generation: (T, N_v) embeddings -> (T, N_in*f, N_out*f) filters."""
    cfg = hn.cfg
    if embeddings.ndim != 2 or embeddings.shape[1] != cfg.n_v:
        raise DimensionError(f"embeddings must be (T, {cfg.n_v}), got {embeddings.shape}")
    hidden = nx.einsum("idn,tn->tid", hn.W, embeddings) + hn.B
    slabs = nx.einsum("tid,abd->tiab", hidden, hn.W_out) + hn.B_out
    t = embeddings.shape[0]
    return slabs.reshape(t, cfg.n_in * cfg.f, cfg.n_out * cfg.f)


def generate_basic_filter(hn: HyperNet, v: Tensor) -> Tensor:
    """One basic filter F in R^{(N_in*f) x (N_out*f)} from one embedding."""
    if v.shape != (hn.cfg.n_v,):
        raise DimensionError(f"embedding must have shape ({hn.cfg.n_v},), got {v.shape}")
    filters = generate_basic_filters(hn, v.reshape(1, hn.cfg.n_v))
    return filters.reshape(filters.shape[1:])


def tile_grid(cfg: HyperNetConfig, c_in: int, c_out: int, first_layer: bool = False) -> tuple[int, int]:
    """(input blocks, output blocks) for a c_in -> c_out conv layer."""
    if c_out % cfg.n_out:
        raise ConfigError(f"conv output channels {c_out} not a multiple of basic N_out={cfg.n_out}")
    if first_layer and c_in < cfg.n_in:
        return 1, c_out // cfg.n_out
    if c_in % cfg.n_in:
        raise ConfigError(f"conv input channels {c_in} not a multiple of basic N_in={cfg.n_in}")
    return c_in // cfg.n_in, c_out // cfg.n_out


def place_tiles(filters: Tensor, cfg: HyperNetConfig, c_in: int, c_out: int, first_layer: bool = False) -> Tensor:
    """Block-place basic filters into a (C_out, C_in, f, f) kernel.

    Tile j = r*cols + c fills rows r*N_in*f.. and columns c*N_out*f.. of the
    big matrix F; the kernel is weight[o, i, a, b] = F[i*f + a, o*f + b].
    """
    rows, cols = tile_grid(cfg, c_in, c_out, first_layer)
    f = cfg.f
    if filters.shape[0] != rows * cols:
        raise ContractError(f"{c_in}->{c_out} layer needs {rows * cols} tiles, got {filters.shape[0]}")
    grid = filters.reshape(rows, cols, cfg.n_in * f, cfg.n_out * f)
    big = grid.transpose(0, 2, 1, 3).reshape(rows * cfg.n_in * f, cols * cfg.n_out * f)
    if rows * cfg.n_in > c_in:
        big = big[: c_in * f]
    return big.reshape(c_in, f, c_out, f).transpose(2, 0, 1, 3)


def assemble_layer(hn: HyperNet, tiles: Tensor | Sequence[Tensor], c_in: int, c_out: int,
                   f: int | None = None, first_layer: bool = False) -> Tensor:
    """Generate one tile per embedding and assemble them into a conv kernel."""
    if f is not None and f != hn.cfg.f:
        raise ConfigError(f"layer kernel size {f} differs from hypernet f={hn.cfg.f}")
    if not isinstance(tiles, Tensor):
        tiles = list(tiles)
        if not tiles:
            raise ContractError("assemble_layer needs at least one tile embedding")
        tiles = nx.concat([t.reshape(1, hn.cfg.n_v) for t in tiles], axis=0)
    return place_tiles(generate_basic_filters(hn, tiles), hn.cfg, c_in, c_out, first_layer)


def layer_tile_counts(cfg: HyperNetConfig, arch: "MainNetArch") -> list[int]:
    counts = []
    for index, conv in enumerate(arch.convs):
        if conv.f != cfg.f:
            raise ConfigError(f"conv layer {index} uses kernel {conv.f}, hypernet generates f={cfg.f}")
        rows, cols = tile_grid(cfg, conv.c_in, conv.c_out, first_layer=index == 0)
        counts.append(rows * cols)
    return counts


def embedding_count(cfg: HyperNetConfig, arch: "MainNetArch") -> int:
    return sum(layer_tile_counts(cfg, arch))


def init_embeddings(cfg: HyperNetConfig, arch: "MainNetArch", rng: np.random.Generator,
                    dtype=np.float64) -> Tensor:
    """Embedding table v_k: one N(0, 1) row per tile, ordered by (layer, tile)."""
    n = embedding_count(cfg, arch)
    return Tensor(rng.standard_normal((n, cfg.n_v)), requires_grad=True, dtype=dtype, name="v")


def generate_theta(hn: HyperNet, table: Tensor, arch: "MainNetArch") -> list[Tensor]:
    """All conv kernels for one client: w_theta = h(v, phi)."""
    counts = layer_tile_counts(hn.cfg, arch)
    if table.shape != (sum(counts), hn.cfg.n_v):
        raise ContractError(
            f"embedding table {table.shape} does not fit architecture {arch.name!r} "
            f"(needs ({sum(counts)}, {hn.cfg.n_v}))")
    filters = generate_basic_filters(hn, table)
    theta, pos = [], 0
    for index, (conv, n) in enumerate(zip(arch.convs, counts)):
        layer = filters if n == filters.shape[0] else filters[pos:pos + n]
        theta.append(place_tiles(layer, hn.cfg, conv.c_in, conv.c_out, first_layer=index == 0))
        pos += n
    return theta
