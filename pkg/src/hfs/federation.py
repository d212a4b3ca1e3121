"""HFN round protocol, baseline algorithms and the experiment driver.

Each round the server samples m = max(floor(C*K), 1) clients, ships them the
current hypernetwork phi, and averages the returned copies weighted by local
sample counts. Clients regenerate their conv weights h(v, phi) on the tape
for every batch and update phi, their embeddings v and their head beta
jointly. Only phi ever leaves a client.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import analysis, data as datamod
from . import numerics as nx
from .config import RunConfig
from .errors import ConfigError, ContractError, HFSError, InvariantError, NumericError
from .hypernet import (PHI_BLOCKS, HyperNet, HyperNetConfig, generate_theta, init_embeddings,
                       init_hypernet, param_count)
from .mainnet import (BetaParams, MainNetArch, build_arch, evaluate, forward, init_beta,
                      init_conv_weights)
from .numerics import Tensor

log = logging.getLogger(__name__)


# -- seeding ----------------------------------------------------------------------

def substream(master: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named component, keyed by e.g. (round, client)."""
    seq = np.random.SeedSequence(entropy=master, spawn_key=(zlib.crc32(name.encode()), *keys))
    return np.random.default_rng(seq)


# -- optimizer ----------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerSpec:
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    batch_size: int = 128
    local_epochs: int = 4
    schedule: str = "fixed"
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"invalid optimizer settings lr={self.lr}, momentum={self.momentum}")

    def lr_at(self, round_t: int) -> float:
        if self.schedule == "fixed":
            return self.lr
        return self.lr * self.gamma ** sum(1 for m in self.milestones if round_t > m)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "OptimizerSpec":
        milestones = tuple(cfg.lr_milestones)
        if cfg.lr_schedule == "multistep" and not milestones:
            milestones = (max(cfg.rounds // 2, 1), max(3 * cfg.rounds // 4, 1))
        return cls(cfg.lr, cfg.momentum, cfg.nesterov, cfg.weight_decay, cfg.batch_size, cfg.local_epochs,
                   cfg.lr_schedule, milestones, cfg.lr_gamma)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray | None],
             spec: OptimizerSpec, lr: float | None = None, context: str = "") -> tuple[list[Tensor], list[np.ndarray]]:
    """One SGD step with weight decay and (Nesterov) momentum.

    g' = g + wd*p;  u <- mu*u + g';  p <- p - lr*(g' + mu*u)   (Nesterov)
                                     p <- p - lr*u             (classical)
    """
    lr = spec.lr if lr is None else lr
    mu, wd = spec.momentum, spec.weight_decay
    new_params, new_vel = [], []
    for p, g, u in zip(params, grads, velocity):
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient{' for ' + context if context else ''}")
        g = g + wd * p.data if wd else g
        u = mu * u + g if u is not None else g
        step = g + mu * u if spec.nesterov else u
        new_params.append(Tensor._wrap(p.data - lr * step, True))
        new_vel.append(u)
    return new_params, new_vel


# -- client and server state ---------------------------------------------------------

@dataclass
class ClientState:
    """One user's private state; nothing here is ever transmitted except via Payload."""

    cid: int
    data: datamod.Dataset
    train_idx: np.ndarray
    test_idx: np.ndarray
    beta: BetaParams
    embeddings: Tensor | None = None
    conv: list[Tensor] | None = None
    velocity: dict[str, list] = field(default_factory=dict)

    @property
    def n_k(self) -> int:
        return len(self.train_idx)


@dataclass
class ServerState:
    t: int
    phi: HyperNet | None = None
    weights: np.ndarray | None = None


@dataclass
class Payload:
    """Flat float64 vector plus the provenance of each segment."""

    data: np.ndarray
    segments: tuple[tuple[str, int, int], ...] = ()

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def sources(self) -> set[str]:
        return {tag for tag, _, _ in self.segments}

    def to_bytes(self) -> bytes:
        return self.data.astype("<f8").tobytes()

    @classmethod
    def pack(cls, named: Sequence[tuple[str, Tensor]]) -> "Payload":
        parts, segments, pos = [], [], 0
        for tag, t in named:
            parts.append(t.data.astype(np.float64).ravel())
            segments.append((tag, pos, pos + t.size))
            pos += t.size
        vec = np.concatenate(parts) if parts else np.zeros(0)
        return cls(vec, tuple(segments))


EMPTY = Payload(np.zeros(0))


def phi_payload(phi: HyperNet) -> Payload:
    return Payload.pack([(f"phi.{name}", p) for name, p in zip(PHI_BLOCKS, phi.params())])


def audit_hfn_payload(payload: Payload, cfg: HyperNetConfig) -> None:
    """Size equals |phi| and every byte is tagged as hypernetwork content."""
    allowed = {f"phi.{name}" for name in PHI_BLOCKS}
    if not payload.sources <= allowed:
        raise InvariantError(f"payload carries non-phi content: {sorted(payload.sources - allowed)}")
    covered = sum(stop - start for _, start, stop in payload.segments)
    if payload.size != param_count(cfg) or covered != payload.size or len(payload.to_bytes()) != 8 * payload.size:
        raise InvariantError(f"payload has {payload.size} values, hypernet has {param_count(cfg)}")


@dataclass
class LocalReport:
    client_id: int
    epoch_losses: list[float]
    n_k: int
    skipped: bool = False

    @property
    def loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def select_clients(K: int, C: float, rng: np.random.Generator) -> list[int]:
    """m = max(floor(C*K), 1) distinct clients, sorted ascending."""
    if K < 1 or not 0 < C <= 1:
        raise ConfigError(f"need K >= 1 and 0 < C <= 1, got K={K}, C={C}")
    m = max(math.floor(round(C * K, 9)), 1)
    return sorted(int(k) for k in rng.choice(K, size=m, replace=False))


def aggregate(payloads: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted coordinate-wise mean, reduced in the order given.

    Written as p_0 + sum_k w_k/W (p_k - p_0) so identical payloads come back
    bit-for-bit.
    """
    if not payloads:
        raise ContractError("aggregate needs at least one payload")
    if len(payloads) != len(weights):
        raise ContractError(f"{len(payloads)} payloads but {len(weights)} weights")
    arrays = [np.asarray(p, dtype=np.float64) for p in payloads]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ContractError(f"payload lengths differ: {sorted({a.size for a in arrays})}")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ContractError("aggregation weights must be positive")
    total = w.sum()
    base = arrays[0]
    acc = np.zeros_like(base)
    for a, wk in zip(arrays[1:], w[1:]):
        acc += (wk / total) * (a - base)
    return base + acc


def _batches(idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(idx)
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


# -- local updates ------------------------------------------------------------------

def client_update_hfn(client: ClientState, phi: HyperNet, arch: MainNetArch, spec: OptimizerSpec,
                      rng: np.random.Generator, lr: float | None = None) -> tuple[HyperNet, ClientState, LocalReport]:
    """Local training of (phi, v, beta); returns the updated phi copy and client state."""
    if client.n_k == 0:
        log.warning("client %d has no training data; skipping update", client.cid)
        return phi, client, LocalReport(client.cid, [], 0, skipped=True)
    lr = spec.lr if lr is None else lr
    params = phi.params() + client.beta.params() + [client.embeddings]
    velocity = [None] * 4 + client.velocity.get("beta", [None, None]) + client.velocity.get("v", [None])
    images, labels = client.data.images, client.data.labels
    dtype = client.beta.W.dtype
    epoch_losses = []
    for _ in range(spec.local_epochs):
        losses, counts = [], []
        for batch in _batches(client.train_idx, spec.batch_size, rng):
            with nx.Tape() as tape:
                hn = phi.replace(params[:4])
                theta = generate_theta(hn, params[6], arch)
                _, loss = forward(arch, theta, BetaParams(params[4], params[5]),
                                  Tensor(images[batch], dtype=dtype), labels[batch])
            grads = nx.backward(tape, loss)
            params, velocity = sgd_step(params, [grads[p] for p in params], velocity, spec, lr,
                                        context=f"client {client.cid}")
            losses.append(loss.item())
            counts.append(len(batch))
        epoch_losses.append(float(np.average(losses, weights=counts)))
    new_client = dataclasses.replace(
        client, beta=BetaParams(params[4], params[5]), embeddings=params[6],
        velocity={"beta": velocity[4:6], "v": velocity[6:7]})
    return phi.replace(params[:4]), new_client, LocalReport(client.cid, epoch_losses, client.n_k)


def _unflatten(vec: np.ndarray, shapes: Sequence[tuple[int, ...]], dtype) -> list[Tensor]:
    out, pos = [], 0
    for shape in shapes:
        n = math.prod(shape)
        out.append(Tensor(vec[pos:pos + n].reshape(shape), requires_grad=True, dtype=dtype))
        pos += n
    if pos != vec.size:
        raise ContractError(f"global payload has {vec.size} values, model needs {pos}")
    return out


def baseline_shapes(alg: str, arch: MainNetArch) -> list[tuple[int, ...]]:
    shapes = [tuple(s) for s in arch.conv_shapes()]
    if alg in ("fedavg", "fedprox"):
        shapes += [(arch.num_classes, arch.in_features), (arch.num_classes,)]
    return shapes if alg != "local" else []


def client_update_baseline(alg: str, client: ClientState, w_global: np.ndarray | None, arch: MainNetArch,
                           spec: OptimizerSpec, rng: np.random.Generator, mu_prox: float = 0.0,
                           lr: float | None = None) -> tuple[Payload, ClientState, LocalReport]:
    """FedAvg / FedProx / FedPer / Local local training; returns the upload payload."""
    if alg not in ("fedavg", "fedprox", "fedper", "local"):
        raise ConfigError(f"unknown baseline algorithm {alg!r}")
    dtype = client.beta.W.dtype
    n_conv = len(arch.convs)
    if alg in ("fedavg", "fedprox"):
        received = _unflatten(w_global, baseline_shapes(alg, arch), dtype)
        conv, beta = received[:n_conv], received[n_conv:]
        velocity = [None] * (n_conv + 2)
    elif alg == "fedper":
        conv = _unflatten(w_global, baseline_shapes(alg, arch), dtype)
        beta = client.beta.params()
        velocity = [None] * n_conv + client.velocity.get("beta", [None, None])
    else:
        conv, beta = list(client.conv), client.beta.params()
        velocity = client.velocity.get("conv", [None] * n_conv) + client.velocity.get("beta", [None, None])
    if client.n_k == 0:
        log.warning("client %d has no training data; skipping update", client.cid)
        report = LocalReport(client.cid, [], 0, skipped=True)
        return EMPTY, client, report

    anchor = [Tensor._wrap(p.data, False) for p in conv + beta] if alg == "fedprox" else None
    lr = spec.lr if lr is None else lr
    params = conv + beta
    images, labels = client.data.images, client.data.labels
    epoch_losses = []
    for _ in range(spec.local_epochs):
        losses, counts = [], []
        for batch in _batches(client.train_idx, spec.batch_size, rng):
            with nx.Tape() as tape:
                _, loss = forward(arch, params[:n_conv], BetaParams(*params[n_conv:]),
                                  Tensor(images[batch], dtype=dtype), labels[batch])
                if anchor is not None:
                    prox = sum(((p - a) * (p - a)).sum() for p, a in zip(params, anchor))
                    loss = loss + prox * (mu_prox / 2.0)
            grads = nx.backward(tape, loss)
            params, velocity = sgd_step(params, [grads[p] for p in params], velocity, spec, lr,
                                        context=f"client {client.cid}")
            losses.append(loss.item())
            counts.append(len(batch))
        epoch_losses.append(float(np.average(losses, weights=counts)))

    conv, beta = params[:n_conv], params[n_conv:]
    new_velocity = {"beta": velocity[n_conv:]}
    if alg == "local":
        new_velocity["conv"] = velocity[:n_conv]
    new_client = dataclasses.replace(client, conv=conv, beta=BetaParams(*beta), velocity=new_velocity)
    if alg in ("fedavg", "fedprox"):
        payload = Payload.pack([(f"conv{i}", t) for i, t in enumerate(conv)]
                               + [("classifier.W", beta[0]), ("classifier.b", beta[1])])
    elif alg == "fedper":
        payload = Payload.pack([(f"conv{i}", t) for i, t in enumerate(conv)])
    else:
        payload = EMPTY
    return payload, new_client, LocalReport(client.cid, epoch_losses, client.n_k)


# -- deployment and fine-tuning --------------------------------------------------------

def deployed_theta(alg: str, client: ClientState, arch: MainNetArch, phi: HyperNet | None = None,
                   w_global: np.ndarray | None = None) -> tuple[list[Tensor], BetaParams]:
    """The (conv weights, head) a client would use for inference right now."""
    dtype = client.beta.W.dtype
    if alg == "hfn":
        return [t.detach() for t in generate_theta(phi, client.embeddings, arch)], client.beta
    if alg in ("fedavg", "fedprox"):
        received = _unflatten(w_global, baseline_shapes(alg, arch), dtype)
        return received[:len(arch.convs)], BetaParams(*received[len(arch.convs):])
    if alg == "fedper":
        return _unflatten(w_global, baseline_shapes(alg, arch), dtype), client.beta
    return list(client.conv), client.beta


def client_accuracy(client: ClientState, arch: MainNetArch, theta: Sequence[Tensor], beta: BetaParams) -> float | None:
    if len(client.test_idx) == 0:
        return None
    return evaluate(arch, theta, beta, client.data.images[client.test_idx], client.data.labels[client.test_idx])


def fine_tune(client: ClientState, source: HyperNet | Sequence[Tensor], arch: MainNetArch, spec: OptimizerSpec,
              epochs: int = 4, rng: np.random.Generator | None = None, beta: BetaParams | None = None,
              tune_embeddings: bool = False, lr: float | None = None) -> tuple[float | None, ClientState]:
    """Adapt the head to deployed conv weights, then return personalized test accuracy.

    ``source`` is the final hypernetwork (HFN) or the deployed conv kernels
    (baselines). Conv weights and phi stay frozen; with ``tune_embeddings``
    the HFN embeddings are updated alongside beta.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    lr = spec.lr if lr is None else lr
    beta = beta or client.beta
    is_hfn = isinstance(source, HyperNet)
    frozen_phi = source.replace([p.detach() for p in source.params()]) if is_hfn else None
    if is_hfn:
        theta = [t.detach() for t in generate_theta(frozen_phi, client.embeddings, arch)]
    else:
        theta = [t.detach() for t in source]
    params = beta.params()
    velocity = client.velocity.get("beta", [None, None]) if beta is client.beta else [None, None]
    if is_hfn and tune_embeddings:
        params = params + [client.embeddings]
        velocity = velocity + client.velocity.get("v", [None])
    images, labels = client.data.images, client.data.labels
    dtype = beta.W.dtype
    for _ in range(epochs if client.n_k else 0):
        for batch in _batches(client.train_idx, spec.batch_size, rng):
            with nx.Tape() as tape:
                if is_hfn and tune_embeddings:
                    theta = generate_theta(frozen_phi, params[2], arch)
                _, loss = forward(arch, theta, BetaParams(params[0], params[1]),
                                  Tensor(images[batch], dtype=dtype), labels[batch])
            grads = nx.backward(tape, loss)
            params, velocity = sgd_step(params, [grads[p] for p in params], velocity, spec, lr,
                                        context=f"client {client.cid} fine-tune")
    if is_hfn and tune_embeddings:
        theta = [t.detach() for t in generate_theta(frozen_phi, params[2], arch)]
        client = dataclasses.replace(client, embeddings=params[2])
    new_beta = BetaParams(params[0], params[1])
    client = dataclasses.replace(client, beta=new_beta)
    return client_accuracy(client, arch, theta, new_beta), client


# -- experiment driver --------------------------------------------------------------------

@dataclass
class Setup:
    cfg: RunConfig
    dataset: datamod.Dataset
    partition: datamod.Partition
    arch: MainNetArch
    hypernet: HyperNetConfig | None
    spec: OptimizerSpec
    dtype: type


@dataclass
class ExperimentResult:
    reports: list[analysis.RoundReport]
    summary: dict
    clients: list[ClientState]
    server: ServerState
    setup: Setup


def build_dataset(cfg: RunConfig) -> datamod.Dataset:
    ds = cfg.dataset
    if ds.kind == "idx":
        return datamod.load_idx(ds.images, ds.labels)
    return datamod.synth_task(ds.num_classes, ds.samples_per_class, ds.image_size, ds.noise_sigma,
                              np.random.SeedSequence(cfg.seed, spawn_key=(zlib.crc32(b"data"),)),
                              channels=ds.channels)


def build_partition(cfg: RunConfig, dataset: datamod.Dataset) -> datamod.Partition:
    p = cfg.partition
    seed = np.random.SeedSequence(cfg.seed, spawn_key=(zlib.crc32(b"partition"),))
    if p.kind == "group":
        part = datamod.group_partition(dataset, p.num_groups, p.clients_per_group, p.classes_per_client, seed)
    else:
        part = datamod.dirichlet_partition(dataset, cfg.clients, p.alpha, seed)
    split_seed = np.random.SeedSequence(cfg.seed, spawn_key=(zlib.crc32(b"split"),))
    part = datamod.split_train_test(part, cfg.train_ratio, split_seed)
    part.audit()
    return part


def prepare(cfg: RunConfig, dataset: datamod.Dataset | None = None,
            partition: datamod.Partition | None = None) -> Setup:
    dataset = dataset if dataset is not None else build_dataset(cfg)
    partition = partition if partition is not None else build_partition(cfg, dataset)
    if partition.num_clients != cfg.clients:
        raise ConfigError(f"partition has {partition.num_clients} clients but config key 'clients' is {cfg.clients}")
    hcfg = None
    basic = None
    if cfg.algorithm == "hfn":
        hcfg = HyperNetConfig(cfg.embedding_size, cfg.hidden_size, cfg.basic_in, cfg.basic_out, cfg.kernel_size)
        basic = (cfg.basic_in, cfg.basic_out)
    arch = build_arch(cfg.arch, dataset.num_classes, in_channels=dataset.channels, basic=basic)
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    return Setup(cfg, dataset, partition, arch, hcfg, OptimizerSpec.from_config(cfg), dtype)


def init_state(setup: Setup) -> tuple[ServerState, list[ClientState]]:
    cfg, arch = setup.cfg, setup.arch
    server = ServerState(t=0)
    init_rng = substream(cfg.seed, "init")
    if cfg.algorithm == "hfn":
        server.phi = init_hypernet(setup.hypernet, init_rng, dtype=setup.dtype)
    elif cfg.algorithm != "local":
        conv = init_conv_weights(arch, init_rng, dtype=setup.dtype)
        named = conv + init_beta(arch, init_rng, dtype=setup.dtype).params() if cfg.algorithm != "fedper" else conv
        server.weights = np.concatenate([t.data.astype(np.float64).ravel() for t in named])
    # With "shared", every client starts from one N(0, 1) table (so all start
    # from the same theta) and the tables drift apart through local training.
    shared_table = None
    if cfg.algorithm == "hfn" and cfg.embedding_init == "shared":
        shared_table = init_embeddings(setup.hypernet, arch, substream(cfg.seed, "embedding-init"), dtype=setup.dtype)
    clients = []
    for k in range(cfg.clients):
        rng = substream(cfg.seed, "client-init", k)
        beta = init_beta(arch, rng, dtype=setup.dtype)
        client = ClientState(k, setup.dataset, setup.partition.train[k], setup.partition.test[k], beta)
        if cfg.algorithm == "hfn":
            client.embeddings = shared_table if shared_table is not None else init_embeddings(
                setup.hypernet, arch, rng, dtype=setup.dtype)
        elif cfg.algorithm == "local":
            client.conv = init_conv_weights(arch, rng, dtype=setup.dtype)
        clients.append(client)
    return server, clients


def _evaluate_all(setup: Setup, server: ServerState, clients: Sequence[ClientState]) -> list[float | None]:
    out = []
    for c in clients:
        theta, beta = deployed_theta(setup.cfg.algorithm, c, setup.arch, server.phi, server.weights)
        out.append(client_accuracy(c, setup.arch, theta, beta))
    return out


def _stats(values: Sequence[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def code_hash() -> str:
    """git-style content hash over the package sources."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        blob = path.read_bytes()
        h.update(f"{path.name} blob {len(blob)}\0".encode() + blob)
    return h.hexdigest()


def _local_step(setup: Setup, server: ServerState, client: ClientState, t: int, lr: float):
    cfg = setup.cfg
    rng = substream(cfg.seed, "batching", t, client.cid)
    if cfg.algorithm == "hfn":
        phi_k, new_client, report = client_update_hfn(client, server.phi, setup.arch, setup.spec, rng, lr)
        return phi_payload(phi_k), new_client, report
    mu = cfg.prox_mu if cfg.algorithm == "fedprox" else 0.0
    return client_update_baseline(cfg.algorithm, client, server.weights, setup.arch, setup.spec, rng, mu, lr)


def run_experiment(cfg: RunConfig, parallel: int = 1, out_dir: str | Path | None = None,
                   dataset: datamod.Dataset | None = None, partition: datamod.Partition | None = None,
                   on_round: Callable[[analysis.RoundReport], None] | None = None) -> ExperimentResult:
    """Run T rounds, then fine-tune and evaluate every client.

    Client updates in a round are independent and may run on ``parallel``
    threads; results are committed in ascending client id, so the outcome
    does not depend on the degree of parallelism.
    """
    setup = prepare(cfg, dataset, partition)
    server, clients = init_state(setup)
    alg = cfg.algorithm
    per_user_cpr = analysis.cpr(alg, setup.hypernet, setup.arch)
    down_size = 0 if alg == "local" else (param_count(setup.hypernet) if alg == "hfn" else int(server.weights.size))

    writer = analysis.ResultsWriter(out_dir) if out_dir is not None else None
    if writer is not None:
        _write_manifest(Path(out_dir), cfg, per_user_cpr, [])
    init_acc = _evaluate_all(setup, server, clients)
    reports: list[analysis.RoundReport] = []
    pool = ThreadPoolExecutor(max_workers=parallel) if parallel > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            started = time.perf_counter()
            selected = select_clients(cfg.clients, cfg.join_rate, substream(cfg.seed, "selection", t))
            lr = setup.spec.lr_at(t)
            jobs = [(k, clients[k]) for k in selected]

            def work(job, t=t, lr=lr):
                k, client = job
                try:
                    return _local_step(setup, server, client, t, lr)
                except HFSError as exc:
                    raise type(exc)(f"round {t}, client {k}: {exc}") from exc

            results = list(pool.map(work, jobs)) if pool else [work(j) for j in jobs]
            records, payloads, weights = [], [], []
            for k, (payload, new_client, rep) in zip(selected, results):
                clients[k] = new_client
                if rep.skipped:
                    records.append(analysis.ClientRecord(k, float("nan"), 0, 0, down_size))
                    continue
                if alg == "hfn":
                    audit_hfn_payload(payload, setup.hypernet)
                records.append(analysis.ClientRecord(k, rep.loss, rep.n_k, payload.size, down_size))
                if payload.size:
                    payloads.append(payload.data)
                    weights.append(rep.n_k)
            if payloads:
                merged = aggregate(payloads, weights)
                if not np.all(np.isfinite(merged)):
                    raise NumericError(f"round {t}: aggregated parameters are not finite")
                if alg == "hfn":
                    server.phi = HyperNet.from_vector(setup.hypernet, merged, dtype=setup.dtype)
                else:
                    server.weights = merged
            server.t = t
            report = analysis.RoundReport(t, selected, records, time.perf_counter() - started)
            if cfg.eval_every and t % cfg.eval_every == 0:
                report.mean_accuracy, report.std_accuracy = _stats(_evaluate_all(setup, server, clients))
            reports.append(report)
            if writer is not None:
                writer.append(report)
            if on_round is not None:
                on_round(report)
    except Exception:
        if writer is not None:
            writer.close()
            analysis.write_json(Path(out_dir) / "summary.json",
                                {"status": "failed", "rounds_completed": len(reports), "config": cfg.to_dict()})
        raise
    finally:
        if pool is not None:
            pool.shutdown()

    pre_acc = _evaluate_all(setup, server, clients)
    final_acc = []
    ft_lr = setup.spec.lr_at(max(cfg.rounds, 1))
    for k, c in enumerate(clients):
        theta, beta = deployed_theta(alg, c, setup.arch, server.phi, server.weights)
        source = server.phi if alg == "hfn" else theta
        acc, clients[k] = fine_tune(c, source, setup.arch, setup.spec, cfg.fine_tune_epochs,
                                    substream(cfg.seed, "finetune", k), beta=beta,
                                    tune_embeddings=cfg.fine_tune_embeddings, lr=ft_lr)
        final_acc.append(acc)

    summary = _summary(cfg, setup, reports, init_acc, pre_acc, final_acc, per_user_cpr)
    if writer is not None:
        writer.close()
        analysis.write_json(Path(out_dir) / "summary.json", summary)
        analysis.write_dat(Path(out_dir) / "accuracy.dat",
                           [(r.round, r.mean_accuracy) for r in reports if r.mean_accuracy is not None],
                           header="round mean_personalized_accuracy")
        _write_manifest(Path(out_dir), cfg, per_user_cpr, reports)
    return ExperimentResult(reports, summary, clients, server, setup)


def _summary(cfg, setup, reports, init_acc, pre_acc, final_acc, per_user_cpr) -> dict:
    mean_init, _ = _stats(init_acc)
    mean_pre, _ = _stats(pre_acc)
    mean_final, std_final = _stats(final_acc)
    return {
        "status": "ok",
        "algorithm": cfg.algorithm,
        "rounds": cfg.rounds,
        "cpr": per_user_cpr,
        "measured_cpr": [r.cpr for r in reports],
        "cumulative_params": int(sum(r.transmitted for r in reports)),
        "init_accuracy": init_acc,
        "pre_finetune_accuracy": pre_acc,
        "final_accuracy": final_acc,
        "mean_init_accuracy": mean_init,
        "mean_pre_finetune_accuracy": mean_pre,
        "mean_final_accuracy": mean_final,
        "std_final_accuracy": std_final,
        "train_loss_by_round": [r.mean_loss for r in reports],
        "n_k": [len(t) for t in setup.partition.train],
        "config": cfg.to_dict(),
    }


def _write_manifest(out: Path, cfg: RunConfig, per_user_cpr: int, reports) -> None:
    analysis.write_json(out / "manifest.json", {
        "config": cfg.to_dict(),
        "master_seed": cfg.seed,
        "substreams": ["data", "partition", "split", "init", "embedding-init", "client-init/k", "selection/t",
                       "batching/t/k", "finetune/k"],
        "code_hash": code_hash(),
        "cpr_formula": per_user_cpr,
        "cpr_by_round": [r.cpr for r in reports],
    })


def client_theta_vectors(result: ExperimentResult) -> list[np.ndarray]:
    """Flattened deployed conv weights of every client after training."""
    setup, server = result.setup, result.server
    out = []
    for c in result.clients:
        theta, _ = deployed_theta(setup.cfg.algorithm, c, setup.arch, server.phi, server.weights)
        out.append(np.concatenate([t.data.astype(np.float64).ravel() for t in theta]))
    return out


def lr_sweep(cfg: RunConfig, candidates: Sequence[float | str] = (0.1, 0.01, 0.001, "multistep"),
             **kwargs) -> dict:
    """Run ``cfg`` once per learning-rate setting; "multistep" decays from 0.1."""
    results = {}
    for cand in candidates:
        if cand == "multistep":
            trial = dataclasses.replace(cfg, lr=0.1, lr_schedule="multistep")
        else:
            trial = dataclasses.replace(cfg, lr=float(cand), lr_schedule="fixed")
        results[str(cand)] = run_experiment(trial, **kwargs).summary["mean_final_accuracy"]
    best = max(results, key=lambda k: -1 if results[k] is None else results[k])
    return {"results": results, "best": best}


def composition_gradient_check(seed: int = 0, embedding_size: int = 4, samples: int = 240,
                               batch: int = 4, num_classes: int = 4) -> dict:
    """Finite-difference check of loss(forward(arch, h(v, phi), beta, batch)) on the desk arch.

    Coordinates are drawn across phi, v and beta. Parameters are random but
    scaled down so no ReLU sits within a finite-difference step of its kink
    with meaningful probability.
    """
    rng = substream(seed, "gradcheck")
    hcfg = HyperNetConfig(embedding_size)
    arch = build_arch("desk", num_classes=num_classes, basic=(hcfg.n_in, hcfg.n_out))
    ds = datamod.synth_task(num_classes, batch, 8, 0.3, seed=int(rng.integers(2**31)))
    images, labels = ds.images[:batch], ds.labels[:batch]
    phi = init_hypernet(hcfg, rng)
    phi = phi.replace([Tensor(p.data + 0.05 * rng.standard_normal(p.shape), requires_grad=True)
                       for p in phi.params()])
    table = init_embeddings(hcfg, arch, rng)
    beta = init_beta(arch, rng)
    beta = beta.replace([Tensor(p.data + 0.1 * rng.standard_normal(p.shape), requires_grad=True)
                         for p in beta.params()])
    params = phi.params() + [table] + beta.params()

    def loss_fn(W, B, W_out, B_out, v, bW, bb):
        theta = generate_theta(HyperNet(hcfg, W, B, W_out, B_out), v, arch)
        return forward(arch, theta, BetaParams(bW, bb), images, labels)[1]

    err = nx.gradient_check(loss_fn, params, samples=samples, seed=seed)
    return {"max_relative_error": err, "samples": samples, "embedding_size": embedding_size,
            "parameters": int(sum(p.size for p in params)), "seed": seed}
