"""Communication accounting, similarity metrics, PSNR and result files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DomainError, ResultsIOError
from .hypernet import HyperNetConfig, param_count
from .mainnet import MainNetArch

ROUNDS_HEADER = ("round", "client_id", "loss", "n_k", "up_params", "down_params")
ALGORITHMS = ("hfn", "fedavg", "fedprox", "fedper", "local")


@dataclass
class ClientRecord:
    client_id: int
    loss: float
    n_k: int
    up_params: int
    down_params: int


@dataclass
class RoundReport:
    round: int
    selected: list[int]
    clients: list[ClientRecord] = field(default_factory=list)
    wall_time: float = 0.0
    mean_accuracy: float | None = None
    std_accuracy: float | None = None
    seed: int | None = None

    @property
    def cpr(self) -> float:
        """Mean (upload + download) parameters per selected user."""
        if not self.clients:
            return 0.0
        return sum(c.up_params + c.down_params for c in self.clients) / len(self.clients)

    @property
    def transmitted(self) -> int:
        return sum(c.up_params + c.down_params for c in self.clients)

    @property
    def mean_loss(self) -> float:
        losses = [c.loss for c in self.clients if not math.isnan(c.loss)]
        return float(np.mean(losses)) if losses else float("nan")


def cpr(alg: str, hypernet: HyperNetConfig | None = None, arch: MainNetArch | None = None) -> int:
    """Parameters one user sends plus receives in one round."""
    if alg == "hfn":
        if hypernet is None:
            raise ConfigError("HFN cost needs a hypernet config")
        return 2 * param_count(hypernet)
    if alg == "local":
        return 0
    if arch is None:
        raise ConfigError(f"{alg} cost needs a main-network architecture")
    if alg in ("fedavg", "fedprox"):
        return 2 * (arch.conv_param_count() + arch.classifier_param_count())
    if alg == "fedper":
        return 2 * arch.conv_param_count()
    raise ConfigError(f"unknown algorithm {alg!r}")


def cosine_similarity_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    X = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in vectors])
    if X.ndim != 2:
        raise ContractError("similarity needs equal-length vectors")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise DomainError(f"zero vector at position {int(np.argmin(norms))}")
    U = X / norms[:, None]
    M = np.clip(U @ U.T, -1.0, 1.0)
    M = (M + M.T) / 2.0
    np.fill_diagonal(M, 1.0)
    return M


def group_similarity_gap(M: np.ndarray, groups: Sequence[int]) -> tuple[float, float]:
    """(mean same-group off-diagonal similarity, mean cross-group similarity)."""
    groups = np.asarray(groups)
    if M.shape != (len(groups), len(groups)):
        raise ContractError(f"matrix {M.shape} does not match {len(groups)} group labels")
    same = groups[:, None] == groups[None, :]
    off = ~np.eye(len(groups), dtype=bool)
    intra, inter = M[same & off], M[~same]
    if intra.size == 0:
        raise DomainError("every group is a singleton; no intra-group pairs")
    if inter.size == 0:
        raise DomainError("only one group; no inter-group pairs")
    return float(intra.mean()), float(inter.mean())


def psnr(a, b, peak: float = 255.0) -> float:
    """20*log10(peak/sqrt(MSE)); identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / math.sqrt(mse))


# -- result files ---------------------------------------------------------------

class ResultsWriter:
    """Incremental writer for rounds.csv; each round is flushed on append."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.out_dir / "rounds.csv", "w", newline="")
        except OSError as exc:
            raise ResultsIOError(f"{self.out_dir}: {exc.strerror}") from None
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(ROUNDS_HEADER)
        self._fh.flush()

    def append(self, report: RoundReport) -> None:
        for c in report.clients:
            self._csv.writerow([report.round, c.client_id, repr(float(c.loss)), c.n_k, c.up_params, c.down_params])
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path: str | Path, payload: dict) -> None:
    try:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    except OSError as exc:
        raise ResultsIOError(f"{path}: {exc.strerror}") from None


def write_similarity(path: str | Path, M: np.ndarray) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["client"] + [str(j) for j in range(len(M))])
            for i, row in enumerate(M):
                w.writerow([i] + [f"{x:.10f}" for x in row])
    except OSError as exc:
        raise ResultsIOError(f"{path}: {exc.strerror}") from None


def write_dat(path: str | Path, rows: Iterable[Sequence], header: str | None = None) -> None:
    """Whitespace-separated columns, gnuplot style."""
    try:
        with open(path, "w") as fh:
            if header:
                fh.write(f"# {header}\n")
            for row in rows:
                fh.write(" ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in row) + "\n")
    except OSError as exc:
        raise ResultsIOError(f"{path}: {exc.strerror}") from None


def write_results(reports: Sequence[RoundReport], summary: dict, out_dir: str | Path,
                  similarity: np.ndarray | None = None) -> None:
    """Write rounds.csv, summary.json, accuracy.dat and optionally similarity.csv."""
    with ResultsWriter(out_dir) as writer:
        for report in reports:
            writer.append(report)
    out = Path(out_dir)
    write_json(out / "summary.json", summary)
    write_dat(out / "accuracy.dat",
              [(r.round, r.mean_accuracy) for r in reports if r.mean_accuracy is not None],
              header="round mean_personalized_accuracy")
    if similarity is not None:
        write_similarity(out / "similarity.csv", similarity)


def read_rounds(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"round": int(r["round"]), "client_id": int(r["client_id"]), "loss": float(r["loss"]),
             "n_k": int(r["n_k"]), "up_params": int(r["up_params"]), "down_params": int(r["down_params"])}
            for r in rows]


def report_to_dict(report: RoundReport) -> dict:
    d = asdict(report)
    d["cpr"] = report.cpr
    return d
