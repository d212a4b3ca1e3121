"""Command-line entry point: ``hfs <subcommand> [--config FILE] [overrides]``.

Exit codes: 0 success, 1 unexpected simulator error, 2 config, 3 data format
or partition, 4 numeric, 5 results I/O, 6 failed invariant or tolerance,
7 shape/contract violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, federation
from .config import RunConfig, default_config_text, parse_config, validate
from .errors import ConfigError, HFSError, InvariantError, ResultsIOError
from .hypernet import HyperNetConfig

log = logging.getLogger("hfs")


def _setup_logging() -> None:
    level_name = os.environ.get("HFS_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        raise ConfigError(f"HFS_LOG must be a logging level name (DEBUG, INFO, WARNING, ERROR), got {level_name!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def load_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied."""
    cfg = parse_config(args.config) if args.config else RunConfig()
    overrides = {"seed": args.seed, "algorithm": args.algorithm, "rounds": args.rounds,
                 "embedding_size": args.embedding_size, "out_dir": args.out}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    validate(cfg)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ResultsIOError(f"{out}: {exc.strerror}") from None
    return out


# -- subcommands --------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)

    def progress(report):
        log.info("round %d: %d clients, mean loss %.4f, cpr %d", report.round, len(report.clients),
                 report.mean_loss, report.cpr)

    result = federation.run_experiment(cfg, parallel=args.parallel, out_dir=out, on_round=progress)
    s = result.summary
    print(f"algorithm={cfg.algorithm} rounds={cfg.rounds} cpr={s['cpr']} "
          f"cumulative_params={s['cumulative_params']}")
    print(f"mean accuracy: init={_fmt(s['mean_init_accuracy'])} "
          f"before fine-tune={_fmt(s['mean_pre_finetune_accuracy'])} final={_fmt(s['mean_final_accuracy'])}")
    print(f"results written to {out}")
    return 0


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def cmd_sweep_embedding(args) -> int:
    base = load_config(args)
    out = _out_dir(base)
    rows = []
    for n_v in args.sizes:
        cfg = dataclasses.replace(base, embedding_size=n_v, out_dir=str(out / f"nv_{n_v}"))
        validate(cfg)
        summary = federation.run_experiment(cfg, parallel=args.parallel, out_dir=cfg.out_dir).summary
        cost = analysis.cpr(cfg.algorithm, HyperNetConfig(n_v, cfg.hidden_size, cfg.basic_in, cfg.basic_out,
                                                          cfg.kernel_size), _arch_for(cfg))
        acc = summary["mean_final_accuracy"]
        rows.append((n_v, cost, float("nan") if acc is None else float(acc)))
        print(f"N_v={n_v:<4d} cpr={cost:<8d} final_accuracy={_fmt(acc)}")
    analysis.write_dat(out / "cpr_vs_embedding.dat", rows, header="embedding_size cpr mean_final_accuracy")
    print(f"table written to {out / 'cpr_vs_embedding.dat'}")
    return 0


def _arch_for(cfg: RunConfig):
    from .mainnet import build_arch
    ds = cfg.dataset
    num_classes = ds.num_classes if ds.kind == "synth" else 10
    return build_arch(cfg.arch, num_classes, in_channels=ds.channels if ds.kind == "synth" else None)


def cmd_partition_stats(args) -> int:
    cfg = load_config(args)
    dataset = federation.build_dataset(cfg)
    part = federation.build_partition(cfg, dataset)
    split = "train" if args.split == "train" else ("test" if args.split == "test" else "all")
    hist = part.histograms(split)
    width = max(5, len(str(int(hist.max(initial=0)))) + 1)
    header = "client" + (" group" if part.groups else "") + "".join(f"{f'c{c}':>{width}}" for c in
                                                                  range(part.num_classes)) + "   total"
    print(header)
    for k, row in enumerate(hist):
        group = f" {part.groups[k]:>5d}" if part.groups else ""
        print(f"{k:>6d}{group}" + "".join(f"{int(x):>{width}d}" for x in row) + f"{int(row.sum()):>8d}")
    if args.out:
        out = _out_dir(cfg)
        analysis.write_dat(out / "partition.dat", ([k] + [int(x) for x in row] for k, row in enumerate(hist)),
                           header="client " + " ".join(f"class{c}" for c in range(part.num_classes)))
    return 0


def cmd_similarity(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    result = federation.run_experiment(cfg, parallel=args.parallel, out_dir=out)
    M = analysis.cosine_similarity_matrix(federation.client_theta_vectors(result))
    analysis.write_similarity(out / "similarity.csv", M)
    report = {"clients": len(M)}
    groups = result.setup.partition.groups
    if groups is not None:
        intra, inter = analysis.group_similarity_gap(M, groups)
        report.update(intra_group_mean=intra, inter_group_mean=inter, gap=intra - inter, groups=groups)
        print(f"intra-group mean similarity {intra:.6f}, inter-group {inter:.6f}, gap {intra - inter:+.3e}")
    else:
        off = M[~np.eye(len(M), dtype=bool)]
        report["mean_offdiagonal"] = float(off.mean()) if off.size else None
        print("partition has no groups; wrote the matrix only")
    analysis.write_json(out / "similarity.json", report)
    print(f"matrix written to {out / 'similarity.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    n_v = 4 if args.embedding_size is None else args.embedding_size
    res = federation.composition_gradient_check(seed=seed, embedding_size=n_v, samples=args.samples)
    err = res["max_relative_error"]
    print(f"max relative error {err:.3e} over {res['samples']} coordinates of phi, v and beta "
          f"(tolerance {args.tol:g})")
    if not err < args.tol:
        raise InvariantError(f"gradient check failed: max relative error {err:.3e} >= {args.tol:g}")
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; unknown keys are rejected")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--algorithm", choices=("hfn", "fedavg", "fedprox", "fedper", "local"))
    common.add_argument("--rounds", type=int, help="communication rounds T")
    common.add_argument("--embedding-size", type=int, help="embedding length N_v")
    common.add_argument("--parallel", type=int, default=1, help="concurrent client updates (output is identical)")

    parser = argparse.ArgumentParser(
        prog="hfs", description="Federated learning simulator with hypernetwork-generated filters.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Config defaults (any subset may be given in --config):\n" + default_config_text()
               + "\n\nLog verbosity is read from HFS_LOG (default WARNING).")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="train one configuration and write results").set_defaults(
        func=cmd_run)
    sweep = sub.add_parser("sweep-embedding", parents=[common], help="repeat a run over embedding sizes")
    sweep.add_argument("--sizes", type=_int_list, default=[1, 4, 16, 64], help="comma-separated N_v values")
    sweep.set_defaults(func=cmd_sweep_embedding)
    stats = sub.add_parser("partition-stats", parents=[common], help="print per-client class histograms")
    stats.add_argument("--split", choices=("all", "train", "test"), default="all")
    stats.set_defaults(func=cmd_partition_stats)
    sub.add_parser("similarity", parents=[common], help="train, then compare clients' conv weights").set_defaults(
        func=cmd_similarity)
    grad = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    grad.add_argument("--samples", type=int, default=240, help="coordinates to perturb")
    grad.add_argument("--tol", type=float, default=1e-4, help="maximum allowed relative error")
    grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        if args.parallel < 1:
            raise ConfigError(f"--parallel must be at least 1, got {args.parallel}")
        return args.func(args)
    except HFSError as exc:
        print(f"hfs: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hfs: I/O error: {exc}", file=sys.stderr)
        return ResultsIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
