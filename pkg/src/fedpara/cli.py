"""Command line entry point: ``fedpara {rank-verify,param-count,train,cost}``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import MB, project_cost
from .config import SCHEMA_VERSION, ConfigError, ExperimentConfig, load_config
from .data import (
    IdxFormatError,
    PartitionError,
    load_idx,
    make_blob_task,
    split_dirichlet,
    split_iid,
    split_pathological,
    subsample_train,
    with_local_test,
)
from .federation import STREAMS, FedConfig, run
from .model import NumericalError
from .parameterization import FC, Conv, Scheme, compose_matrix, make_weight, max_rank, param_count
from .tensor import numerical_rank

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

CSV_COLUMNS = ("round", "accuracy", "loss", "up_bytes", "down_bytes", "sim_seconds", "sim_joules")
OUTPUT_ENV = "FEDPARA_OUTPUT_DIR"


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


# ----------------------------------------------------------------------------
# rank-verify


def rank_trials(m: int, n: int, r1: int, r2: int, trials: int, seed: int) -> Counter:
    """Numerical rank of ``(X1 Y1^T) * (X2 Y2^T)`` over Gaussian draws."""
    rng = np.random.default_rng(seed)
    hist: Counter = Counter()
    shape = FC(m, n)
    for _ in range(trials):
        params = {"X1": rng.standard_normal((m, r1)), "Y1": rng.standard_normal((n, r1)),
                  "X2": rng.standard_normal((m, r2)), "Y2": rng.standard_normal((n, r2))}
        w = make_weight(Scheme.FEDPARA, shape, params)
        hist[numerical_rank(compose_matrix(w))] += 1
    return hist


def cmd_rank_verify(args) -> int:
    r2 = args.r if args.r2 is None else args.r2
    if max(args.r, r2) > min(args.m, args.n):
        print(f"error: inner ranks must not exceed min(m, n) = {min(args.m, args.n)}", file=sys.stderr)
        return EXIT_CONFIG
    hist = rank_trials(args.m, args.n, args.r, r2, args.trials, args.seed)
    target = min(args.r * r2, args.m, args.n)
    print(f"m={args.m} n={args.n} r1={args.r} r2={r2} trials={args.trials} seed={args.seed}")
    print("rank  count")
    for rank in sorted(hist):
        print(f"{rank:4d}  {hist[rank]}")
    frac = hist[target] / args.trials
    label = "full-rank" if target == min(args.m, args.n) else f"rank-{target}"
    print(f"{label} fraction: {frac:.4f}")
    return 0


# ----------------------------------------------------------------------------
# param-count


def param_rows(fc: tuple[int, int] | None, conv: tuple[int, int, int, int] | None, r: int):
    """``(scheme, count, max_rank)`` rows for the FC and conv layer shapes."""
    rows = []
    if fc is not None:
        shape = FC(*fc)
        for name, scheme in (("original", Scheme.ORIGINAL), ("lowrank", Scheme.LOWRANK),
                             ("fedpara", Scheme.FEDPARA)):
            rows.append((f"fc-{name}", param_count(scheme, shape, r), max_rank(scheme, shape, r)))
    if conv is not None:
        shape = Conv(*conv)
        for name, scheme in (("original", Scheme.ORIGINAL), ("lowrank", Scheme.LOWRANK),
                             ("fedpara-reshape", Scheme.FEDPARA),
                             ("fedpara-tensor", Scheme.FEDPARA_TENSOR)):
            rows.append((f"conv-{name}", param_count(scheme, shape, r), max_rank(scheme, shape, r)))
    return rows


def cmd_param_count(args) -> int:
    if args.fc is None and args.conv is None:
        print("error: give --fc M N and/or --conv O I K1 K2", file=sys.stderr)
        return EXIT_CONFIG
    rows = param_rows(args.fc, args.conv, args.rank)
    if args.csv:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(("scheme", "count", "max_rank"))
        w.writerows(rows)
        return 0
    print(f"{'scheme':<22}{'count':>12}{'max_rank':>10}")
    for name, count, rank in rows:
        print(f"{name:<22}{count:>12}{rank:>10}")
    return 0


# ----------------------------------------------------------------------------
# train / cost


def _load(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"federation.workers={args.workers}")
    return load_config(args.config, overrides)


def build_data(cfg: ExperimentConfig):
    """Train set, global test set (or None) and client partition for ``cfg``."""
    d = cfg.dataset
    if d.kind == "blobs":
        train, test = make_blob_task(d.num_classes, d.per_class_train, d.per_class_test, d.dim,
                                     d.spread, cfg.seed)
        if d.per_class_test == 0:
            test = None
    else:
        train = load_idx(d.train_images, d.train_labels, d.num_classes, "train")
        test = None
        if d.test_images and d.test_labels:
            test = load_idx(d.test_images, d.test_labels, d.num_classes, "test")
    width = int(np.prod(cfg.model.input_shape))
    if train.features.shape[1] != width:
        raise ConfigError("dataset", [("model.input_shape",
                                       f"{cfg.model.input_shape} does not match {train.features.shape[1]} features")])
    p = cfg.partition
    K = cfg.federation.clients
    seed = [cfg.seed, STREAMS["partition"]]
    if p.kind == "iid":
        part = split_iid(train, K, seed)
    elif p.kind == "dirichlet":
        part = split_dirichlet(train, K, p.alpha, seed)
    else:
        part = split_pathological(train, K, p.classes_per_client, seed)
    test_fraction = p.test_fraction
    if test_fraction is None:
        test_fraction = 0.2 if cfg.federation.algorithm.personalized else 0.0
    if test_fraction > 0:
        part = with_local_test(part, test_fraction, [*seed, 1])
    if p.train_fraction < 1:
        part = subsample_train(part, p.train_fraction, [*seed, 2])
    return train, test, part


def fed_config(cfg: ExperimentConfig) -> FedConfig:
    f = cfg.federation
    return FedConfig(f.clients, f.per_round, f.rounds, cfg.sgd_config(), f.algorithm, cfg.seed,
                     f.workers, cfg.cost_config())


def _output_dir(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output)


def write_rounds_csv(path: Path, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow((r.round, repr(r.accuracy), repr(r.loss), r.up_bytes, r.down_bytes,
                        repr(r.sim_seconds), repr(r.sim_joules)))


def _num(x: float):
    return None if x is None or not np.isfinite(x) else float(x)


def summary_dict(cfg: ExperimentConfig, result) -> dict:
    spec = cfg.model_spec()
    final = result.final
    return {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "rounds": len(result.reports),
        "final": None if final is None else {
            "round": final.round,
            "accuracy": _num(final.accuracy),
            "global_accuracy": _num(final.global_accuracy),
            "loss": _num(final.loss),
        },
        "personalized_accuracy": [] if final is None else [_num(a) for a in final.personalized],
        "initial_broadcast_bytes": result.initial_broadcast_bytes,
        "total_up_bytes": sum(r.up_bytes for r in result.reports),
        "total_down_bytes": sum(r.down_bytes for r in result.reports),
        "num_params": result.server.num_params,
        "layers": [
            {"kind": l.kind, "scheme": l.scheme.value if l.has_weight else None, "rank": l.rank}
            for l in spec.layers
        ],
        "config": cfg.model_dump(mode="json"),
    }


def cmd_train(args) -> int:
    cfg = _load(args)
    train, test, part = build_data(cfg)
    out = _output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)

    def progress(r):
        if not args.quiet:
            print(f"round {r.round:4d}  loss {r.loss:.4f}  acc {r.accuracy:.4f}  "
                  f"up {r.up_bytes}  down {r.down_bytes}", file=sys.stderr)

    # overflow on the way to divergence is reported once, as exit 3
    with np.errstate(over="ignore", invalid="ignore"):
        result = run(fed_config(cfg), cfg.model_spec(), train, part, test, progress)
    write_rounds_csv(out / "rounds.csv", result.reports)
    with open(out / "summary.json", "w") as f:
        json.dump(summary_dict(cfg, result), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {out / 'rounds.csv'} and {out / 'summary.json'}")
    return 0


def cmd_cost(args) -> int:
    cfg = _load(args)
    f = cfg.federation
    rep = project_cost(cfg.model_spec(), f.algorithm, f.per_round, f.rounds, cfg.cost_config(), f.clients)
    if args.json:
        print(json.dumps(rep.__dict__, indent=2))
        return 0
    print(f"algorithm            {rep.algorithm}")
    print(f"parameters           {rep.params_total} ({rep.params_shared} shared)")
    print(f"per client per round {rep.up_bytes_per_client} B up, {rep.down_bytes_per_client} B down")
    print(f"participants x rounds {rep.participants} x {rep.rounds}")
    print(f"initial broadcast    {rep.initial_broadcast_bytes} B")
    print(f"total transferred    {rep.total_bytes} B ({rep.total_bytes / MB:.2f} MB)")
    print(f"simulated wall-clock {rep.total_seconds:.2f} s ({rep.seconds_per_round:.4f} s/round)")
    print(f"energy               {rep.total_joules:.4f} J")
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpara", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    rv = sub.add_parser("rank-verify", help="Monte Carlo rank histogram of Hadamard-factored matrices")
    rv.add_argument("--m", type=_positive, default=100)
    rv.add_argument("--n", type=_positive, default=100)
    rv.add_argument("--r", type=_positive, default=10, help="inner rank r1")
    rv.add_argument("--r2", type=_positive, default=None, help="inner rank r2 (defaults to r1)")
    rv.add_argument("--trials", type=_positive, default=1000)
    rv.add_argument("--seed", type=int, default=0)
    rv.set_defaults(func=cmd_rank_verify)

    pc = sub.add_parser("param-count", help="parameter counts and rank bounds per scheme")
    pc.add_argument("--fc", type=_positive, nargs=2, metavar=("M", "N"))
    pc.add_argument("--conv", type=_positive, nargs=4, metavar=("O", "I", "K1", "K2"))
    pc.add_argument("--rank", "-R", type=_positive, required=True)
    pc.add_argument("--csv", action="store_true", help="print scheme,count,max_rank CSV")
    pc.set_defaults(func=cmd_param_count)

    for name, func, text in (("train", cmd_train, "run a federated experiment"),
                             ("cost", cmd_cost, "project communication cost without training")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. federation.rounds=5")
        sp.add_argument("--seed", type=int)
        sp.set_defaults(func=func)
        if name == "train":
            sp.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
            sp.add_argument("--workers", type=_positive)
            sp.add_argument("--quiet", "-q", action="store_true")
        else:
            sp.add_argument("--json", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IdxFormatError, PartitionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
