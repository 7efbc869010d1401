"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import blob_centers, make_blobs
from .errors import ContractError
from .evaluation import clustering_accuracy, welch_t_test
from .kmeans import assign_nearest
from .nn import encoder_forward, load_checkpoint
from .training import TrainConfig, load_dataset, run_experiment

log = logging.getLogger("sinkclust")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_key(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for key in keys[:-1]:
        d = d.setdefault(key, {})
        if not isinstance(d, dict):
            raise UsageError(f"--set {dotted}: {key} is not a section")
    d[keys[-1]] = value


def build_config(args) -> TrainConfig:
    """Config file, then flag shortcuts, then ``--set`` overrides (last wins)."""
    base = TrainConfig.from_json(args.config).to_dict() if args.config else TrainConfig(
        dataset={"kind": "blobs"}).to_dict()
    if args.seed is not None:
        base.update(seed_weights=args.seed, seed_shuffle=args.seed, seed_kmeans=args.seed)
    for flag, key in (("method", "method"), ("epsilon", "epsilon"), ("pretrain", "n_pretrain"),
                      ("epochs", "n_epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        _set_key(base, key.strip(), _parse_value(raw))
    try:
        return TrainConfig.from_dict(base)
    except (ContractError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config mirroring TrainConfig")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted for nested), repeatable")
    p.add_argument("--method", choices=("ae_kmeans", "soft_kmeans", "ot"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--pretrain", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="sets all three sub-seeds unless overridden by --set")
    p.add_argument("--out", default="runs/latest", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sinkclust", description="Deep clustering with entropic optimal transport.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="run one experiment")
    _common(p)

    p = sub.add_parser("sweep-epsilon", help="accuracy as a function of epsilon")
    _common(p)
    p.add_argument("--epsilons", required=True, help="comma-separated list, e.g. 0.001,0.01,0.1")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("evaluate", help="accuracy of a saved checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config whose dataset block names the data")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--dataset", help=".npz dataset file (overrides the config)")
    p.add_argument("--out", help="write assignments.csv and evaluation.json here")

    p = sub.add_parser("compare", help="Welch t-test between two sets of run summaries")
    p.add_argument("pattern_a", help="glob of summary.json files (quote it)")
    p.add_argument("pattern_b")

    p = sub.add_parser("gen-blobs", help="write a synthetic blob dataset")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--per-cluster", type=int, default=300)
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .npz path")
    return parser


# -- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    config = build_config(args)
    metrics = run_experiment(config, out_dir=args.out)
    print(f"final_accuracy={metrics.final_accuracy} epochs={len(metrics.records)} out={args.out}")
    return 0


def _sweep_point(job):
    eps, rep, cfg_dict, out = job
    cfg = TrainConfig.from_dict(cfg_dict)
    cfg.epsilon = eps
    cfg.seed_weights += rep
    cfg.seed_shuffle += rep
    cfg.seed_kmeans += rep
    metrics = run_experiment(cfg, out_dir=out)
    return eps, rep, metrics.final_accuracy


def cmd_sweep(args) -> int:
    try:
        epsilons = [float(x) for x in args.epsilons.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--epsilons: cannot parse {args.epsilons!r}") from None
    if not epsilons or args.repeats < 1 or args.jobs < 1:
        raise UsageError("need at least one epsilon, repeats >= 1, jobs >= 1")
    base = build_config(args).to_dict()
    out = Path(args.out)
    jobs = [(eps, rep, base, str(out / f"eps_{eps:g}" / f"rep_{rep}"))
            for eps in epsilons for rep in range(args.repeats)]
    if args.jobs == 1:
        results = [_sweep_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, jobs))
    by_eps: dict[float, list[float]] = {}
    for eps, rep, acc in sorted(results, key=lambda r: (r[0], r[1])):
        by_eps.setdefault(eps, []).append(np.nan if acc is None else acc)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epsilon", "mean_accuracy", "std_accuracy", "repeats"])
        for eps in sorted(by_eps):
            accs = np.asarray(by_eps[eps])
            std = accs.std(ddof=1) if accs.size > 1 else 0.0
            writer.writerow([repr(eps), repr(float(accs.mean())), repr(float(std)), accs.size])
    print(f"{len(results)} runs, aggregate written to {out / 'sweep.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    params, centers, header = load_checkpoint(args.checkpoint)
    if centers is None:
        raise UsageError("checkpoint has no cluster centers")
    if args.dataset:
        from .data import Dataset
        ds = Dataset.load(args.dataset)
    elif args.config:
        cfg = build_config(argparse.Namespace(config=args.config, set=args.set, seed=None))
        ds = load_dataset(cfg.dataset)
    else:
        raise UsageError("evaluate needs --dataset or --config")
    clusters = assign_nearest(encoder_forward(params, ds.features), centers)
    acc = None if ds.labels is None else clustering_accuracy(ds.labels, clusters)
    print(f"n={ds.n} accuracy={acc}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / "assignments.csv", clusters, fmt="%d")
        (out / "evaluation.json").write_text(json.dumps(
            {"accuracy": acc, "n": ds.n, "checkpoint": str(args.checkpoint)}, indent=2) + "\n")
    return 0


def _final_accuracies(pattern: str) -> list[float]:
    files = sorted(glob.glob(pattern, recursive=True))
    if not files:
        raise UsageError(f"no files match {pattern!r}")
    accs = []
    for f in files:
        acc = json.loads(Path(f).read_text()).get("final_accuracy")
        if acc is None:
            raise UsageError(f"{f} has no final_accuracy")
        accs.append(float(acc))
    return accs


def cmd_compare(args) -> int:
    a, b = _final_accuracies(args.pattern_a), _final_accuracies(args.pattern_b)
    t, dof, p = welch_t_test(a, b)
    print(f"n_a={len(a)} mean_a={np.mean(a):.6f} n_b={len(b)} mean_b={np.mean(b):.6f}")
    print(f"t={t:.6g} dof={dof:.6g} p={p:.6g}")
    return 0


def cmd_gen_blobs(args) -> int:
    centers = blob_centers(args.k, args.dim, args.separation, args.seed)
    ds = make_blobs([args.per_cluster] * args.k, centers, args.sigma, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    print(f"wrote {ds.n} points in {ds.d} dims to {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep-epsilon": cmd_sweep,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "gen-blobs": cmd_gen_blobs,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
