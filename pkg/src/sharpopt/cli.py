"""Command-line entry point: ``sharpopt {train,verify,compare,gen-data}``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import verify
from .data import CsvFormatError, make_blobs, make_linreg, make_two_moons, save_csv
from .harness import (DATASETS, RHO_GRID, RunConfig, UsageError, compare, execute,
                      format_table, output_root, parse_config_text, run_dir)
from .optimizers import NumericAbort

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

CLI_MODES = ("base", "sam", "delta-sam", "per-instance-sam")


def _run_options(p: argparse.ArgumentParser) -> None:
    # defaults are None so that only explicit flags override a --config file
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--mode", choices=CLI_MODES)
    p.add_argument("--rho", type=float)
    p.add_argument("--eta", type=float, help="denominator floor for instance weights")
    p.add_argument("--sigma", type=float,
                   help="probe scale; probes are rescaled to norm rho so this is recorded only")
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--dims", type=int)
    p.add_argument("--csv", help="training CSV (with --dataset csv)")
    p.add_argument("--csv-test", help="test CSV; default holds out the last 20%% of --csv")
    p.add_argument("--target", help="target column name in the CSV")
    p.add_argument("--task", choices=("classification", "regression"))
    p.add_argument("--hidden", type=int, help="hidden width; 0 gives a linear model")
    p.add_argument("--activation", choices=("tanh", "relu"))
    p.add_argument("--oracle-cap", type=int)
    p.add_argument("--out", help="output directory (default under $SHARPOPT_OUT or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharpopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one configuration and write a run directory")
    _run_options(train)
    train.add_argument("--sweep-rho", action="store_true",
                       help=f"train once per rho in {RHO_GRID}, one subdirectory each")

    ver = sub.add_parser("verify", help="run the analytic verification battery")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--mc-samples", type=int, default=10_000)

    cmp_ = sub.add_parser("compare", help="all modes over several seeds; mean +- std table")
    _run_options(cmp_)
    cmp_.add_argument("--seeds", type=int, default=10, help="number of seeds, starting at --seed")

    gen = sub.add_parser("gen-data", help="write a synthetic dataset as train.csv and test.csv")
    gen.add_argument("--dataset", choices=DATASETS[:-1], default="two-moons")
    gen.add_argument("--n-train", type=int, default=RunConfig.n_train)
    gen.add_argument("--n-test", type=int, default=RunConfig.n_test)
    gen.add_argument("--noise", type=float, default=RunConfig.noise)
    gen.add_argument("--dims", type=int, default=RunConfig.dims)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--target", default="target")
    gen.add_argument("--out", required=True, help="directory for the two CSV files")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read --config: {exc}") from None
    for name in RunConfig.__dataclass_fields__:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if "mode" in values:
        values["mode"] = values["mode"].replace("-", "_")
    config = RunConfig(**values)
    config.validate()
    return config


def cmd_train(args) -> int:
    config = config_from_args(args)
    runs = [config]
    if args.sweep_rho:
        root = run_dir(config)
        runs = [config.replace(rho=rho, out=str(root / f"rho-{rho:g}")) for rho in RHO_GRID]
    for run in runs:
        start = time.perf_counter()
        result = execute(run)
        final = result.evaluation.final
        print(f"{run_dir(run)}: mode={run.mode} rho={run.rho:g} steps={len(result.reports)} "
              f"test_{result.evaluation.metric}={final.test_metric:.4f} "
              f"({time.perf_counter() - start:.1f}s)")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.mc_samples < 100:
        raise UsageError("--mc-samples must be >= 100")
    results = verify.run_battery(args.seed, args.mc_samples)
    for r in results:
        print(r.line())
    timing = ", ".join(f"{r.name} {r.seconds:.2f}s" for r in results)
    print(f"timing: {timing}", file=sys.stderr)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_compare(args) -> int:
    config = config_from_args(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = list(range(config.seed, config.seed + args.seeds))
    directory = Path(config.out) if config.out else output_root() / f"compare-{config.dataset}"
    rows = compare(config, seeds, directory=directory)
    print(format_table(rows), end="")
    print(f"written to {directory / 'summary.tsv'}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset == "two-moons":
        tr = make_two_moons(args.n_train, args.noise, args.seed)
        te = make_two_moons(args.n_test, args.noise, args.seed, "test", reference=tr)
    elif args.dataset == "blobs":
        tr = make_blobs(args.n_train, args.dims, args.noise, args.seed)
        te = make_blobs(args.n_test, args.dims, args.noise, args.seed, "test")
    else:
        tr = make_linreg(args.n_train, args.dims, args.noise, args.seed)
        te = make_linreg(args.n_test, args.dims, args.noise, args.seed, "test")
    save_csv(tr, out / "train.csv", args.target)
    save_csv(te, out / "test.csv", args.target)
    print(f"wrote {out / 'train.csv'} ({len(tr)} rows) and {out / 'test.csv'} ({len(te)} rows)")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "verify": cmd_verify, "compare": cmd_compare,
            "gen-data": cmd_gen_data}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, CsvFormatError, FileNotFoundError) as exc:
        print(f"sharpopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"sharpopt: numeric abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
