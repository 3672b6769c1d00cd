"""Run configuration, run directories and the multi-seed comparison.

Every run directory holds ``config.txt`` (key=value lines, loadable with
``--config``), ``metrics.tsv`` (one tab-separated key=value record per step),
``eval.tsv`` (one record per epoch) and ``summary.txt``. Floats are written
with ``repr`` so re-running a configuration reproduces the files byte for byte.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import CsvSchema, Dataset, load_csv, make_blobs, make_linreg, make_two_moons
from .models import MlpSpec
from .optimizers import MODES, TrainConfig, TrainerMode, TrainResult, train
from .perturbation import PerturbConfig

RHO_GRID = (0.01, 0.02, 0.05)
DATASETS = ("two-moons", "blobs", "linreg", "csv")
OUT_ENV = "SHARPOPT_OUT"


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "base"
    rho: float = 0.05
    eta: float = 1e-4
    sigma: float = 1.0
    optimizer: str = "adam"
    lr: float | None = None
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    dataset: str = "two-moons"
    n_train: int = 512
    n_test: int = 1000
    noise: float = 0.2
    dims: int = 2
    csv: str | None = None
    csv_test: str | None = None
    target: str = "target"
    task: str = "classification"
    hidden: int = 32
    activation: str = "tanh"
    oracle_cap: int = 64
    out: str | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise UsageError(f"--mode must be one of {', '.join(m.replace('_', '-') for m in MODES)}")
        if self.dataset not in DATASETS:
            raise UsageError(f"--dataset must be one of {', '.join(DATASETS)}")
        if self.dataset == "csv" and not self.csv:
            raise UsageError("--dataset csv needs --csv PATH")
        if self.csv and self.dataset != "csv":
            raise UsageError("--csv only applies with --dataset csv")
        for name in ("rho", "eta", "sigma"):
            if not getattr(self, name) > 0:
                raise UsageError(f"--{name} must be positive")
        if self.lr is not None and not self.lr > 0:
            raise UsageError("--lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise UsageError("--optimizer must be sgd or adam")
        if self.batch_size < 1 or self.epochs < 1:
            raise UsageError("--batch-size and --epochs must be >= 1")
        if self.task not in ("classification", "regression"):
            raise UsageError("--task must be classification or regression")
        if self.activation not in ("tanh", "relu"):
            raise UsageError("--activation must be tanh or relu")
        if self.mode == "per_instance_sam" and self.batch_size > self.oracle_cap:
            raise UsageError(
                f"per-instance SAM costs 2N forward and 2N backward passes per step; "
                f"--batch-size {self.batch_size} exceeds the oracle cap {self.oracle_cap}")

    def echo(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={'' if value is None else value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def parse_config_text(text: str) -> dict:
    """key=value lines into typed RunConfig overrides."""
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def _coerce(key, value, typ):
    if value == "":
        return None
    try:
        if "int" in str(typ):
            return int(value)
        if "float" in str(typ):
            return float(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r}") from None
    if key == "mode":
        return value.replace("-", "_")
    return value


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def run_dir(config: RunConfig) -> Path:
    if config.out:
        return Path(config.out)
    return output_root() / f"{config.mode.replace('_', '-')}-{config.dataset}-seed{config.seed}"


# --- building blocks -------------------------------------------------------


def build_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "two-moons":
        tr = make_two_moons(config.n_train, config.noise, config.seed)
        return tr, make_two_moons(config.n_test, config.noise, config.seed, "test", reference=tr)
    if config.dataset == "blobs":
        return (make_blobs(config.n_train, config.dims, config.noise, config.seed),
                make_blobs(config.n_test, config.dims, config.noise, config.seed, "test"))
    if config.dataset == "linreg":
        return (make_linreg(config.n_train, config.dims, config.noise, config.seed),
                make_linreg(config.n_test, config.dims, config.noise, config.seed, "test"))
    schema = CsvSchema(config.target, config.task)
    tr = load_csv(config.csv, schema)
    if config.csv_test:
        return tr, load_csv(config.csv_test, schema, "test")
    cut = max(1, int(round(0.8 * len(tr))))
    if cut >= len(tr):
        raise UsageError("CSV has too few rows to hold out a test split; pass --csv-test")
    head = Dataset(tr.inputs[:cut], tr.targets[:cut], "train", tr.provenance, tr.task)
    tail = Dataset(tr.inputs[cut:], tr.targets[cut:], "test", tr.provenance, tr.task)
    return head, tail


def build_model(config: RunConfig, train_set: Dataset) -> MlpSpec:
    head = "softmax_xent" if train_set.task == "classification" else "mse"
    widths = (train_set.d_in,) + ((config.hidden,) if config.hidden > 0 else ()) + (train_set.d_out,)
    return MlpSpec(widths, config.activation, head)


def trainer_mode(config: RunConfig) -> TrainerMode:
    return TrainerMode(config.mode, PerturbConfig(config.rho), config.eta, config.oracle_cap)


def train_config(config: RunConfig) -> TrainConfig:
    return TrainConfig(config.epochs, config.batch_size, config.seed, config.optimizer, config.lr)


def format_record(record: dict) -> str:
    parts = []
    for key, value in record.items():
        if value is None:
            text = "-"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        parts.append(f"{key}={text}")
    return "\t".join(parts)


def parse_record(line: str) -> dict:
    return dict(part.split("=", 1) for part in line.rstrip("\n").split("\t"))


def execute(config: RunConfig, directory: Path | None = None) -> TrainResult:
    """Train one configuration and write its run directory."""
    config.validate()
    train_set, test_set = build_datasets(config)
    model = build_model(config, train_set)
    directory = run_dir(config) if directory is None else Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(config.echo())
    with open(directory / "metrics.tsv", "w") as metrics, open(directory / "eval.tsv", "w") as evals:
        try:
            result = train(model, train_config(config), train_set, test_set, trainer_mode(config),
                           sink=lambda rep: metrics.write(format_record(rep.record()) + "\n"),
                           eval_sink=lambda ev: evals.write(
                               format_record(dataclasses.asdict(ev)) + "\n"))
        except Exception:
            (directory / "summary.txt").write_text("status=aborted\n")
            raise
    final = result.evaluation.final
    passes = np.array([r.passes for r in result.reports], dtype=np.float64).mean(axis=0)
    summary = {
        "status": "ok", "mode": config.mode, "steps": len(result.reports),
        "metric": result.evaluation.metric,
        "final_train_loss": final.train_loss, "final_test_loss": final.test_loss,
        "final_train_metric": final.train_metric, "final_test_metric": final.test_metric,
        "mean_fwd_recorded": float(passes[0]), "mean_fwd_unrecorded": float(passes[1]),
        "mean_bwd": float(passes[2]),
    }
    (directory / "summary.txt").write_text(
        "\n".join(f"{k}={repr(v) if isinstance(v, float) else v}" for k, v in summary.items()) + "\n")
    return result


# --- comparison --------------------------------------------------------------


@dataclass
class ModeSummary:
    mode: str
    metrics: list[float]
    passes: tuple[float, float, float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.metrics))

    @property
    def std(self) -> float:
        return float(np.std(self.metrics))


def compare(config: RunConfig, seeds: list[int], modes: list[str] | None = None,
            directory: Path | None = None) -> list[ModeSummary]:
    """Train each mode on each seed; optionally write ``summary.tsv`` into ``directory``."""
    if modes is None:
        modes = ["base", "sam", "delta_sam"]
        if config.batch_size <= config.oracle_cap:
            modes.append("per_instance_sam")
    rows = []
    for mode in modes:
        metrics, passes = [], []
        for seed in seeds:
            run = config.replace(mode=mode, seed=seed, out=None)
            run.validate()
            train_set, test_set = build_datasets(run)
            model = build_model(run, train_set)
            res = train(model, train_config(run), train_set, test_set, trainer_mode(run))
            metrics.append(res.evaluation.final.test_metric)
            passes.append(np.array([r.passes for r in res.reports], dtype=np.float64).mean(axis=0))
        mean_passes = tuple(float(x) for x in np.mean(passes, axis=0))
        rows.append(ModeSummary(mode, metrics, mean_passes))
    if directory is not None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.txt").write_text(config.echo() + f"seeds={','.join(map(str, seeds))}\n")
        (directory / "summary.tsv").write_text(format_table(rows))
    return rows


def format_table(rows: list[ModeSummary]) -> str:
    sam = next((r for r in rows if r.mode == "sam"), None)
    lines = ["mode\tmean_test_metric\tstd_test_metric\tfwd_recorded\tfwd_unrecorded\tbwd"
             "\textra_unrecorded_vs_sam\tper_seed"]
    for r in rows:
        extra = "-" if sam is None else f"{r.passes[1] - sam.passes[1]:g}"
        lines.append("\t".join([
            r.mode.replace("_", "-"), f"{r.mean:.6f}", f"{r.std:.6f}",
            *(f"{p:g}" for p in r.passes), extra, ",".join(f"{m:.4f}" for m in r.metrics),
        ]))
    return "\n".join(lines) + "\n"
