"""Synthetic datasets, CSV ingestion and deterministic batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .models import Batch
from .rng import Rng

SPLITS = {"train": 0, "test": 1}


class CsvFormatError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"
    provenance: str = ""
    task: str = "classification"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be (M, d_in), got {self.inputs.shape}")
        self.targets = np.asarray(self.targets)
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise ValueError("inputs and targets disagree on the number of rows")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.targets.max()) + 1

    @property
    def d_out(self) -> int:
        if self.task == "classification":
            return self.n_classes
        return 1 if self.targets.ndim == 1 else self.targets.shape[1]

    def as_batch(self, rows=None) -> Batch:
        if rows is None:
            return Batch(self.inputs, self.targets, tuple(range(len(self))))
        rows = np.asarray(rows)
        return Batch(self.inputs[rows], self.targets[rows], tuple(int(r) for r in rows))


def _split_rng(seed: int, split: str, generator: int) -> Rng:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {sorted(SPLITS)}")
    return Rng(seed, (generator, SPLITS[split]))


def _standardize(x: np.ndarray, reference: Dataset | None) -> tuple[np.ndarray, dict]:
    if reference is not None:
        shift, scale = reference.meta["shift"], reference.meta["scale"]
    else:
        shift = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    return (x - shift) / scale, {"shift": shift, "scale": scale}


def make_two_moons(n: int, noise: float = 0.2, seed: int = 0, split: str = "train",
                   reference: Dataset | None = None) -> Dataset:
    """Two interleaved unit half-circles with Gaussian noise, classes balanced.

    Features are standardized with this dataset's own mean/std, or with
    ``reference``'s (pass the training split when generating the test split).
    The raw points are ``x * meta["scale"] + meta["shift"]``.
    """
    if n < 2:
        raise ValueError("two moons needs n >= 2")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = _split_rng(seed, split, 1)
    n_upper = n // 2
    n_lower = n - n_upper
    t = np.pi * rng.uniform(n)
    upper = np.stack([np.cos(t[:n_upper]), np.sin(t[:n_upper])], axis=1)
    lower = np.stack([1.0 - np.cos(t[n_upper:]), 0.5 - np.sin(t[n_upper:])], axis=1)
    x = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(n_upper, dtype=np.int64), np.ones(n_lower, dtype=np.int64)])
    if noise > 0:
        x = x + noise * rng.normal(2 * n).reshape(n, 2)
    order = rng.permutation(n)
    x, y = x[order], y[order]
    x, meta = _standardize(x, reference)
    return Dataset(x, y, split, f"two-moons(n={n},noise={noise},seed={seed})",
                   "classification", meta)


def make_blobs(n: int, dims: int = 2, noise: float = 1.0, seed: int = 0,
               split: str = "train", n_classes: int = 2, separation: float = 10.0) -> Dataset:
    """Isotropic Gaussian classes (std ``noise``) with centres ``separation * noise`` apart.

    Centres sit on a randomly oriented line shared by both splits.
    """
    if n < n_classes:
        raise ValueError("need at least one point per class")
    axis = Rng(seed, (2, 99)).normal(dims)
    axis /= np.linalg.norm(axis)
    offsets = separation * noise * (np.arange(n_classes) - (n_classes - 1) / 2)
    centres = offsets[:, None] * axis[None, :]
    rng = _split_rng(seed, split, 2)
    y = np.arange(n) % n_classes
    y = y[rng.permutation(n)]
    x = centres[y] + noise * rng.normal(n * dims).reshape(n, dims)
    return Dataset(x, y.astype(np.int64), split,
                   f"blobs(n={n},dims={dims},noise={noise},seed={seed})",
                   "classification", {"centres": centres})


def make_linreg(n: int, dims: int = 3, noise: float = 0.1, seed: int = 0,
                split: str = "train", d_out: int = 1) -> Dataset:
    """``y = A x + noise * e`` with ``x, e`` standard normal; ``meta["A"]`` holds A."""
    a_rng = Rng(seed, (3, 99))
    A = a_rng.normal(d_out * dims).reshape(d_out, dims)
    rng = _split_rng(seed, split, 3)
    x = rng.normal(n * dims).reshape(n, dims)
    y = x @ A.T + noise * rng.normal(n * d_out).reshape(n, d_out)
    return Dataset(x, y, split, f"linreg(n={n},dims={dims},noise={noise},seed={seed})",
                   "regression", {"A": A})


def batches(dataset: Dataset, batch_size: int, rng: Rng | None = None,
            shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    m = len(dataset)
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an Rng")
        order = rng.permutation(m)
    else:
        order = np.arange(m)
    for start in range(0, m, batch_size):
        yield dataset.as_batch(order[start:start + batch_size])


# --- CSV ----------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    target: str = "target"
    task: str = "classification"


def save_csv(dataset: Dataset, path, target: str = "target") -> None:
    targets = dataset.targets
    if dataset.task == "regression" and targets.ndim == 2 and targets.shape[1] != 1:
        raise ValueError("CSV export supports a single target column")
    names = [f"x{j}" for j in range(dataset.d_in)] + [target]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        flat_t = targets.reshape(len(dataset))
        for row, t in zip(dataset.inputs, flat_t):
            cells = [repr(float(v)) for v in row]
            cells.append(str(int(t)) if dataset.task == "classification" else repr(float(t)))
            writer.writerow(cells)


def load_csv(path, schema: CsvSchema = CsvSchema(), split: str = "train") -> Dataset:
    """Read a headered CSV; every non-target column is a float feature."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if schema.target not in header:
            raise CsvFormatError(f"{path}: target column {schema.target!r} not found in header {header}")
        t_col = header.index(schema.target)
        rows, targets = [], []
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise CsvFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(cells)}")
            values = []
            for col, cell in enumerate(cells):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}:{lineno}: column {header[col]!r} is not numeric: {cell!r}") from None
            t = values.pop(t_col)
            if schema.task == "classification":
                if t != int(t) or t < 0:
                    raise CsvFormatError(f"{path}:{lineno}: class label must be a nonnegative integer")
                t = int(t)
            rows.append(values)
            targets.append(t)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    dtype = np.int64 if schema.task == "classification" else np.float64
    return Dataset(np.array(rows, dtype=np.float64), np.array(targets, dtype=dtype),
                   split, str(path), schema.task)
