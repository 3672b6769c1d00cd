"""Trainable models with per-instance losses.

Every model exposes ``layout`` and ``instance_losses(params, batch)``, the
latter returning a length-N tensor of l_i(w). Everything above this module
(probes, reweighting, the training steps) only talks to that surface, so
the quadratic test problems run through exactly the same code as the MLPs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tape, Tensor
from .params import Layout, ParamVector
from .rng import Rng

ACTIVATIONS = ("relu", "tanh")
HEADS = ("softmax_xent", "mse")


@dataclass
class PassCounter:
    """Forward/backward pass accounting for one training step."""

    fwd_recorded: int = 0
    fwd_unrecorded: int = 0
    bwd: int = 0
    instance_evals: int = 0

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.fwd_recorded, self.fwd_unrecorded, self.bwd)


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    instance_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2:
            raise DimensionError(f"batch inputs must be (N, d_in), got {inputs.shape}")
        n = inputs.shape[0]
        if n < 1:
            raise ValueError("a batch needs at least one instance")
        targets = np.asarray(self.targets)
        if targets.shape[0] != n:
            raise DimensionError(f"{n} inputs but {targets.shape[0]} targets")
        ids = tuple(int(i) for i in self.instance_ids) or tuple(range(n))
        if len(ids) != n:
            raise DimensionError(f"{n} inputs but {len(ids)} instance ids")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "instance_ids", ids)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, rows: Sequence[int]) -> "Batch":
        rows = list(rows)
        return Batch(self.inputs[rows], self.targets[rows],
                     tuple(self.instance_ids[r] for r in rows))


class Model(Protocol):
    layout: Layout
    d_in: int

    def instance_losses(self, params: dict[str, Tensor], batch: Batch) -> Tensor: ...

    def outputs(self, params: dict[str, Tensor], inputs: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network ``layer_widths[0] -> ... -> layer_widths[-1]``.

    A single width gives the identity map (no parameters); two widths give a
    linear model. Hidden layers use ``activation``; the last layer is linear
    and feeds ``output_head``.
    """

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    output_head: str = "softmax_xent"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if not widths or any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output_head not in HEADS:
            raise ValueError(f"output_head must be one of {HEADS}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def d_in(self) -> int:
        return self.layer_widths[0]

    @property
    def d_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def layout(self) -> Layout:
        shapes = []
        for k in range(self.n_layers):
            fan_in, fan_out = self.layer_widths[k], self.layer_widths[k + 1]
            shapes += [(f"W{k}", (fan_in, fan_out)), (f"b{k}", (fan_out,))]
        return Layout.from_shapes(shapes)

    def init_params(self, rng: Rng) -> ParamVector:
        gain = 2.0 if self.activation == "relu" else 1.0
        arrays = {}
        for k in range(self.n_layers):
            fan_in, fan_out = self.layer_widths[k], self.layer_widths[k + 1]
            std = np.sqrt(gain / fan_in)
            arrays[f"W{k}"] = std * rng.normal(fan_in * fan_out).reshape(fan_in, fan_out)
            arrays[f"b{k}"] = np.zeros(fan_out)
        return ParamVector.from_arrays(self.layout, arrays)

    def outputs(self, params, inputs):
        act = ad.relu if self.activation == "relu" else ad.tanh
        h = inputs
        for k in range(self.n_layers):
            h = h @ params[f"W{k}"] + params[f"b{k}"]
            if k < self.n_layers - 1:
                h = act(h)
        return h

    def instance_losses(self, params, batch):
        out = self.outputs(params, Tensor(batch.inputs))
        if self.output_head == "softmax_xent":
            labels = np.asarray(batch.targets)
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("softmax_xent targets must be integer class ids")
            return ad.softmax_cross_entropy(out, labels.astype(np.int64))
        target = np.asarray(batch.targets, dtype=np.float64).reshape(len(batch), -1)
        if target.shape[1] != self.d_out:
            raise DimensionError(f"regression targets have {target.shape[1]} columns, "
                                 f"model outputs {self.d_out}")
        diff = out - target
        return (diff * diff).sum(axis=1) * (1.0 / self.d_out)


class QuadraticModel:
    """Rank-1 quadratic losses ``l_i(w0 + d) = c_i + b_i.d + a_i (b_i.d)^2 / 2``.

    Instance i is encoded in its input row as ``[b_i, c_i, a_i]`` so that a
    :class:`Batch` carries the whole problem and the generic training stack
    applies unchanged. ``H_i = a_i b_i b_i^T``.
    """

    def __init__(self, dim: int, w0=None):
        self.dim = int(dim)
        self.w0 = np.zeros(self.dim) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
        if self.w0.shape != (self.dim,):
            raise DimensionError(f"w0 must have shape ({self.dim},)")
        self.layout = Layout.from_shapes([("w", (self.dim,))])

    @property
    def d_in(self) -> int:
        return self.dim + 2

    def outputs(self, params, inputs):
        return self.instance_losses(params, Batch(inputs.data, np.zeros(len(inputs.data))))

    def instance_losses(self, params, batch):
        b = batch.inputs[:, :self.dim]
        c = batch.inputs[:, self.dim]
        a = batch.inputs[:, self.dim + 1]
        z = Tensor(b) @ (params["w"] - self.w0)
        return c + z + 0.5 * a * (z * z)

    def initial_params(self) -> ParamVector:
        return ParamVector(self.layout, self.w0)


def _check_inputs(model: Model, batch: Batch) -> None:
    if batch.inputs.shape[1] != model.d_in:
        raise DimensionError(
            f"model expects input dimension {model.d_in}, batch has {batch.inputs.shape[1]}"
        )


def forward(model: Model, w: ParamVector, inputs, record: bool = False) -> tuple[Tensor, Tape]:
    """Model outputs for a block of inputs; with ``record=False`` the tape stays empty."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    if inputs.shape[1] != model.d_in:
        raise DimensionError(
            f"model expects input dimension {model.d_in}, got {inputs.shape[1]}"
        )
    tape = Tape(recording=record)
    params = tape.watch(w)
    return model.outputs(params, Tensor(inputs)), tape


def _losses(model: Model, w: ParamVector, batch: Batch, record: bool,
            counter: PassCounter | None) -> tuple[Tensor, Tape]:
    if w.layout != model.layout:
        raise ValueError("parameter vector does not match the model layout")
    _check_inputs(model, batch)
    tape = Tape(recording=record)
    losses = model.instance_losses(tape.watch(w), batch)
    if counter is not None:
        if record:
            counter.fwd_recorded += 1
        else:
            counter.fwd_unrecorded += 1
        counter.instance_evals += len(batch)
    return losses, tape


def _backward(tape: Tape, root: Tensor, counter: PassCounter | None) -> ParamVector:
    grad = ad.backward(tape, root)
    if counter is not None:
        counter.bwd += 1
    return grad


def per_instance_losses(model: Model, w: ParamVector, batch: Batch,
                        counter: PassCounter | None = None) -> np.ndarray:
    """l_i(w) for every instance, evaluated without recording."""
    losses, _ = _losses(model, w, batch, False, counter)
    return losses.data.copy()


def mean_loss_gradient(model: Model, w: ParamVector, batch: Batch,
                       counter: PassCounter | None = None) -> tuple[float, ParamVector, np.ndarray]:
    """Batch risk ``mean_i l_i(w)``, its gradient, and the per-instance losses."""
    losses, tape = _losses(model, w, batch, True, counter)
    root = losses.sum() * (1.0 / len(batch))
    values = losses.data.copy()
    grad = _backward(tape, root, counter)
    return float(root.data), grad, values


def weighted_loss_gradient(model: Model, w: ParamVector, batch: Batch, g,
                           counter: PassCounter | None = None) -> ParamVector:
    """Gradient of ``sum_i g_i l_i(w)`` from a single forward/backward."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (len(batch),):
        raise DimensionError(f"expected {len(batch)} instance weights, got shape {g.shape}")
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("instance weights must be finite and nonnegative")
    losses, tape = _losses(model, w, batch, True, counter)
    return _backward(tape, (losses * g).sum(), counter)


def instance_gradient(model: Model, w: ParamVector, batch: Batch, i: int,
                      counter: PassCounter | None = None) -> tuple[float, ParamVector]:
    """Loss and gradient of instance ``i`` alone (one forward, one backward)."""
    one = batch.subset([i])
    losses, tape = _losses(model, w, one, True, counter)
    root = losses.sum()
    value = float(root.data)
    return value, _backward(tape, root, counter)


def predict(model: MlpSpec, w: ParamVector, inputs) -> np.ndarray:
    out, _ = forward(model, w, inputs, record=False)
    return out.data
