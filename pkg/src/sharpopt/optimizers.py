"""Outer optimizers and the four training-step variants.

``base``              plain gradient step on the batch mean loss
``sam``               shared perturbation from the mean-loss gradient
``delta_sam``         shared perturbation from the probe-reweighted gradient
``per_instance_sam``  one perturbation per instance (expensive reference)

In every perturbing mode the outer gradient is the gradient of the
*unweighted* batch mean loss at the perturbed weights, with the perturbation
held constant, and the optimizer update is applied at the unperturbed
weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models import (Batch, MlpSpec, Model, PassCounter, instance_gradient,
                     mean_loss_gradient, per_instance_losses, predict)
from .params import ParamVector
from .perturbation import PerturbConfig, ZeroGradient, apply, normalize_to_ball, revert
from .reweighting import DEFAULT_ETA, InstanceWeights, delta_sam_direction, sample_instance_weights
from .rng import Rng

log = logging.getLogger(__name__)

MODES = ("base", "sam", "delta_sam", "per_instance_sam")
DEFAULT_ORACLE_CAP = 64

FLAG_ZERO_GRAD = "zero_gradient_fallback"
FLAG_UNIFORM = "uniform_weight_fallback"


class NumericAbort(RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, last_report=None, reports=None):
        super().__init__(message)
        self.last_report = last_report
        self.reports = reports or []


class OracleCapExceeded(ValueError):
    pass


class OptimizerState:
    """SGD or Adam state for a single parameter vector."""

    def __init__(self, kind: str = "sgd", learning_rate: float | None = None,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon_adam: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if learning_rate is None:
            learning_rate = 0.1 if kind == "sgd" else 1e-3
        if not learning_rate > 0:
            raise ValueError("learning rate must be positive")
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon_adam = epsilon_adam
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.step_count = 0

    def update(self, w: ParamVector, grad: ParamVector) -> ParamVector:
        if grad.layout != w.layout:
            raise ValueError("gradient layout does not match the weights")
        self.step_count += 1
        if self.kind == "sgd":
            return ParamVector(w.layout, w.data - self.learning_rate * grad.data)
        if self.m is None:
            self.m = np.zeros(w.dim)
            self.v = np.zeros(w.dim)
        g = grad.data
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v / (1.0 - self.beta2 ** self.step_count)
        return ParamVector(w.layout,
                           w.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon_adam))


@dataclass(frozen=True)
class TrainerMode:
    name: str = "base"
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    eta: float = DEFAULT_ETA
    oracle_cap: int = DEFAULT_ORACLE_CAP
    num_samples: int = 1

    def __post_init__(self):
        if self.name not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.name!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    def check_batch_size(self, n: int) -> None:
        if self.name == "per_instance_sam" and n > self.oracle_cap:
            raise OracleCapExceeded(
                f"per-instance SAM needs 2N passes per step; batch size {n} exceeds the "
                f"oracle cap of {self.oracle_cap}. Use a batch size <= {self.oracle_cap} "
                f"or raise the cap explicitly."
            )


@dataclass
class StepReport:
    step: int
    mode: str
    mean_loss: float
    perturbation_norm: float
    g_min: float | None = None
    g_mean: float | None = None
    g_max: float | None = None
    fwd_recorded: int = 0
    fwd_unrecorded: int = 0
    bwd: int = 0
    flag: str = ""
    cosine: float | None = None
    perturbation: ParamVector | None = field(default=None, repr=False)

    @property
    def passes(self) -> tuple[int, int, int]:
        return (self.fwd_recorded, self.fwd_unrecorded, self.bwd)

    def record(self) -> dict:
        """Serializable fields, in stream order."""
        return {
            "step": self.step, "mode": self.mode, "mean_loss": self.mean_loss,
            "perturbation_norm": self.perturbation_norm,
            "g_min": self.g_min, "g_mean": self.g_mean, "g_max": self.g_max,
            "fwd_recorded": self.fwd_recorded, "fwd_unrecorded": self.fwd_unrecorded,
            "bwd": self.bwd, "flag": self.flag or "-", "cosine": self.cosine,
        }


def expected_passes(mode: str, n: int, num_samples: int = 1, flag: str = "") -> tuple[int, int, int]:
    """Pass-counter contract ``(fwd_recorded, fwd_unrecorded, bwd)`` for one step."""
    if mode == "base" or (mode == "sam" and flag == FLAG_ZERO_GRAD):
        return (1, 0, 1)
    if mode == "sam":
        return (2, 0, 2)
    if mode == "delta_sam":
        return (2, 3 * num_samples, 2)
    if mode == "per_instance_sam":
        return (2 * n, 0, 2 * n)
    raise ValueError(mode)


def _finite(loss: float, grad: ParamVector) -> None:
    if not np.isfinite(loss) or not np.all(np.isfinite(grad.data)):
        raise NumericAbort(f"non-finite loss or gradient (loss={loss})")


def _report(step, mode, counter, loss, eps, reference=None, flag="", weights=None):
    rep = StepReport(step=step, mode=mode, mean_loss=float(loss),
                     perturbation_norm=0.0 if eps is None else eps.norm(),
                     fwd_recorded=counter.fwd_recorded,
                     fwd_unrecorded=counter.fwd_unrecorded, bwd=counter.bwd,
                     flag=flag, perturbation=eps)
    if weights is not None:
        rep.g_min, rep.g_mean, rep.g_max = weights.summary()
    if reference is not None and eps is not None:
        rep.cosine = eps.cosine(reference)
    return rep


def _outer_update(state: OptimizerState, model: Model, w: ParamVector, batch: Batch,
                  eps: ParamVector, counter: PassCounter) -> ParamVector:
    w_adv = apply(w, eps)
    loss, grad, _ = mean_loss_gradient(model, w_adv, batch, counter)
    _finite(loss, grad)
    w_back = revert(w_adv, eps)
    if not w_back.equals(w):
        raise RuntimeError("apply/revert round trip is not exact")
    return state.update(w_back, grad)


def base_step(state: OptimizerState, model: Model, w: ParamVector, batch: Batch,
              step: int = 0) -> tuple[ParamVector, StepReport]:
    counter = PassCounter()
    loss, grad, _ = mean_loss_gradient(model, w, batch, counter)
    _finite(loss, grad)
    return state.update(w, grad), _report(step, "base", counter, loss, None)


def sam_step(state: OptimizerState, model: Model, w: ParamVector, batch: Batch,
             cfg: PerturbConfig, step: int = 0,
             reference: ParamVector | None = None) -> tuple[ParamVector, StepReport]:
    counter = PassCounter()
    loss, grad, _ = mean_loss_gradient(model, w, batch, counter)
    _finite(loss, grad)
    try:
        eps = normalize_to_ball(grad, cfg.rho, cfg.zero_grad_threshold)
    except ZeroGradient:
        return state.update(w, grad), _report(step, "sam", counter, loss, None, flag=FLAG_ZERO_GRAD)
    w_new = _outer_update(state, model, w, batch, eps, counter)
    return w_new, _report(step, "sam", counter, loss, eps, reference)


def delta_sam_step(state: OptimizerState, model: Model, w: ParamVector, batch: Batch,
                   cfg: PerturbConfig, rng: Rng, eta: float = DEFAULT_ETA,
                   num_samples: int = 1, step: int = 0,
                   reference: ParamVector | None = None) -> tuple[ParamVector, StepReport]:
    counter = PassCounter()
    weights, l0 = sample_instance_weights(model, w, batch, rng, cfg.rho, eta,
                                          num_samples, counter)
    loss = float(l0.mean())
    if not np.isfinite(loss):
        raise NumericAbort(f"non-finite loss ({loss})")
    flag = ""
    if weights.all_zero:
        weights = InstanceWeights(np.full(len(batch), 1.0 / len(batch)), eta)
        flag = FLAG_UNIFORM
    try:
        eps = delta_sam_direction(model, w, batch, weights, cfg.rho,
                                  cfg.zero_grad_threshold, counter)
    except ZeroGradient:
        loss, grad, _ = mean_loss_gradient(model, w, batch, counter)
        _finite(loss, grad)
        return state.update(w, grad), _report(step, "delta_sam", counter, loss, None,
                                              flag=FLAG_ZERO_GRAD, weights=weights)
    w_new = _outer_update(state, model, w, batch, eps, counter)
    return w_new, _report(step, "delta_sam", counter, loss, eps, reference, flag, weights)


def per_instance_sam_step(state: OptimizerState, model: Model, w: ParamVector, batch: Batch,
                          cfg: PerturbConfig, oracle_cap: int = DEFAULT_ORACLE_CAP,
                          step: int = 0) -> tuple[ParamVector, StepReport]:
    n = len(batch)
    if n > oracle_cap:
        TrainerMode("per_instance_sam", cfg, oracle_cap=oracle_cap).check_batch_size(n)
    counter = PassCounter()
    total = np.zeros(w.dim)
    losses = np.empty(n)
    eps_norms = np.empty(n)
    skipped = 0
    for i in range(n):
        losses[i], g_i = instance_gradient(model, w, batch, i, counter)
        _finite(losses[i], g_i)
        try:
            eps_i = normalize_to_ball(g_i, cfg.rho, cfg.zero_grad_threshold)
        except ZeroGradient:
            eps_i = w.layout.zeros()
            skipped += 1
        eps_norms[i] = eps_i.norm()
        w_adv = apply(w, eps_i)
        _, g_adv = instance_gradient(model, w_adv, batch, i, counter)
        _finite(0.0, g_adv)
        if not revert(w_adv, eps_i).equals(w):
            raise RuntimeError("apply/revert round trip is not exact")
        total += g_adv.data
    outer = ParamVector(w.layout, total / n)
    rep = StepReport(step=step, mode="per_instance_sam", mean_loss=float(losses.mean()),
                     perturbation_norm=float(eps_norms.mean()),
                     fwd_recorded=counter.fwd_recorded, fwd_unrecorded=counter.fwd_unrecorded,
                     bwd=counter.bwd, flag=f"skipped={skipped}" if skipped else "")
    return state.update(w, outer), rep


def run_step(mode: TrainerMode, state: OptimizerState, model: Model, w: ParamVector,
             batch: Batch, rng: Rng, step: int = 0,
             reference: ParamVector | None = None) -> tuple[ParamVector, StepReport]:
    if mode.name == "base":
        return base_step(state, model, w, batch, step)
    if mode.name == "sam":
        return sam_step(state, model, w, batch, mode.perturb, step, reference)
    if mode.name == "delta_sam":
        return delta_sam_step(state, model, w, batch, mode.perturb, rng, mode.eta,
                              mode.num_samples, step, reference)
    return per_instance_sam_step(state, model, w, batch, mode.perturb, mode.oracle_cap, step)


# --- training loop -------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    lr: float | None = None
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class EpochEval:
    epoch: int
    train_loss: float
    test_loss: float
    train_metric: float
    test_metric: float


@dataclass
class EvalReport:
    metric: str
    epochs: list[EpochEval] = field(default_factory=list)

    @property
    def final(self) -> EpochEval:
        return self.epochs[-1]


@dataclass
class TrainResult:
    w: ParamVector
    reports: list[StepReport]
    evaluation: EvalReport


def evaluate(model: MlpSpec, w: ParamVector, dataset) -> tuple[float, float]:
    """(mean loss, metric) where metric is accuracy or mean squared error."""
    batch = dataset.as_batch()
    loss = float(per_instance_losses(model, w, batch).mean())
    out = predict(model, w, batch.inputs)
    if model.output_head == "softmax_xent":
        metric = float(np.mean(np.argmax(out, axis=1) == batch.targets.astype(np.int64)))
    else:
        target = np.asarray(batch.targets, dtype=np.float64).reshape(out.shape)
        metric = float(np.mean((out - target) ** 2))
    return loss, metric


def train(model: MlpSpec, config: TrainConfig, train_set, test_set, mode: TrainerMode,
          w0: ParamVector | None = None,
          sink: Callable[[StepReport], None] | None = None,
          eval_sink: Callable[[EpochEval], None] | None = None) -> TrainResult:
    """Fixed-epoch training loop; fully determined by ``config.seed``.

    Every step's pass counters are checked against :func:`expected_passes`.
    Raises :class:`NumericAbort` (carrying the reports so far) on a
    non-finite loss.
    """
    from .data import batches  # data imports models only; keep module graph acyclic

    mode.check_batch_size(min(config.batch_size, len(train_set)))
    root = Rng(config.seed)
    w = model.init_params(root.spawn(0)) if w0 is None else w0
    batch_rng = root.spawn(1)
    probe_rng = root.spawn(2)
    state = OptimizerState(config.optimizer, config.lr)
    reports: list[StepReport] = []
    metric = "accuracy" if model.output_head == "softmax_xent" else "mse"
    evaluation = EvalReport(metric)
    step = 0
    for epoch in range(config.epochs):
        for batch in batches(train_set, config.batch_size, batch_rng, config.shuffle):
            try:
                w, rep = run_step(mode, state, model, w, batch, probe_rng, step)
            except NumericAbort as exc:
                raise NumericAbort(str(exc), reports[-1] if reports else None, reports) from exc
            want = expected_passes(mode.name, len(batch), mode.num_samples, rep.flag)
            if rep.passes != want:
                raise AssertionError(f"step {step}: passes {rep.passes} != contract {want}")
            rep.perturbation = None  # keep memory flat over long runs
            reports.append(rep)
            if sink is not None:
                sink(rep)
            step += 1
        train_loss, train_metric = evaluate(model, w, train_set)
        test_loss, test_metric = evaluate(model, w, test_set)
        ev = EpochEval(epoch, train_loss, test_loss, train_metric, test_metric)
        evaluation.epochs.append(ev)
        if eval_sink is not None:
            eval_sink(ev)
        log.debug("epoch %d train_loss=%.4f test_%s=%.4f", epoch, train_loss, metric, test_metric)
    return TrainResult(w, reports, evaluation)
