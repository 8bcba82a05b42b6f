"""Monte Carlo posterior predictives and their amortization into a student.

The student is trained online: every post-burn-in sampler iteration
contributes one SGD step matching the student's rows to the current
sample's predictive on a calibration minibatch, so the long-run target is
the chain-averaged (Monte Carlo) predictive without ever storing the
chain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DivergenceError
from .models import (MlpSpec, check_params, forward_log_probs, forward_probs,
                     grads_to_flat, init_params, log_probs_node, param_leaves)
from .optim import SgdMomentum
from .rng import child_seed, generator
from .samplers import ChainStore, EpochCycler

Array = np.ndarray
log = logging.getLogger(__name__)


@dataclass
class PredictiveTable:
    """Row-stochastic N x C probabilities plus the id of whatever produced them."""

    probs: Array
    source: str = ""

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ContractError(f"table must be 2-D, got shape {p.shape}")
        if p.size:
            if (p < 0).any() or (p > 1).any():
                raise ContractError("table entries must lie in [0, 1]")
            row_err = np.abs(p.sum(axis=1) - 1.0).max()
            if row_err > 1e-9:
                raise ContractError(f"rows must sum to 1 within 1e-9, off by {row_err:.3g}")
        self.probs = p

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


@dataclass
class StudentModel:
    spec: MlpSpec
    omega: Array

    def __post_init__(self):
        self.omega = check_params(self.spec, self.omega)

    def log_probs(self, x: Array) -> Array:
        return forward_log_probs(self.spec, self.omega, x)

    def probs(self, x: Array) -> Array:
        return forward_probs(self.spec, self.omega, x)

    def table(self, x: Array, source: str = "student") -> PredictiveTable:
        return PredictiveTable(self.probs(x), source)


def mc_predictive(spec: MlpSpec, chain: ChainStore, x: Array,
                  source: str = "chain") -> PredictiveTable:
    """Running mean of per-sample predictives, in fixed sample order.

    The incremental mean keeps a chain of identical samples exactly equal
    to the single-sample predictive.
    """
    if len(chain) == 0:
        raise ContractError("cannot average an empty chain")
    mean = None
    for t, theta in enumerate(chain, start=1):
        p = forward_probs(spec, theta, x)
        mean = p if mean is None else mean + (p - mean) / t
    return PredictiveTable(np.clip(mean, 0.0, 1.0), source)


def kl_rows(p, q) -> Array:
    """Row-wise KL(p || q) in nats with the 0 log 0 = 0 convention.

    Rows where q has a zero under p mass come back +inf (and are logged).
    """
    p_arr = p.probs if isinstance(p, PredictiveTable) else np.asarray(p, dtype=np.float64)
    q_arr = q.probs if isinstance(q, PredictiveTable) else np.asarray(q, dtype=np.float64)
    if p_arr.shape != q_arr.shape:
        raise ContractError(f"KL over mismatched shapes {p_arr.shape} vs {q_arr.shape}")
    mask = p_arr > 0
    out = np.zeros(p_arr.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(mask, p_arr * (np.log(np.where(mask, p_arr, 1.0))
                                        - np.log(q_arr)), 0.0)
    out = terms.sum(axis=1)
    if np.isinf(out).any():
        log.warning("kl_rows: %d rows have q=0 under p mass (KL=+inf)",
                    int(np.isinf(out).sum()))
    return out


def predictive_nll(table: PredictiveTable, labels) -> float:
    """Mean negative log probability of the true labels."""
    y = np.asarray(labels, dtype=np.intp)
    if y.shape != (table.n,):
        raise ContractError(f"labels shaped {y.shape} for table of {table.n} rows")
    if y.size and (y.min() < 0 or y.max() >= table.n_classes):
        raise ContractError(f"labels must be in [0, {table.n_classes})")
    picked = table.probs[np.arange(table.n), y]
    if (picked == 0).any():
        log.warning("predictive_nll: %d labels have zero probability",
                    int((picked == 0).sum()))
    with np.errstate(divide="ignore"):
        return float(-np.log(picked).mean())


# ---------------------------------------------------------------------------
# online distillation

@dataclass(frozen=True)
class DistillConfig:
    step_size: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    jitter_std: float = 0.0  # optional input noise applied per minibatch
    init_scale: float | None = None


class OnlineDistiller:
    """Consumes a stream of teacher parameters, one student step per sample.

    Usable directly as a chain observer: pass ``observe`` to the sampler.
    """

    def __init__(self, teacher_spec: MlpSpec, student_spec: MlpSpec,
                 calib_x: Array, cfg: DistillConfig,
                 init_omega: Array | None = None):
        if calib_x.shape[0] == 0:
            raise ContractError("distillation needs a non-empty calibration set")
        if teacher_spec.n_classes != student_spec.n_classes:
            raise ContractError("teacher and student must share the class count")
        self.teacher_spec = teacher_spec
        self.student_spec = student_spec
        self.calib_x = np.asarray(calib_x, dtype=np.float64)
        self.cfg = cfg
        self.omega = (init_params(student_spec, child_seed(cfg.seed, 0), cfg.init_scale)
                      if init_omega is None else check_params(student_spec, init_omega).copy())
        self._cycler = EpochCycler(self.calib_x.shape[0], cfg.batch_size,
                                   generator(child_seed(cfg.seed, 1)))
        self._jitter_rng = generator(child_seed(cfg.seed, 2))
        self._opt = SgdMomentum(cfg.momentum)
        self.steps = 0

    def observe(self, t: int, theta: Array) -> None:
        idx = self._cycler.next_indices()
        x = self.calib_x[idx]
        if self.cfg.jitter_std > 0:
            x = x + self.cfg.jitter_std * self._jitter_rng.standard_normal(x.shape)
        teacher = forward_probs(self.teacher_spec, theta, x)
        value, grad = distill_loss_grad(self.student_spec, self.omega, x, teacher)
        if not np.isfinite(value):
            raise DivergenceError(f"distillation loss diverged at step {self.steps + 1}")
        self.omega = self._opt.step(self.omega, grad, self.cfg.step_size)
        self.steps += 1

    def student(self) -> StudentModel:
        return StudentModel(self.student_spec, self.omega.copy())


def distill_loss_grad(spec: MlpSpec, omega: Array, x: Array,
                      teacher_rows: Array) -> tuple[float, Array]:
    """Mean cross-entropy from fixed teacher rows to the student's rows."""
    if teacher_rows.shape[0] != x.shape[0]:
        raise ContractError("teacher rows must align with the input batch")
    tape = ad.Tape()
    layers = param_leaves(tape, spec, omega)
    logp = log_probs_node(tape, spec, layers, x)
    ce = ad.scale(ad.sum_all(ad.mul(tape.constant(teacher_rows), logp)),
                  -1.0 / x.shape[0])
    grads = ad.backward(tape, ce)
    return float(ce.data), grads_to_flat(spec, layers, grads)


def distill_online(teacher_spec: MlpSpec, theta_stream, student_spec: MlpSpec,
                   calib_x: Array, cfg: DistillConfig,
                   init_omega: Array | None = None) -> StudentModel:
    """Run the online distiller over any iterable of teacher parameters."""
    distiller = OnlineDistiller(teacher_spec, student_spec, calib_x, cfg,
                                init_omega=init_omega)
    for t, theta in enumerate(theta_stream, start=1):
        distiller.observe(t, theta)
    return distiller.student()
