"""Utility-aware correction of a predictive distribution.

A correction network q(y | x, lambda) is fit on unlabeled calibration
inputs by coordinate ascent: each iteration freezes the Bayes decisions
implied by the current q, then takes one ascent step on

    - sum_b E_q[ cost(c_b, y) / M ] - sum_b KL(q_b || reference_b)

which is the first-order-in-1/M surrogate of the Jensen lower bound on the
log conditional gain. The reference is either a fixed predictive table
over the calibration set (exact variant) or a student network queried per
batch (amortized variant). Diagnostics for the untruncated bound, the log
conditional gain, and the gap between them live here too.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .decisions import CostSpec, DecisionSet, UtilitySpec, bayes_decisions
from .errors import ContractError, DivergenceError
from .models import (MlpSpec, check_params, forward_log_probs, forward_probs,
                     grads_to_flat, init_params, log_probs_node, param_leaves)
from .optim import make_optimizer
from .predictive import PredictiveTable, StudentModel
from .rng import child_seed, generator
from .samplers import EpochCycler

Array = np.ndarray
log = logging.getLogger(__name__)

DEFAULT_BOUND_FACTOR = 1.25


@dataclass
class CorrectionModel:
    spec: MlpSpec
    lam: Array

    def __post_init__(self):
        self.lam = check_params(self.spec, self.lam)

    def log_probs(self, x: Array) -> Array:
        return forward_log_probs(self.spec, self.lam, x)

    def probs(self, x: Array) -> Array:
        return forward_probs(self.spec, self.lam, x)

    def table(self, x: Array, source: str = "correction") -> PredictiveTable:
        return PredictiveTable(self.probs(x), source)


@dataclass(frozen=True)
class CalibConfig:
    minibatch_size: int = 64
    iterations: int = 500
    step_size: float = 0.1
    warm_start: str = "student"        # student | map | random
    objective: str = "exact"           # exact | amortized
    bound: float | None = None         # M; default 1.25 * max cost entry
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    decision_source: str = "q"         # q (coordinate ascent) | reference

    def __post_init__(self):
        if self.minibatch_size < 1:
            raise ContractError(f"minibatch_size must be >= 1, got {self.minibatch_size}")
        if self.iterations < 0:
            raise ContractError(f"iterations must be >= 0, got {self.iterations}")
        if self.warm_start not in ("student", "map", "random"):
            raise ContractError(f"unknown warm_start {self.warm_start!r}")
        if self.objective not in ("exact", "amortized"):
            raise ContractError(f"unknown objective {self.objective!r}")
        if self.decision_source not in ("q", "reference"):
            raise ContractError(f"unknown decision_source {self.decision_source!r}")


def resolve_bound(cost: CostSpec, bound: float | None) -> float:
    """M for the log-utility translation; must exceed every cost strictly."""
    m = DEFAULT_BOUND_FACTOR * float(cost.matrix.max()) if bound is None else float(bound)
    if m <= 0:
        m = 1.0  # all-zero cost matrix: any positive bound works
    if m <= cost.matrix.max():
        raise ContractError(f"bound M={m} must strictly exceed max cost "
                            f"{cost.matrix.max()}")
    return m


def assign_decisions(model: CorrectionModel, x: Array, cost: CostSpec,
                     decision_set: DecisionSet | None = None) -> Array:
    """Bayes decisions under the current correction model, one per row."""
    probs = model.probs(x)
    if decision_set is not None and len(decision_set.labels) != cost.n_decisions:
        raise ContractError("decision set size does not match the cost matrix")
    return bayes_decisions(probs, cost)


# ---------------------------------------------------------------------------
# training objectives

def _objective_grad(q_spec: MlpSpec, lam: Array, x: Array, ref_log_rows: Array,
                    decisions: Array, cost: CostSpec, bound: float,
                    ) -> tuple[float, Array]:
    b = x.shape[0]
    decisions = np.asarray(decisions, dtype=np.intp)
    if decisions.shape != (b,):
        raise ContractError(f"{decisions.shape[0]} decisions for batch of {b}")
    if ref_log_rows.shape != (b, q_spec.n_classes):
        raise ContractError(
            f"reference rows {ref_log_rows.shape} for batch ({b}, {q_spec.n_classes})")
    cost_rows = cost.matrix[decisions]
    tape = ad.Tape()
    layers = param_leaves(tape, q_spec, lam)
    logq = log_probs_node(tape, q_spec, layers, x)
    q = ad.exp(logq)
    expected_cost = ad.scale(ad.sum_all(ad.mul(q, tape.constant(cost_rows))),
                             -1.0 / bound)
    kl = ad.sum_all(ad.mul(q, ad.sub(logq, tape.constant(ref_log_rows))))
    objective = ad.add(expected_cost, ad.scale(kl, -1.0))
    value = float(objective.data)
    if not np.isfinite(value):
        log.warning("correction objective is non-finite (reference has zeros "
                    "under q mass)")
        return value, np.full(q_spec.n_params, np.nan)
    grads = ad.backward(tape, objective)
    return value, grads_to_flat(q_spec, layers, grads)


def objective_amortized(q_model: CorrectionModel, reference: StudentModel,
                        x: Array, decisions: Array, cost: CostSpec,
                        bound: float) -> tuple[float, Array]:
    """Surrogate objective against a student network, and its lambda-gradient."""
    with np.errstate(divide="ignore"):
        ref_log = reference.log_probs(x)
    return _objective_grad(q_model.spec, q_model.lam, x, ref_log, decisions,
                           cost, bound)


def objective_exact(q_model: CorrectionModel, reference_rows: Array, x: Array,
                    decisions: Array, cost: CostSpec, bound: float,
                    ) -> tuple[float, Array]:
    """Same objective against fixed predictive rows for the batch."""
    rows = np.asarray(reference_rows, dtype=np.float64)
    with np.errstate(divide="ignore"):
        ref_log = np.log(rows)
    return _objective_grad(q_model.spec, q_model.lam, x, ref_log, decisions,
                           cost, bound)


def calibrate(reference, calib_x: Array, cost: CostSpec, cfg: CalibConfig,
              q_spec: MlpSpec | None = None, student: StudentModel | None = None,
              map_params: Array | None = None, return_trace: bool = False):
    """Coordinate-ascent fit of the correction network.

    ``reference`` is a PredictiveTable over ``calib_x`` (exact objective) or
    a StudentModel (amortized). Decisions are re-assigned from the current
    q each iteration and held fixed through the gradient step.
    """
    calib_x = np.asarray(calib_x, dtype=np.float64)
    if calib_x.shape[0] == 0:
        raise ContractError("calibration set must be non-empty")
    if isinstance(reference, PredictiveTable):
        if cfg.objective != "exact":
            raise ContractError("a PredictiveTable reference implies objective='exact'")
        if reference.n != calib_x.shape[0]:
            raise ContractError(
                f"reference table has {reference.n} rows for {calib_x.shape[0]} inputs")
    elif isinstance(reference, StudentModel):
        if cfg.objective != "amortized":
            raise ContractError("a StudentModel reference implies objective='amortized'")
        if student is None:
            student = reference
    else:
        raise ContractError(f"unsupported reference type {type(reference).__name__}")

    if q_spec is None:
        q_spec = student.spec if student is not None else None
    if q_spec is None:
        raise ContractError("q_spec is required when no student is supplied")
    if q_spec.n_classes != cost.n_classes:
        raise ContractError(
            f"correction outputs {q_spec.n_classes} classes, cost wants {cost.n_classes}")

    if cfg.warm_start == "student":
        if student is None:
            raise ContractError("warm_start='student' needs a student model")
        if student.spec != q_spec:
            raise ContractError("student and correction specs differ")
        lam = student.omega.copy()
    elif cfg.warm_start == "map":
        if map_params is None:
            raise ContractError("warm_start='map' needs map_params")
        lam = check_params(q_spec, map_params).copy()
    else:
        lam = init_params(q_spec, child_seed(cfg.seed, 0))

    bound = resolve_bound(cost, cfg.bound)
    opt = make_optimizer(cfg.optimizer, cfg.momentum)
    cycler = EpochCycler(calib_x.shape[0], cfg.minibatch_size,
                         generator(child_seed(cfg.seed, 1)))
    trace: list[float] = []
    model = CorrectionModel(q_spec, lam)
    for t in range(cfg.iterations):
        idx = cycler.next_indices()
        x = calib_x[idx]
        if cfg.decision_source == "q":
            decisions = assign_decisions(model, x, cost)
        elif isinstance(reference, PredictiveTable):
            decisions = bayes_decisions(reference.probs[idx], cost)
        else:
            decisions = bayes_decisions(reference.probs(x), cost)
        if isinstance(reference, PredictiveTable):
            value, grad = objective_exact(model, reference.probs[idx], x,
                                          decisions, cost, bound)
        else:
            value, grad = objective_amortized(model, reference, x, decisions,
                                              cost, bound)
        if not np.isfinite(value) or not np.isfinite(grad).all():
            raise DivergenceError(
                f"calibration diverged at iteration {t}: objective {value}; "
                f"trace tail {trace[-5:]}")
        lam = opt.step(lam, -grad, cfg.step_size)
        model = CorrectionModel(q_spec, lam)
        trace.append(value)
    return (model, trace) if return_trace else model


# ---------------------------------------------------------------------------
# bound / gap diagnostics (exact length-C expectations throughout)

def _check_rows(q_rows: Array, ref_rows: Array, utility: UtilitySpec,
                decisions: Array) -> tuple[Array, Array, Array]:
    q = np.asarray(q_rows, dtype=np.float64)
    p = np.asarray(ref_rows, dtype=np.float64)
    c = np.asarray(decisions, dtype=np.intp)
    if q.shape != p.shape or q.ndim != 2:
        raise ContractError(f"row shapes differ: {q.shape} vs {p.shape}")
    if c.shape != (q.shape[0],):
        raise ContractError(f"{c.shape} decisions for {q.shape[0]} rows")
    if q.shape[1] != utility.matrix.shape[1]:
        raise ContractError("utility matrix class count does not match rows")
    if c.size and (c.min() < 0 or c.max() >= utility.matrix.shape[0]):
        raise ContractError("decision index out of range")
    return q, p, c


def log_gain_per_point(ref_rows: Array, utility: UtilitySpec,
                       decisions: Array) -> Array:
    """log Z_n = log E_p[u(c_n, y)] for each calibration point."""
    p = np.asarray(ref_rows, dtype=np.float64)
    c = np.asarray(decisions, dtype=np.intp)
    z = (p * utility.matrix[c]).sum(axis=1)
    if (z <= 0).any():
        raise ContractError("conditional gain Z_n must be positive")
    return np.log(z)


def lower_bound_u(q_rows: Array, ref_rows: Array, utility: UtilitySpec,
                  decisions: Array) -> float:
    """Jensen lower bound: sum_n E_q[log u(c_n, y)] - KL(q_n || p_n)."""
    q, p, c = _check_rows(q_rows, ref_rows, utility, decisions)
    u_rows = utility.matrix[c]
    mask = q > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        log_u = np.where(mask, np.log(u_rows), 0.0)
        log_ratio = np.where(mask, np.log(np.where(mask, q, 1.0)) - np.log(p), 0.0)
    value = float((np.where(mask, q, 0.0) * (log_u - log_ratio)).sum())
    if not np.isfinite(value):
        log.warning("lower bound is -inf: q puts mass on zero utility or "
                    "zero reference probability")
    return value


@dataclass
class GainDiagnostics:
    """Per-point log gain, Jensen bound, gap, normalizer, and decision."""

    log_gain: Array
    lower_bound: Array
    gap: Array
    z: Array
    decisions: Array

    @property
    def total_log_gain(self) -> float:
        return float(self.log_gain.sum())

    @property
    def total_lower_bound(self) -> float:
        return float(self.lower_bound.sum())

    @property
    def total_gap(self) -> float:
        return float(self.gap.sum())

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(len(self.z)):
                fh.write(json.dumps({
                    "index": i,
                    "log_gain": self.log_gain[i],
                    "lower_bound_u": self.lower_bound[i],
                    "gap": self.gap[i],
                    "z": self.z[i],
                    "decision": int(self.decisions[i]),
                }) + "\n")


def variational_gap(q_rows: Array, ref_rows: Array, utility: UtilitySpec,
                    decisions: Array) -> GainDiagnostics:
    """Per-point gap to the utility-tilted reference.

    gap_n = KL(q_n || p_n * u(c_n, .) / Z_n) with Z_n = E_p[u(c_n, y)];
    the identity sum_n gap_n = log gain - lower bound is verified to 1e-9.
    """
    q, p, c = _check_rows(q_rows, ref_rows, utility, decisions)
    u_rows = utility.matrix[c]
    z = (p * u_rows).sum(axis=1)
    if (z <= 0).any():
        raise ContractError("conditional gain Z_n must be positive")
    tilt = p * u_rows / z[:, None]
    mask = q > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(mask, q * (np.log(np.where(mask, q, 1.0)) - np.log(tilt)), 0.0)
    gap = terms.sum(axis=1)
    log_gain = np.log(z)
    lower = np.empty(len(z))
    for i in range(len(z)):
        lower[i] = lower_bound_u(q[i:i + 1], p[i:i + 1], utility, c[i:i + 1])
    total_gap = float(gap.sum())
    direct = float(log_gain.sum()) - float(lower.sum())
    if np.isfinite(total_gap) and abs(total_gap - direct) > 1e-9:
        raise ContractError(
            f"variational gap identity violated: KL sum {total_gap} vs "
            f"log gain - bound {direct}")
    return GainDiagnostics(log_gain, lower, gap, z, c)


def taylor_residual(q_rows: Array, decisions: Array, cost: CostSpec,
                    bound: float) -> float:
    """| sum_n E_q[log(M - cost)] - sum_n (log M - E_q[cost]/M) |."""
    q = np.asarray(q_rows, dtype=np.float64)
    c = np.asarray(decisions, dtype=np.intp)
    m = resolve_bound(cost, bound)
    cost_rows = cost.matrix[c]
    exact = (q * np.log(m - cost_rows)).sum()
    linear = (q * (np.log(m) - cost_rows / m)).sum()
    return float(abs(exact - linear))
