"""Point training and posterior samplers over flat parameter vectors.

The SGMCMC kernel follows the discretization

    theta_k = theta_{k-1} + v_{k-1}
    v_k     = v_{k-1} - alpha_k * grad_U(theta_k) - eta * v_{k-1}
              + sqrt(2 * (eta - gamma_hat) * alpha_k * temperature) * eps_k

with the gradient evaluated at the freshly moved position. Setting the
momentum factor to zero (eta = 1, gamma_hat = 0) recovers SGLD. grad_U is
the minibatch estimate of the full-data potential, so step sizes quoted
per-datum elsewhere must be divided by the dataset size before landing in
:class:`SghmcConfig` (the experiment harness does this translation).

One chain is strictly sequential; concurrent chains must use distinct
seeds (derive them with :func:`losscal.rng.child_seed`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .decisions import CostSpec, bayes_decisions, cost_to_utility
from .errors import ContractError, DivergenceError
from .models import (MlpSpec, PriorConfig, check_params, forward_probs,
                     grads_to_flat, init_params, log_probs_node, param_leaves,
                     potential_energy_grad, unpack)
from .optim import make_optimizer, step_size_at
from .rng import child_seed, generator

Array = np.ndarray
log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SghmcConfig:
    step_size: float
    friction: float = 0.5          # eta
    gamma_hat: float = 0.0
    burn_in: int = 0
    thinning: int = 1
    total_samples: int = 0
    seed: int = 0
    batch_size: int | None = None  # None - full batch
    schedule: str = "constant"
    temperature: float = 1.0       # 0 disables injected noise

    def __post_init__(self):
        if self.step_size < 0:
            raise ContractError(f"step_size must be >= 0, got {self.step_size}")
        if not 0.0 < self.friction <= 1.0:
            raise ContractError(f"friction must be in (0, 1], got {self.friction}")
        if not 0.0 <= self.gamma_hat < self.friction:
            raise ContractError(
                f"need 0 <= gamma_hat < friction, got {self.gamma_hat} vs {self.friction}")
        if self.thinning < 1:
            raise ContractError(f"thinning must be >= 1, got {self.thinning}")
        if self.burn_in < 0 or self.total_samples < 0:
            raise ContractError("burn_in and total_samples must be >= 0")
        if self.temperature < 0:
            raise ContractError(f"temperature must be >= 0, got {self.temperature}")

    @property
    def total_iterations(self) -> int:
        return self.burn_in + self.thinning * self.total_samples


@dataclass
class SamplerState:
    theta: Array
    velocity: Array
    iteration: int
    rng: np.random.Generator

    def __post_init__(self):
        if self.velocity.shape != self.theta.shape:
            raise ContractError("velocity and theta must have the same length")


@dataclass
class ChainStore:
    """Ordered posterior parameter samples plus provenance metadata."""

    samples: list[Array]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {s.shape for s in self.samples}
        if len(lengths) > 1:
            raise ContractError(f"samples have mixed shapes: {lengths}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def stack(self) -> Array:
        return np.stack(self.samples)


@dataclass
class ViPosterior:
    """Mean-field Gaussian over parameters: per-coordinate mean and log std."""

    mean: Array
    log_std: Array

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ContractError("mean and log_std must have the same length")

    @property
    def std(self) -> Array:
        return np.exp(self.log_std)


class EpochCycler:
    """Without-replacement minibatch cycling: shuffle, slice, reshuffle."""

    def __init__(self, n: int, batch_size: int | None, rng: np.random.Generator):
        if n < 1:
            raise ContractError("cannot cycle an empty dataset")
        self.n = n
        self.batch = n if batch_size is None else min(int(batch_size), n)
        if self.batch < 1:
            raise ContractError(f"batch size must be >= 1, got {batch_size}")
        self.rng = rng
        self._perm: Array | None = None
        self._pos = 0

    def next_indices(self) -> Array:
        if self._perm is None or self._pos >= self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return idx


# ---------------------------------------------------------------------------
# SGMCMC kernel

def sghmc_step(state: SamplerState, grad_fn: Callable[[Array], Array],
               cfg: SghmcConfig, step_size: float | None = None) -> SamplerState:
    """One position-then-velocity update; gradient taken at the new position."""
    alpha = cfg.step_size if step_size is None else step_size
    theta = state.theta + state.velocity
    grad = np.asarray(grad_fn(theta), dtype=np.float64)
    if grad.shape != theta.shape:
        raise ContractError(f"gradient shape {grad.shape} vs theta {theta.shape}")
    if not np.isfinite(grad).all():
        raise DivergenceError(
            f"non-finite gradient at iteration {state.iteration + 1}")
    noise_scale = np.sqrt(2.0 * (cfg.friction - cfg.gamma_hat) * alpha * cfg.temperature)
    eps = state.rng.standard_normal(theta.shape[0])
    velocity = (state.velocity - alpha * grad - cfg.friction * state.velocity
                + noise_scale * eps)
    return SamplerState(theta, velocity, state.iteration + 1, state.rng)


def run_chain_potential(grad_fn: Callable[[Array], Array], init: Array,
                        cfg: SghmcConfig, meta: dict | None = None,
                        observer: Callable[[int, Array], None] | None = None,
                        ) -> ChainStore:
    """Drive the kernel against an arbitrary potential gradient.

    Runs ``burn_in`` iterations, then records one sample every ``thinning``
    iterations until ``total_samples`` are collected. ``observer`` is called
    with (post-burn-in iteration index, current theta) on every post-burn-in
    iteration, which is how online distillation taps the sample stream.
    """
    init = np.asarray(init, dtype=np.float64)
    state = SamplerState(init.copy(), np.zeros_like(init), 0,
                         generator(child_seed(cfg.seed, 0)))
    total = cfg.total_iterations
    samples: list[Array] = []
    for k in range(1, total + 1):
        alpha = step_size_at(cfg.step_size, k - 1, total, cfg.schedule)
        state = sghmc_step(state, grad_fn, cfg, step_size=alpha)
        t = k - cfg.burn_in
        if t > 0:
            if observer is not None:
                observer(t, state.theta)
            if t % cfg.thinning == 0 and len(samples) < cfg.total_samples:
                samples.append(state.theta.copy())
    full_meta = {"burn_in": cfg.burn_in, "thinning": cfg.thinning,
                 "seed": cfg.seed, "n_samples": len(samples)}
    full_meta.update(meta or {})
    return ChainStore(samples, full_meta)


def _bnn_grad_fn(spec: MlpSpec, prior: PriorConfig, dataset,
                 cfg: SghmcConfig) -> Callable[[Array], Array]:
    if not dataset.labeled:
        raise ContractError("posterior sampling needs a labeled dataset")
    cycler = EpochCycler(dataset.n, cfg.batch_size, generator(child_seed(cfg.seed, 1)))

    def grad_fn(theta: Array) -> Array:
        idx = cycler.next_indices()
        _, grad = potential_energy_grad(
            spec, theta, prior, (dataset.X[idx], dataset.y[idx]), dataset.n)
        return grad

    return grad_fn


def run_chain(spec: MlpSpec, prior: PriorConfig, dataset, cfg: SghmcConfig,
              init: Array, observer=None, sampler_name: str = "sghmc") -> ChainStore:
    """SGHMC over the BNN posterior with shuffled epoch minibatch cycling."""
    init = check_params(spec, init)
    meta = {"sampler": sampler_name,
            "config": {"step_size": cfg.step_size, "friction": cfg.friction,
                       "gamma_hat": cfg.gamma_hat, "batch_size": cfg.batch_size,
                       "schedule": cfg.schedule, "temperature": cfg.temperature,
                       "total_samples": cfg.total_samples}}
    return run_chain_potential(_bnn_grad_fn(spec, prior, dataset, cfg),
                               init, cfg, meta=meta, observer=observer)


def sgld_chain(spec: MlpSpec, prior: PriorConfig, dataset, cfg: SghmcConfig,
               init: Array, observer=None) -> ChainStore:
    """SGLD: the same kernel with the momentum factor set to zero."""
    sgld_cfg = replace(cfg, friction=1.0, gamma_hat=0.0)
    return run_chain(spec, prior, dataset, sgld_cfg, init,
                     observer=observer, sampler_name="sgld")


def lc_sghmc_chain(spec: MlpSpec, prior: PriorConfig, dataset, cost: CostSpec,
                   cfg: SghmcConfig, init: Array, observer=None,
                   sampler_name: str = "lc-sghmc") -> ChainStore:
    """Sample the utility-scaled posterior: the potential is lowered by the
    log expected utility of the per-theta optimal decisions.

    For each minibatch point the decision is recomputed from the current
    theta's own predictive and then held fixed inside the gradient. Rows
    whose utility is constant contribute a constant and are skipped, so a
    flat utility reproduces the plain SGHMC trajectory bit for bit.
    """
    init = check_params(spec, init)
    if cost.n_classes != spec.n_classes:
        raise ContractError(
            f"cost matrix covers {cost.n_classes} classes, model has {spec.n_classes}")
    utility = cost_to_utility(cost)
    if (utility.matrix <= 0).any():
        raise ContractError("utility-scaled sampling needs M > max cost strictly")
    if not dataset.labeled:
        raise ContractError("posterior sampling needs a labeled dataset")
    cycler = EpochCycler(dataset.n, cfg.batch_size, generator(child_seed(cfg.seed, 1)))
    u_matrix = utility.matrix
    ones_col = np.ones((spec.n_classes, 1))

    def grad_fn(theta: Array) -> Array:
        idx = cycler.next_indices()
        x, y = dataset.X[idx], dataset.y[idx]
        _, grad = potential_energy_grad(spec, theta, prior, (x, y), dataset.n)
        probs = forward_probs(spec, theta, x)
        decisions = bayes_decisions(probs, cost)
        u_rows = u_matrix[decisions]
        varying = np.ptp(u_rows, axis=1) > 0
        if varying.any():
            tape = ad.Tape()
            layers = param_leaves(tape, spec, theta)
            logp = log_probs_node(tape, spec, layers, x[varying])
            gains = ad.matmul(ad.mul(ad.exp(logp), tape.constant(u_rows[varying])),
                              tape.constant(ones_col))
            bonus = ad.scale(ad.sum_all(ad.log(gains)), -float(dataset.n) / x.shape[0])
            grads = ad.backward(tape, bonus)
            grad = grad + grads_to_flat(spec, layers, grads)
        return grad

    meta = {"sampler": sampler_name,
            "config": {"step_size": cfg.step_size, "friction": cfg.friction,
                       "gamma_hat": cfg.gamma_hat, "batch_size": cfg.batch_size,
                       "schedule": cfg.schedule, "temperature": cfg.temperature,
                       "total_samples": cfg.total_samples}}
    return run_chain_potential(grad_fn, init, cfg, meta=meta, observer=observer)


# ---------------------------------------------------------------------------
# MAP training

@dataclass(frozen=True)
class MapConfig:
    step_size: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int | None = None
    seed: int = 0
    schedule: str = "constant"
    optimizer: str = "adam"  # adam is robust to the full-data energy scale


def map_train(spec: MlpSpec, prior: PriorConfig, dataset, cfg: MapConfig,
              init: Array | None = None, return_trace: bool = False):
    """Stochastic-gradient minimization of the potential; returns the final
    parameter vector."""
    if not dataset.labeled or dataset.n == 0:
        raise ContractError("MAP training needs a non-empty labeled dataset")
    theta = init_params(spec, child_seed(cfg.seed, 0)) if init is None \
        else check_params(spec, init).copy()
    opt = make_optimizer(cfg.optimizer, cfg.momentum)
    cycler_rng = generator(child_seed(cfg.seed, 1))
    batch = dataset.n if cfg.batch_size is None else min(cfg.batch_size, dataset.n)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        lr = step_size_at(cfg.step_size, epoch, cfg.epochs, cfg.schedule)
        perm = cycler_rng.permutation(dataset.n)
        epoch_loss = 0.0
        for start in range(0, dataset.n, batch):
            idx = perm[start:start + batch]
            value, grad = potential_energy_grad(
                spec, theta, prior, (dataset.X[idx], dataset.y[idx]), dataset.n)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"MAP training diverged at epoch {epoch}: energy {value}")
            theta = opt.step(theta, grad, lr)
            epoch_loss += value * len(idx) / dataset.n
        trace.append(epoch_loss)
        log.debug("map epoch %d energy %.6f", epoch, epoch_loss)
    return (theta, trace) if return_trace else theta


# ---------------------------------------------------------------------------
# mean-field variational inference

@dataclass(frozen=True)
class ViConfig:
    step_size: float = 0.01
    iterations: int = 2000
    batch_size: int | None = None
    seed: int = 0
    init_log_std: float = -3.0


def gaussian_prior_kl(mean: Array, log_std: Array, precision: float) -> float:
    """KL(q || N(0, 1/tau I)) for a diagonal Gaussian q, in nats."""
    var = np.exp(2.0 * log_std)
    return float(0.5 * np.sum(precision * (var + mean ** 2) - 1.0
                              - np.log(precision) - 2.0 * log_std))


def elbo_value_and_grad(spec: MlpSpec, mean: Array, log_std: Array,
                        prior: PriorConfig, minibatch, n_total: int,
                        eps: Array) -> tuple[float, Array, Array]:
    """Single-sample reparameterized ELBO and its gradient in (mean, log_std).

    The expected log-likelihood is estimated with theta = mean + std * eps
    and differentiated on the tape; the KL to the prior is closed form.
    ``minibatch`` may be None for the no-data case.
    """
    mean = check_params(spec, mean)
    log_std = check_params(spec, log_std)
    std = np.exp(log_std)
    g_mean = np.zeros_like(mean)
    g_log_std = np.zeros_like(log_std)
    loglik = 0.0
    if minibatch is not None:
        x, y = minibatch
        if x.shape[0] == 0:
            raise ContractError("minibatch must be non-empty when given")
        tape = ad.Tape()
        mean_leaves = param_leaves(tape, spec, mean)
        ls_leaves = param_leaves(tape, spec, log_std)
        eps_layers = unpack(spec, np.asarray(eps, dtype=np.float64))
        theta_layers = []
        for (m_w, m_b), (s_w, s_b), (e_w, e_b) in zip(mean_leaves, ls_leaves, eps_layers):
            w = ad.add(m_w, ad.mul(ad.exp(s_w), tape.constant(e_w)))
            b = ad.add(m_b, ad.mul(ad.exp(s_b), tape.constant(e_b)))
            theta_layers.append((w, b))
        logp = log_probs_node(tape, spec, theta_layers, x)
        picked = ad.gather_rows(logp, np.asarray(y, dtype=np.intp))
        ll_node = ad.scale(ad.sum_all(picked), float(n_total) / x.shape[0])
        loglik = float(ll_node.data)
        grads = ad.backward(tape, ll_node)
        g_mean = grads_to_flat(spec, mean_leaves, grads)
        g_log_std = grads_to_flat(spec, ls_leaves, grads)
    tau = prior.precision
    kl = gaussian_prior_kl(mean, log_std, tau)
    g_mean = g_mean - tau * mean
    g_log_std = g_log_std - (tau * std ** 2 - 1.0)
    return loglik - kl, g_mean, g_log_std


def vi_fit(spec: MlpSpec, prior: PriorConfig, dataset, cfg: ViConfig,
           return_trace: bool = False):
    """Maximize the ELBO by Adam over the mean-field parameters."""
    rng = generator(child_seed(cfg.seed, 0))
    mean = init_params(spec, child_seed(cfg.seed, 1), scale=0.1)
    log_std = np.full(spec.n_params, float(cfg.init_log_std))
    opt = make_optimizer("adam")
    packed = np.concatenate([mean, log_std])
    n = dataset.n if dataset is not None else 0
    cycler = None
    if n > 0:
        cycler = EpochCycler(n, cfg.batch_size, generator(child_seed(cfg.seed, 2)))
    trace: list[float] = []
    p = spec.n_params
    for _ in range(cfg.iterations):
        mean, log_std = packed[:p], packed[p:]
        eps = rng.standard_normal(p)
        batch = None
        if cycler is not None:
            idx = cycler.next_indices()
            batch = (dataset.X[idx], dataset.y[idx])
        elbo, g_mean, g_ls = elbo_value_and_grad(
            spec, mean, log_std, prior, batch, n, eps)
        if not np.isfinite(elbo):
            raise DivergenceError(f"ELBO diverged: {elbo}")
        packed = opt.step(packed, -np.concatenate([g_mean, g_ls]), cfg.step_size)
        trace.append(elbo)
    post = ViPosterior(packed[:p].copy(), packed[p:].copy())
    return (post, trace) if return_trace else post


def vi_sample(post: ViPosterior, count: int, seed: int) -> ChainStore:
    """Draw independent parameter samples from a fitted mean-field posterior."""
    rng = generator(seed)
    std = post.std
    samples = [post.mean + std * rng.standard_normal(post.mean.shape[0])
               for _ in range(count)]
    return ChainStore(samples, {"sampler": "vi", "seed": seed, "n_samples": count})
