"""MLP classifier, Gaussian prior, and the training energies built on them.

The network is a stack of dense layers with relu activations and a row-wise
log-softmax head. Parameters live in a single flat float64 vector so the
samplers and optimizers can treat every model identically; :func:`unpack`
exposes the per-layer views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .rng import generator

Array = np.ndarray


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths [D, h_1, ..., C]; relu hidden activations, log-softmax out."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ContractError("MlpSpec needs at least input and output layers")
        if sizes[-1] < 2:
            raise ContractError(f"need C >= 2 output classes, got {sizes[-1]}")
        if any(s < 1 for s in sizes):
            raise ContractError(f"layer sizes must be positive: {sizes}")

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass(frozen=True)
class PriorConfig:
    """Isotropic zero-mean Gaussian over all parameters, precision tau > 0."""

    precision: float = 1.0

    def __post_init__(self):
        if not self.precision > 0:
            raise ContractError(f"prior precision must be > 0, got {self.precision}")


@dataclass(frozen=True)
class ClassWeights:
    """Positive per-class loss weights for the class-weighted SGD baseline."""

    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not w or any(x <= 0 for x in w):
            raise ContractError(f"class weights must all be > 0: {w}")

    def as_array(self) -> Array:
        return np.asarray(self.weights, dtype=np.float64)


def check_params(spec: MlpSpec, theta: Array) -> Array:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ContractError(
            f"parameter vector has shape {theta.shape}, spec wants ({spec.n_params},)")
    return theta


def init_params(spec: MlpSpec, seed: int, scale: float | None = None) -> Array:
    """He-style random weights, zero biases, as one flat vector."""
    rng = generator(seed)
    chunks = []
    sizes = spec.layer_sizes
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        std = scale if scale is not None else np.sqrt(2.0 / fan_in)
        chunks.append(rng.normal(0.0, std, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unpack(spec: MlpSpec, theta: Array) -> list[tuple[Array, Array]]:
    """Split a flat vector into per-layer (W, b) views, W shaped (in, out)."""
    theta = check_params(spec, theta)
    out = []
    pos = 0
    sizes = spec.layer_sizes
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = theta[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = theta[pos:pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def pack(spec: MlpSpec, layers: list[tuple[Array, Array]]) -> Array:
    chunks = []
    for w, b in layers:
        chunks.append(np.ravel(w))
        chunks.append(np.ravel(b))
    theta = np.concatenate(chunks)
    return check_params(spec, theta)


# ---------------------------------------------------------------------------
# forward passes

def _check_batch(spec: MlpSpec, x_batch: Array) -> Array:
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_features:
        raise ContractError(
            f"input batch has shape {x.shape}, spec wants (B, {spec.n_features})")
    return x


def forward_log_probs(spec: MlpSpec, theta: Array, x_batch: Array) -> Array:
    """Row log-probabilities, plain numpy (no tape)."""
    x = _check_batch(spec, x_batch)
    h = x
    layers = unpack(spec, theta)
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    shifted = h - h.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_probs(spec: MlpSpec, theta: Array, x_batch: Array) -> Array:
    """Row-stochastic class probabilities for a batch."""
    return np.exp(forward_log_probs(spec, theta, x_batch))


def param_leaves(tape: ad.Tape, spec: MlpSpec, theta: Array) -> list[tuple[ad.Tensor, ad.Tensor]]:
    """Register per-layer (W, b) parameter leaves for ``theta`` on ``tape``."""
    return [(tape.leaf(w, param=True), tape.leaf(b, param=True))
            for w, b in unpack(spec, theta)]


def log_probs_node(tape: ad.Tape, spec: MlpSpec,
                   layers: list[tuple[ad.Tensor, ad.Tensor]],
                   x_batch: Array) -> ad.Tensor:
    """Differentiable log-probabilities given per-layer parameter tensors."""
    h = tape.constant(_check_batch(spec, x_batch))
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return ad.log_softmax_rows(h)


def grads_to_flat(spec: MlpSpec, layers: list[tuple[ad.Tensor, ad.Tensor]],
                  grads: dict[int, Array]) -> Array:
    """Assemble per-leaf gradients back into flat parameter order."""
    chunks = []
    for w, b in layers:
        chunks.append(np.ravel(grads[w.node_id]))
        chunks.append(np.ravel(grads[b.node_id]))
    flat = np.concatenate(chunks)
    if flat.shape != (spec.n_params,):
        raise ContractError("gradient does not cover every parameter")
    return flat


# ---------------------------------------------------------------------------
# energies

def _check_labeled_batch(spec: MlpSpec, x: Array, y: Array) -> tuple[Array, Array]:
    x = _check_batch(spec, x)
    y = np.asarray(y)
    if y.shape != (x.shape[0],):
        raise ContractError(f"labels shaped {y.shape} for batch of {x.shape[0]}")
    if x.shape[0] == 0:
        raise ContractError("minibatch must be non-empty")
    y = y.astype(np.intp)
    if y.min() < 0 or y.max() >= spec.n_classes:
        raise ContractError(f"labels must be in [0, {spec.n_classes})")
    return x, y


def _potential_node(tape: ad.Tape, spec: MlpSpec,
                    layers: list[tuple[ad.Tensor, ad.Tensor]],
                    prior: PriorConfig, x: Array, y: Array,
                    n_total: int) -> ad.Tensor:
    logp = log_probs_node(tape, spec, layers, x)
    picked = ad.gather_rows(logp, y)
    # minibatch likelihood rescaled to full-data scale (unbiased energy)
    energy = ad.scale(ad.sum_all(picked), -float(n_total) / x.shape[0])
    for w, b in layers:
        energy = ad.add(energy, ad.scale(ad.sum_all(ad.mul(w, w)), 0.5 * prior.precision))
        energy = ad.add(energy, ad.scale(ad.sum_all(ad.mul(b, b)), 0.5 * prior.precision))
    return energy


def potential_energy(spec: MlpSpec, theta: Array, prior: PriorConfig,
                     minibatch: tuple[Array, Array], n_total: int) -> float:
    """Minibatch potential: (N/|B|) * sum of negative log-likelihood + (tau/2)||theta||^2."""
    value, _ = potential_energy_grad(spec, theta, prior, minibatch, n_total)
    return value


def potential_energy_grad(spec: MlpSpec, theta: Array, prior: PriorConfig,
                          minibatch: tuple[Array, Array],
                          n_total: int) -> tuple[float, Array]:
    x, y = _check_labeled_batch(spec, minibatch[0], minibatch[1])
    if n_total < x.shape[0]:
        raise ContractError(f"n_total={n_total} smaller than batch of {x.shape[0]}")
    tape = ad.Tape()
    layers = param_leaves(tape, spec, theta)
    energy = _potential_node(tape, spec, layers, prior, x, y, n_total)
    grads = ad.backward(tape, energy)
    return float(energy.data), grads_to_flat(spec, layers, grads)


def nll(spec: MlpSpec, theta: Array, x: Array, y: Array) -> float:
    """Sum of -log p(y_b | x_b, theta) over the batch."""
    x, y = _check_labeled_batch(spec, x, y)
    logp = forward_log_probs(spec, theta, x)
    return float(-logp[np.arange(x.shape[0]), y].sum())


def weighted_ce(spec: MlpSpec, theta: Array, batch: tuple[Array, Array],
                weights: ClassWeights) -> float:
    value, _ = weighted_ce_grad(spec, theta, batch, weights)
    return value


def weighted_ce_grad(spec: MlpSpec, theta: Array, batch: tuple[Array, Array],
                     weights: ClassWeights) -> tuple[float, Array]:
    """Class-weighted cross-entropy, normalized by the total weight in the batch."""
    x, y = _check_labeled_batch(spec, batch[0], batch[1])
    warr = weights.as_array()
    if warr.shape != (spec.n_classes,):
        raise ContractError(
            f"{warr.shape[0]} class weights for {spec.n_classes} classes")
    per_point = warr[y]
    tape = ad.Tape()
    layers = param_leaves(tape, spec, theta)
    logp = log_probs_node(tape, spec, layers, x)
    picked = ad.gather_rows(logp, y)
    weighted = ad.mul(picked, tape.constant(per_point))
    loss = ad.scale(ad.sum_all(weighted), -1.0 / per_point.sum())
    grads = ad.backward(tape, loss)
    return float(loss.data), grads_to_flat(spec, layers, grads)
