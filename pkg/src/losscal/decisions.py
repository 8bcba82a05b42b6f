"""Cost-sensitive decision kernel.

Costs are |A| x C matrices: rows index decisions, columns index true
classes. Utilities are the bounded complement u = M - cost. Bayes decisions
minimize expected cost row-wise; exact ties resolve to the lowest decision
index, and referral (when present) always sits last, so ties prefer
classifying.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

Array = np.ndarray

UNDEFINED = None  # sentinel for metrics over an empty set, serialized as null


@dataclass(frozen=True)
class CostSpec:
    """Decision-cost matrix with an upper bound M >= max entry."""

    matrix: Array
    bound: float

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 2:
            raise ContractError(f"cost matrix must be (|A|, C>=2), got {m.shape}")
        if (m < 0).any():
            raise ContractError("cost entries must be non-negative")
        if not np.isfinite(m).all() or not np.isfinite(self.bound):
            raise ContractError("cost matrix and bound must be finite")
        if self.bound < m.max():
            raise ContractError(
                f"bound M={self.bound} below max cost entry {m.max()}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "bound", float(self.bound))

    @property
    def n_decisions(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class UtilitySpec:
    """Non-negative utility matrix, usually M - cost."""

    matrix: Array

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ContractError(f"utility matrix must be 2-D, got {m.shape}")
        if (m < 0).any():
            raise ContractError("utility entries must be >= 0")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class DecisionSet:
    """Decision labels; referral_index marks the reject option (last slot)."""

    labels: tuple[str, ...]
    referral_index: int | None = None

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        object.__setattr__(self, "labels", labels)
        if self.referral_index is not None:
            if self.referral_index != len(labels) - 1:
                raise ContractError("referral must be the last decision")


def class_decision_set(class_names) -> DecisionSet:
    return DecisionSet(tuple(class_names), None)


def selective_decision_set(class_names) -> DecisionSet:
    labels = tuple(class_names) + ("refer",)
    return DecisionSet(labels, referral_index=len(labels) - 1)


# ---------------------------------------------------------------------------
# core operations

def cost_to_utility(cost: CostSpec) -> UtilitySpec:
    """u = M - cost, elementwise."""
    return UtilitySpec(cost.bound - cost.matrix)


def _check_row(q_row: Array, n_classes: int) -> Array:
    q = np.asarray(q_row, dtype=np.float64)
    if q.shape != (n_classes,):
        raise ContractError(f"probability row {q.shape} for {n_classes} classes")
    return q


def expected_cost(q_row: Array, cost: CostSpec, decision: int) -> float:
    """Dot product of one cost row with the class probabilities."""
    q = _check_row(q_row, cost.n_classes)
    if not 0 <= decision < cost.n_decisions:
        raise ContractError(
            f"decision {decision} out of range for {cost.n_decisions} decisions")
    return float(cost.matrix[decision] @ q)


def conditional_gain(q_row: Array, utility: UtilitySpec, decision: int) -> float:
    """Expected utility of ``decision`` under the probability row."""
    q = _check_row(q_row, utility.matrix.shape[1])
    if not 0 <= decision < utility.matrix.shape[0]:
        raise ContractError(
            f"decision {decision} out of range for {utility.matrix.shape[0]} decisions")
    return float(utility.matrix[decision] @ q)


def bayes_decision(q_row: Array, cost: CostSpec,
                   decision_set: DecisionSet | None = None) -> int:
    """Lowest-index minimizer of expected cost for one probability row."""
    q = _check_row(q_row, cost.n_classes)
    if decision_set is not None and len(decision_set.labels) != cost.n_decisions:
        raise ContractError("decision set size does not match the cost matrix")
    return int(np.argmin(cost.matrix @ q))


def bayes_decisions(probs: Array, cost: CostSpec) -> Array:
    """Vectorized bayes_decision over an N x C table."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != cost.n_classes:
        raise ContractError(f"table {p.shape} for {cost.n_classes} classes")
    return np.argmin(p @ cost.matrix.T, axis=1)


def selective_extend(base_cost: CostSpec, r: float) -> CostSpec:
    """Append a constant-cost referral row; bound grows to cover r."""
    if r < 0:
        raise ContractError(f"referral cost must be >= 0, got {r}")
    if base_cost.n_decisions != base_cost.n_classes:
        raise ContractError("selective extension expects a C x C base cost")
    row = np.full((1, base_cost.n_classes), float(r))
    return CostSpec(np.vstack([base_cost.matrix, row]), max(base_cost.bound, float(r)))


@dataclass
class DecisionMetrics:
    avg_cost: float
    accuracy: float | None
    referral_rate: float
    nll: float | None
    n_points: int = 0
    n_referred: int = 0

    def to_dict(self) -> dict:
        return {
            "avg_cost": self.avg_cost,
            "accuracy": self.accuracy,
            "referral_rate": self.referral_rate,
            "nll": self.nll,
            "n_points": self.n_points,
            "n_referred": self.n_referred,
        }


def decision_metrics(probs: Array, labels: Array, cost: CostSpec,
                     decision_set: DecisionSet | None = None) -> DecisionMetrics:
    """Realized cost / accuracy / referral rate / NLL of Bayes decisions.

    Accuracy and NLL are computed over non-referred points only and come
    back as None (never 0) when everything was referred.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ContractError(f"table {p.shape} against labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= cost.n_classes):
        raise ContractError(f"labels must be in [0, {cost.n_classes})")
    decisions = bayes_decisions(p, cost)
    realized = cost.matrix[decisions, y]
    ref_idx = decision_set.referral_index if decision_set is not None else None
    if ref_idx is None:
        kept = np.ones(len(y), dtype=bool)
    else:
        kept = decisions != ref_idx
    n_kept = int(kept.sum())
    accuracy = None if n_kept == 0 else float((decisions[kept] == y[kept]).mean())
    if n_kept == 0:
        nll_val = None
    else:
        with np.errstate(divide="ignore"):
            nll_val = float(-np.log(p[kept, y[kept]]).mean())
    return DecisionMetrics(
        avg_cost=float(realized.mean()),
        accuracy=accuracy,
        referral_rate=float(1.0 - n_kept / len(y)) if len(y) else 0.0,
        nll=nll_val,
        n_points=len(y),
        n_referred=len(y) - n_kept,
    )


# ---------------------------------------------------------------------------
# presets and JSON IO

DEFAULT_BOUND_FACTOR = 1.25  # M = 1.25 * max cost unless specified


def _bound(matrix: Array, bound: float | None) -> float:
    return float(bound) if bound is not None else DEFAULT_BOUND_FACTOR * float(np.max(matrix))


def zero_one_cost(n_classes: int, bound: float | None = None) -> CostSpec:
    m = 1.0 - np.eye(n_classes)
    return CostSpec(m, _bound(m, bound))


def asymmetric_binary_cost(minority_miss: float = 1.0, majority_miss: float = 0.1,
                           bound: float | None = None) -> CostSpec:
    """Binary cost penalizing false negatives on the minority (positive) class."""
    m = np.array([[0.0, minority_miss], [majority_miss, 0.0]])
    return CostSpec(m, _bound(m, bound))


def favored_class_cost(n_classes: int, favored: tuple[int, ...],
                       favored_miss: float = 0.7, other_miss: float = 1.0,
                       bound: float | None = None) -> CostSpec:
    """Wrong decisions landing on a favored class cost less than other errors."""
    m = np.full((n_classes, n_classes), other_miss)
    for c in favored:
        m[c, :] = favored_miss
    np.fill_diagonal(m, 0.0)
    return CostSpec(m, _bound(m, bound))


# Driving-scene cost (12 classes). The published table lists ground truth per
# row and decision per column; rows here are decisions, so it is transposed.
_CAMVID_CLASSES = ("sky", "building", "pole", "road", "pavement", "tree",
                   "sign", "fence", "car", "pedestrian", "cyclist", "unlabelled")
_CAMVID_BY_TRUTH = np.array([
    [0.0, 0.8, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.4, 0.4, 0.4, 0.6],
    [0.8, 0.0, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.4, 0.4, 0.4, 0.6],
    [0.8, 0.8, 0.0, 0.6, 0.6, 0.6, 0.6, 0.6, 0.4, 0.4, 0.4, 0.6],
    [0.8, 0.8, 0.6, 0.0, 0.6, 0.6, 0.6, 0.6, 0.4, 0.4, 0.4, 0.6],
    [0.8, 0.8, 0.6, 0.6, 0.0, 0.6, 0.6, 0.6, 0.4, 0.4, 0.4, 0.6],
    [0.8, 0.8, 0.6, 0.6, 0.6, 0.0, 0.6, 0.6, 0.4, 0.4, 0.4, 0.6],
    [0.8, 0.8, 0.6, 0.6, 0.6, 0.6, 0.0, 0.6, 0.4, 0.4, 0.4, 0.6],
    [0.8, 0.8, 0.6, 0.6, 0.6, 0.6, 0.6, 0.0, 0.4, 0.4, 0.4, 0.6],
    [0.8, 0.8, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.0, 0.4, 0.4, 0.6],
    [0.8, 0.8, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.4, 0.0, 0.2, 0.6],
    [0.8, 0.8, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.4, 0.2, 0.0, 0.6],
    [0.8, 0.8, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.4, 0.4, 0.4, 0.0],
])


def preset(name: str, **kwargs) -> tuple[CostSpec, DecisionSet]:
    """Built-in cost matrices addressable by name."""
    if name == "synthetic-asymmetric":
        cost = asymmetric_binary_cost(bound=kwargs.get("bound"))
        return cost, class_decision_set(("negative", "positive"))
    if name == "zero-one":
        n = int(kwargs.get("n_classes", 2))
        cost = zero_one_cost(n, bound=kwargs.get("bound"))
        return cost, class_decision_set([f"class{i}" for i in range(n)])
    if name == "selective":
        n = int(kwargs.get("n_classes", 2))
        r = float(kwargs["r"])
        cost = selective_extend(zero_one_cost(n, bound=kwargs.get("bound")), r)
        return cost, selective_decision_set([f"class{i}" for i in range(n)])
    if name == "mnist-38":
        cost = favored_class_cost(10, (3, 8), bound=kwargs.get("bound"))
        return cost, class_decision_set([str(i) for i in range(10)])
    if name == "cifar-auto-truck":
        classes = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
        cost = favored_class_cost(10, (1, 9), bound=kwargs.get("bound"))
        return cost, class_decision_set(classes)
    if name == "camvid":
        cost = CostSpec(_CAMVID_BY_TRUTH.T, _bound(_CAMVID_BY_TRUTH, kwargs.get("bound")))
        return cost, class_decision_set(_CAMVID_CLASSES)
    raise ContractError(f"unknown cost preset {name!r}")


PRESET_NAMES = ("synthetic-asymmetric", "zero-one", "selective",
                "mnist-38", "cifar-auto-truck", "camvid")


def load_cost_json(path) -> tuple[CostSpec, DecisionSet]:
    """Read {decisions, classes, matrix, M} from a JSON file."""
    with open(path) as fh:
        payload = json.load(fh)
    for key in ("decisions", "classes", "matrix", "M"):
        if key not in payload:
            raise ContractError(f"cost file {path} missing key {key!r}")
    matrix = np.asarray(payload["matrix"], dtype=np.float64)
    decisions = list(payload["decisions"])
    classes = list(payload["classes"])
    if matrix.shape != (len(decisions), len(classes)):
        raise ContractError(
            f"cost file matrix {matrix.shape} does not match "
            f"{len(decisions)} decisions x {len(classes)} classes")
    cost = CostSpec(matrix, float(payload["M"]))
    referral = None
    if len(decisions) == len(classes) + 1:
        referral = len(decisions) - 1
    return cost, DecisionSet(tuple(decisions), referral)


def save_cost_json(path, cost: CostSpec, decision_set: DecisionSet,
                   class_names) -> None:
    payload = {
        "decisions": list(decision_set.labels),
        "classes": list(class_names),
        "matrix": cost.matrix.tolist(),
        "M": cost.bound,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
