"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Just enough machinery for small fully-connected classifiers: dense matmul,
bias addition, relu, row-wise log-softmax, elementwise log/exp/mul, scalar
scaling, full reduction, and row gathering. Values are plain numpy arrays;
the tape records every primitive application so a single backward sweep
yields gradients for all leaves marked as parameters.

Conventions fixed here for reproducibility:

* everything is float64, contiguous, row-major;
* relu's subgradient at 0 is 0;
* log-softmax subtracts the row max before exponentiating;
* a tape is strictly append-only, so node inputs always precede the node.

Tapes are single-threaded objects. Tensors are immutable once created and
may be shared read-only across tapes and threads.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError

Array = np.ndarray


def _as_f64(value) -> Array:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    return arr


class Tensor:
    """Handle to one node on a tape. Do not mutate ``data`` after creation."""

    __slots__ = ("tape", "node_id", "data")

    def __init__(self, tape: "Tape", node_id: int, data: Array):
        self.tape = tape
        self.node_id = node_id
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


class _Node:
    __slots__ = ("op", "inputs", "aux", "value", "param")

    def __init__(self, op: str, inputs: tuple[int, ...], aux, value: Array, param: bool):
        self.op = op
        self.inputs = inputs
        self.aux = aux
        self.value = value
        self.param = param


class Tape:
    """Append-only record of primitive applications, topologically ordered."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, value, param: bool = False) -> Tensor:
        """Register an input tensor; ``param=True`` marks it for gradients."""
        data = _as_f64(value)
        node = _Node("leaf", (), None, data, param)
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1, data)

    def constant(self, value) -> Tensor:
        return self.leaf(value, param=False)

    def _record(self, op: str, inputs: tuple[Tensor, ...], value: Array, aux=None) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise ContractError(f"input tensor belongs to a different tape (op {op})")
        node = _Node(op, tuple(t.node_id for t in inputs), aux, value, False)
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1, value)

    def replay(self) -> None:
        """Recompute every non-leaf node value from current leaf values.

        Re-runs the identical kernels in recording order, so results are
        bitwise-deterministic for fixed leaf contents.
        """
        for node in self.nodes:
            if node.op == "leaf":
                continue
            args = [self.nodes[i].value for i in node.inputs]
            node.value = _FORWARD[node.op](args, node.aux)


def _check_shapes(op: str, condition: bool, a: Array, b: Array | None = None) -> None:
    if condition:
        return
    if b is None:
        raise ContractError(f"{op}: shape {a.shape} does not conform")
    raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# forward kernels (shared by op construction and tape replay)

def _fwd_matmul(args, aux):
    return args[0] @ args[1]


def _fwd_add(args, aux):
    return args[0] + args[1]


def _fwd_relu(args, aux):
    return np.maximum(args[0], 0.0)


def _fwd_log_softmax(args, aux):
    x = args[0]
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _fwd_sum(args, aux):
    return np.asarray(args[0].sum())


def _fwd_scale(args, aux):
    return args[0] * aux


def _fwd_mul(args, aux):
    return args[0] * args[1]


def _fwd_log(args, aux):
    return np.log(args[0])


def _fwd_exp(args, aux):
    return np.exp(args[0])


def _fwd_gather_rows(args, aux):
    x = args[0]
    return x[np.arange(x.shape[0]), aux]


_FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "relu": _fwd_relu,
    "log_softmax_rows": _fwd_log_softmax,
    "sum": _fwd_sum,
    "scale": _fwd_scale,
    "mul": _fwd_mul,
    "log": _fwd_log,
    "exp": _fwd_exp,
    "gather_rows": _fwd_gather_rows,
}


# ---------------------------------------------------------------------------
# primitive construction

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_shapes("matmul", a.data.ndim == 2 and b.data.ndim == 2
                  and a.data.shape[1] == b.data.shape[0], a.data, b.data)
    return a.tape._record("matmul", (a, b), _fwd_matmul((a.data, b.data), None))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition; also accepts (B, n) + (n,) for bias rows."""
    same = a.data.shape == b.data.shape
    bias = a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]
    _check_shapes("add", same or bias, a.data, b.data)
    return a.tape._record("add", (a, b), _fwd_add((a.data, b.data), None))


def relu(a: Tensor) -> Tensor:
    return a.tape._record("relu", (a,), _fwd_relu((a.data,), None))


def log_softmax_rows(a: Tensor) -> Tensor:
    _check_shapes("log_softmax_rows", a.data.ndim == 2, a.data)
    return a.tape._record("log_softmax_rows", (a,), _fwd_log_softmax((a.data,), None))


def sum_all(a: Tensor) -> Tensor:
    """Reduce every entry to one scalar."""
    return a.tape._record("sum", (a,), _fwd_sum((a.data,), None))


def scale(a: Tensor, c: float) -> Tensor:
    return a.tape._record("scale", (a,), _fwd_scale((a.data,), float(c)), aux=float(c))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_shapes("mul", a.data.shape == b.data.shape, a.data, b.data)
    return a.tape._record("mul", (a, b), _fwd_mul((a.data, b.data), None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def log(a: Tensor) -> Tensor:
    return a.tape._record("log", (a,), _fwd_log((a.data,), None))


def exp(a: Tensor) -> Tensor:
    return a.tape._record("exp", (a,), _fwd_exp((a.data,), None))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Pick ``a[i, indices[i]]`` for each row i; returns shape (B,)."""
    idx = np.asarray(indices, dtype=np.intp)
    _check_shapes("gather_rows", a.data.ndim == 2 and idx.ndim == 1
                  and idx.shape[0] == a.data.shape[0], a.data)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ContractError(
            f"gather_rows: index out of range for {a.data.shape[1]} columns")
    return a.tape._record("gather_rows", (a,), _fwd_gather_rows((a.data,), idx), aux=idx)


# ---------------------------------------------------------------------------
# reverse sweep

def backward(tape: Tape, output: Tensor) -> dict[int, Array]:
    """Gradients of a scalar ``output`` w.r.t. every param leaf on ``tape``.

    Returns a map from leaf node id to an array of the leaf's shape.
    """
    if output.tape is not tape:
        raise ContractError("output tensor does not belong to this tape")
    out_node = tape.nodes[output.node_id]
    if out_node.value.ndim != 0:
        raise ContractError(
            f"backward requires a scalar output, got shape {out_node.value.shape}")

    grads: dict[int, Array] = {output.node_id: np.asarray(1.0)}
    for nid in range(output.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.op == "leaf":
            grads[nid] = g  # keep leaf grads
            continue
        _accumulate(tape, node, g, grads)

    out: dict[int, Array] = {}
    for nid, node in enumerate(tape.nodes):
        if node.op == "leaf" and node.param:
            g = grads.get(nid)
            out[nid] = np.zeros_like(node.value) if g is None else g
    return out


def _acc(grads: dict[int, Array], nid: int, g: Array) -> None:
    if nid in grads:
        grads[nid] = grads[nid] + g
    else:
        grads[nid] = g


def _accumulate(tape: Tape, node: _Node, g: Array, grads: dict[int, Array]) -> None:
    op = node.op
    ins = node.inputs
    vals = [tape.nodes[i].value for i in ins]
    if op == "matmul":
        _acc(grads, ins[0], g @ vals[1].T)
        _acc(grads, ins[1], vals[0].T @ g)
    elif op == "add":
        _acc(grads, ins[0], g)
        if vals[1].shape == vals[0].shape:
            _acc(grads, ins[1], g)
        else:  # bias row: collapse the batch axis
            _acc(grads, ins[1], g.sum(axis=0))
    elif op == "relu":
        _acc(grads, ins[0], g * (vals[0] > 0.0))
    elif op == "log_softmax_rows":
        soft = np.exp(node.value)
        _acc(grads, ins[0], g - soft * g.sum(axis=1, keepdims=True))
    elif op == "sum":
        _acc(grads, ins[0], np.full_like(vals[0], float(g)))
    elif op == "scale":
        _acc(grads, ins[0], g * node.aux)
    elif op == "mul":
        _acc(grads, ins[0], g * vals[1])
        _acc(grads, ins[1], g * vals[0])
    elif op == "log":
        _acc(grads, ins[0], g / vals[0])
    elif op == "exp":
        _acc(grads, ins[0], g * node.value)
    elif op == "gather_rows":
        full = np.zeros_like(vals[0])
        np.add.at(full, (np.arange(vals[0].shape[0]), node.aux), g)
        _acc(grads, ins[0], full)
    else:  # pragma: no cover
        raise ContractError(f"unknown op {op!r}")
