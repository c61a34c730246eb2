"""Reverse-mode autodiff over dense float64 matrices, plus SGD with momentum.

Every trainable model in the package is expressed as a ValueGraph: an ordered
tape of primitive matrix operations. forward() fills per-node values from
inputs and parameters; backward() fills per-node adjoints and returns the
parameter gradients. Parameters are rebindable via set_param so a graph can
be re-run cheaply inside a training loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LOG_FLOOR = 1e-12

_BINARY = ("add", "mul")


@dataclass(frozen=True)
class Node:
    """Handle to one graph position, with its inferred output shape."""

    index: int
    rows: int
    cols: int


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    return arr


def _broadcast_dim(da: int, db: int) -> int | None:
    if da == db:
        return da
    if db == 1:
        return da
    if da == 1:
        return db
    return None


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], label: str) -> tuple[int, int]:
    rows = _broadcast_dim(a[0], b[0])
    cols = _broadcast_dim(a[1], b[1])
    if rows is None or cols is None:
        raise DimensionError(f"{label}: shapes {a} and {b} do not broadcast")
    return (rows, cols)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


class ValueGraph:
    """Tape of primitive ops in topological order (inputs precede users)."""

    def __init__(self):
        self._kinds: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._payloads: list = []
        self._shapes: list[tuple[int, int]] = []
        self._labels: list[str] = []
        self._inputs: dict[str, int] = {}
        self._params: dict[str, int] = {}
        self._param_values: dict[str, np.ndarray] = {}
        self._consts: dict[int, np.ndarray] = {}
        self.values: list[np.ndarray | None] = []
        self.adjoints: list[np.ndarray | None] = []

    # -- construction -----------------------------------------------------

    def _append(self, kind, parents, payload, rows, cols, label=None) -> Node:
        index = len(self._kinds)
        self._kinds.append(kind)
        self._parents.append(tuple(p.index for p in parents))
        self._payloads.append(payload)
        self._shapes.append((rows, cols))
        self._labels.append(label or f"{kind}#{index}")
        self.values.append(None)
        self.adjoints.append(None)
        return Node(index, rows, cols)

    def input(self, name: str, rows: int, cols: int) -> Node:
        if name in self._inputs:
            raise ContractError(f"input '{name}' declared twice")
        node = self._append("input", (), name, rows, cols, label=name)
        self._inputs[name] = node.index
        return node

    def parameter(self, name: str, value) -> Node:
        """Trainable leaf. Re-registering a name returns the existing node."""
        if name in self._params:
            return Node(self._params[name], *self._shapes[self._params[name]])
        arr = _as_matrix(value).copy()
        node = self._append("param", (), name, arr.shape[0], arr.shape[1], label=name)
        self._params[name] = node.index
        self._param_values[name] = arr
        return node

    def constant(self, value) -> Node:
        """Untracked value source (masks, targets); carries no gradient."""
        arr = _as_matrix(value)
        node = self._append("const", (), None, arr.shape[0], arr.shape[1])
        self._consts[node.index] = arr
        return node

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        inner = b.cols if transpose_b else b.rows
        if a.cols != inner:
            raise DimensionError(
                f"matmul: inner dims {a.cols} vs {inner} "
                f"({self._labels[a.index]} x {self._labels[b.index]})"
            )
        out_cols = b.rows if transpose_b else b.cols
        return self._append("matmul", (a, b), transpose_b, a.rows, out_cols)

    def add(self, a: Node, b: Node) -> Node:
        rows, cols = _broadcast_shape((a.rows, a.cols), (b.rows, b.cols), "add")
        return self._append("add", (a, b), None, rows, cols)

    def mul(self, a: Node, b: Node) -> Node:
        rows, cols = _broadcast_shape((a.rows, a.cols), (b.rows, b.cols), "mul")
        return self._append("mul", (a, b), None, rows, cols)

    def scale(self, a: Node, scalar: float) -> Node:
        return self._append("scale", (a,), float(scalar), a.rows, a.cols)

    def sub(self, a: Node, b: Node) -> Node:
        return self.add(a, self.scale(b, -1.0))

    def relu(self, a: Node) -> Node:
        return self._append("relu", (a,), None, a.rows, a.cols)

    def exp(self, a: Node) -> Node:
        return self._append("exp", (a,), None, a.rows, a.cols)

    def log(self, a: Node) -> Node:
        """Elementwise log with the 1e-12 stability floor inside."""
        return self._append("log", (a,), None, a.rows, a.cols)

    def sum(self, a: Node) -> Node:
        return self._append("sum", (a,), None, 1, 1)

    def mean(self, a: Node) -> Node:
        return self._append("mean", (a,), None, 1, 1)

    def max_rows(self, a: Node) -> Node:
        """Per-row max reduction to an Nx1 column."""
        return self._append("max_rows", (a,), None, a.rows, 1)

    def softmax_row(self, a: Node) -> Node:
        return self._append("softmax_row", (a,), None, a.rows, a.cols)

    def l2_normalize_rows(self, a: Node) -> Node:
        """Rows scaled to unit norm; all-zero rows stay zero."""
        return self._append("l2norm_rows", (a,), None, a.rows, a.cols)

    def concat_rows(self, a: Node, b: Node) -> Node:
        if a.cols != b.cols:
            raise DimensionError(f"concat_rows: widths {a.cols} vs {b.cols}")
        return self._append("concat_rows", (a, b), None, a.rows + b.rows, a.cols)

    # -- parameters ---------------------------------------------------------

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def set_param(self, name: str, value) -> None:
        arr = _as_matrix(value)
        idx = self._params[name]
        if arr.shape != self._shapes[idx]:
            raise DimensionError(
                f"set_param '{name}': shape {arr.shape} != {self._shapes[idx]}"
            )
        self._param_values[name] = arr

    def node_for_param(self, name: str) -> Node:
        idx = self._params[name]
        return Node(idx, *self._shapes[idx])

    # -- execution ----------------------------------------------------------

    def forward(self, inputs: dict[str, np.ndarray] | None = None) -> None:
        feeds = inputs or {}
        for name, idx in self._inputs.items():
            if name not in feeds:
                raise ContractError(f"missing value for input '{name}'")
            arr = _as_matrix(feeds[name])
            if arr.shape != self._shapes[idx]:
                raise DimensionError(
                    f"input '{name}': shape {arr.shape} != declared {self._shapes[idx]}"
                )
            if not np.isfinite(arr).all():
                raise NumericError(f"input '{name}' contains non-finite values")
        kinds, parents, payloads = self._kinds, self._parents, self._payloads
        values = self.values
        for i, kind in enumerate(kinds):
            if kind == "input":
                values[i] = np.asarray(feeds[payloads[i]], dtype=np.float64)
            elif kind == "param":
                values[i] = self._param_values[payloads[i]]
            elif kind == "const":
                values[i] = self._consts[i]
            elif kind == "matmul":
                a, b = (values[p] for p in parents[i])
                values[i] = a @ b.T if payloads[i] else a @ b
            elif kind == "add":
                a, b = (values[p] for p in parents[i])
                values[i] = a + b
            elif kind == "mul":
                a, b = (values[p] for p in parents[i])
                values[i] = a * b
            elif kind == "scale":
                values[i] = values[parents[i][0]] * payloads[i]
            elif kind == "relu":
                values[i] = np.maximum(values[parents[i][0]], 0.0)
            elif kind == "exp":
                values[i] = np.exp(values[parents[i][0]])
            elif kind == "log":
                values[i] = np.log(np.maximum(values[parents[i][0]], LOG_FLOOR))
            elif kind == "sum":
                values[i] = values[parents[i][0]].sum().reshape(1, 1)
            elif kind == "mean":
                values[i] = values[parents[i][0]].mean().reshape(1, 1)
            elif kind == "max_rows":
                values[i] = values[parents[i][0]].max(axis=1, keepdims=True)
            elif kind == "softmax_row":
                x = values[parents[i][0]]
                shifted = x - x.max(axis=1, keepdims=True)
                e = np.exp(shifted)
                values[i] = e / e.sum(axis=1, keepdims=True)
            elif kind == "l2norm_rows":
                x = values[parents[i][0]]
                norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
                safe = np.where(norms > 0.0, norms, 1.0)
                values[i] = x / safe
            elif kind == "concat_rows":
                a, b = (values[p] for p in parents[i])
                values[i] = np.concatenate([a, b], axis=0)
            else:  # pragma: no cover
                raise ContractError(f"unknown node kind '{kind}'")

    def value(self, node: Node) -> np.ndarray:
        val = self.values[node.index]
        if val is None:
            raise ContractError("forward has not run")
        return val

    def adjoint(self, node: Node) -> np.ndarray:
        adj = self.adjoints[node.index]
        if adj is None:
            raise ContractError("backward has not run")
        return adj

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Populate adjoints of every node; return gradients per parameter."""
        if (loss.rows, loss.cols) != (1, 1):
            raise ContractError(
                f"loss node {self._labels[loss.index]} is {loss.rows}x{loss.cols}, not scalar"
            )
        if self.values[loss.index] is None:
            raise ContractError("forward must run before backward")
        values = self.values
        adjoints = [np.zeros(shape) for shape in self._shapes]
        adjoints[loss.index] = np.ones((1, 1))
        kinds, parents, payloads = self._kinds, self._parents, self._payloads
        for i in range(loss.index, -1, -1):
            kind = kinds[i]
            if kind in ("input", "param", "const"):
                continue
            g = adjoints[i]
            ps = parents[i]
            if kind == "matmul":
                pa, pb = ps
                a, b = values[pa], values[pb]
                if payloads[i]:
                    adjoints[pa] += g @ b
                    adjoints[pb] += g.T @ a
                else:
                    adjoints[pa] += g @ b.T
                    adjoints[pb] += a.T @ g
            elif kind == "add":
                pa, pb = ps
                adjoints[pa] += _unbroadcast(g, self._shapes[pa])
                adjoints[pb] += _unbroadcast(g, self._shapes[pb])
            elif kind == "mul":
                pa, pb = ps
                adjoints[pa] += _unbroadcast(g * values[pb], self._shapes[pa])
                adjoints[pb] += _unbroadcast(g * values[pa], self._shapes[pb])
            elif kind == "scale":
                adjoints[ps[0]] += g * payloads[i]
            elif kind == "relu":
                adjoints[ps[0]] += g * (values[ps[0]] > 0.0)
            elif kind == "exp":
                adjoints[ps[0]] += g * values[i]
            elif kind == "log":
                x = values[ps[0]]
                adjoints[ps[0]] += np.where(x > LOG_FLOOR, g / np.maximum(x, LOG_FLOOR), 0.0)
            elif kind == "sum":
                adjoints[ps[0]] += g[0, 0]
            elif kind == "mean":
                adjoints[ps[0]] += g[0, 0] / values[ps[0]].size
            elif kind == "max_rows":
                x = values[ps[0]]
                grad = np.zeros_like(x)
                grad[np.arange(x.shape[0]), np.argmax(x, axis=1)] = g[:, 0]
                adjoints[ps[0]] += grad
            elif kind == "softmax_row":
                y = values[i]
                inner = (g * y).sum(axis=1, keepdims=True)
                adjoints[ps[0]] += y * (g - inner)
            elif kind == "l2norm_rows":
                x = values[ps[0]]
                y = values[i]
                norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
                inner = (g * y).sum(axis=1, keepdims=True)
                contrib = np.where(norms > 0.0, (g - y * inner) / np.where(norms > 0.0, norms, 1.0), 0.0)
                adjoints[ps[0]] += contrib
            elif kind == "concat_rows":
                pa, pb = ps
                na = self._shapes[pa][0]
                adjoints[pa] += g[:na]
                adjoints[pb] += g[na:]
        self.adjoints = adjoints
        return {name: adjoints[idx] for name, idx in self._params.items()}


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    """SGD-with-momentum state; velocities are created lazily per parameter.

    learning_rate of exactly 0 is allowed so that a zero step stays
    expressible (identity on parameters).
    """

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        from .errors import ConfigError

        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Weight decay is folded into the gradient before the momentum buffer.
    Parameters without a gradient this step pass through unchanged.
    """
    new_params: dict[str, np.ndarray] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if name not in grads:
            new_params[name] = p
            if name in state.velocity:
                new_velocity[name] = state.velocity[name]
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad for '{name}': shape {g.shape} != param {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        v = state.velocity.get(name)
        v = np.zeros_like(p) if v is None else v
        v = state.momentum * v + g + state.weight_decay * p
        new_velocity[name] = v
        new_params[name] = p - state.learning_rate * v
    new_state = OptimizerState(
        learning_rate=state.learning_rate,
        momentum=state.momentum,
        weight_decay=state.weight_decay,
        velocity=new_velocity,
    )
    return new_params, new_state


# -- gradient checking --------------------------------------------------------


@dataclass(frozen=True)
class FiniteDiffReport:
    max_relative_error: float
    checked: int
    skipped: tuple[tuple[str, int, int], ...]


def finite_diff_check(fn, point: dict[str, np.ndarray], eps: float = 1e-5) -> FiniteDiffReport:
    """Compare fn's analytic gradients against central finite differences.

    fn(point) must return (scalar value, {name: gradient}). A coordinate
    where the two one-sided differences disagree strongly is reported as
    skipped (non-differentiable kink) rather than scored.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    point = {name: np.asarray(v, dtype=np.float64) for name, v in point.items()}
    f0, grads = fn(point)
    if not np.isfinite(f0):
        raise NumericError("function value is non-finite at the check point")
    max_rel = 0.0
    checked = 0
    skipped: list[tuple[str, int, int]] = []
    for name in sorted(point):
        base = point[name]
        # a parameter the function never touches has a zero gradient
        grad = np.asarray(grads.get(name, np.zeros_like(base)), dtype=np.float64)
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                bumped = {k: (v.copy() if k == name else v) for k, v in point.items()}
                bumped[name][i, j] = base[i, j] + eps
                f_plus, _ = fn(bumped)
                bumped[name][i, j] = base[i, j] - eps
                f_minus, _ = fn(bumped)
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError(f"non-finite evaluation near {name}[{i},{j}]")
                forward = (f_plus - f0) / eps
                backward = (f0 - f_minus) / eps
                if abs(forward - backward) > 0.1 * (abs(forward) + abs(backward) + 1.0):
                    skipped.append((name, i, j))
                    continue
                central = (f_plus - f_minus) / (2.0 * eps)
                analytic = grad[i, j]
                rel = abs(analytic - central) / max(1e-12, abs(analytic) + abs(central))
                max_rel = max(max_rel, rel)
                checked += 1
    return FiniteDiffReport(max_rel, checked, tuple(skipped))
