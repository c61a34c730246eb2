"""The three student-objective terms: cross-entropy, soft-target KL, NT-Xent.

Each loss exists twice: a direct numpy evaluation (used for validation and
reporting) and a graph builder (used for training). Both apply the same
1e-12 probability floor inside logs, so their values agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import LOG_FLOOR, Node, ValueGraph
from .errors import ConfigError, ContractError, DataError

STOCHASTIC_TOL = 1e-6


def _check_probs(name: str, probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise DataError(f"{name}: expected an NxC matrix, got shape {p.shape}")
    if p.shape[0] == 0:
        raise ContractError(f"{name}: empty batch")
    if np.any(p < -STOCHASTIC_TOL) or np.any(
        np.abs(p.sum(axis=1) - 1.0) > STOCHASTIC_TOL
    ):
        raise DataError(f"{name}: rows are not probability vectors (tol {STOCHASTIC_TOL})")
    return p


@dataclass(frozen=True)
class PairedBatch:
    """2N unit-norm projection rows with an involutive positive pairing."""

    projections: np.ndarray
    pairing: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.projections, dtype=np.float64)
        pair = np.asarray(self.pairing, dtype=np.intp)
        if z.ndim != 2 or z.shape[0] < 2:
            raise ContractError(f"projections must be (2N)xP with 2N >= 2, got {z.shape}")
        if pair.shape != (z.shape[0],):
            raise DataError(f"pairing length {pair.shape} != row count {z.shape[0]}")
        idx = np.arange(z.shape[0])
        if np.any(pair == idx):
            raise DataError("pairing has a fixed point (a row paired with itself)")
        if np.any(pair[pair] != idx):
            raise DataError("pairing is not an involution")
        norms = np.sqrt((z * z).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > STOCHASTIC_TOL):
            raise DataError("projection rows must be unit-norm")
        object.__setattr__(self, "projections", z)
        object.__setattr__(self, "pairing", pair)


def two_view_pairing(n: int) -> np.ndarray:
    """Pairing for stacked views [view1; view2]: row i <-> row i+n."""
    return np.concatenate([np.arange(n, 2 * n), np.arange(0, n)])


def cross_entropy(probabilities, labels) -> float:
    """Mean of -log p[i, label_i], with probabilities floored at 1e-12."""
    p = _check_probs("cross_entropy", probabilities)
    y = np.asarray(labels)
    if y.shape != (p.shape[0],):
        raise DataError(f"cross_entropy: labels shape {y.shape} != batch {p.shape[0]}")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise DataError(f"cross_entropy: label out of range [0, {p.shape[1]})")
    picked = p[np.arange(p.shape[0]), y.astype(np.intp)]
    return float(-np.log(np.maximum(picked, LOG_FLOOR)).mean())


def kl_soft(student_probs, targets) -> float:
    """Mean KL(target || student) with 0*log(0) := 0; always >= 0."""
    p = _check_probs("kl_soft student", student_probs)
    t = _check_probs("kl_soft targets", targets)
    if p.shape != t.shape:
        raise DataError(f"kl_soft: shapes {p.shape} vs {t.shape} differ")
    log_t = np.log(np.maximum(t, LOG_FLOOR))
    log_p = np.log(np.maximum(p, LOG_FLOOR))
    per_row = np.where(t > 0.0, t * (log_t - log_p), 0.0).sum(axis=1)
    # the floor can shave off ~1e-16; KL is nonnegative by definition
    return max(float(per_row.mean()), 0.0)


def nt_xent(batch: PairedBatch, temperature: float = 1.0) -> float:
    """Mean over all 2N anchors of -log softmax similarity to the positive."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = batch.projections
    n2 = z.shape[0]
    sims = (z @ z.T) * (1.0 / temperature)
    row_max = sims.max(axis=1, keepdims=True)
    expd = np.exp(sims - row_max)
    expd[np.arange(n2), np.arange(n2)] = 0.0
    log_denom = np.log(np.maximum(expd.sum(axis=1, keepdims=True), LOG_FLOOR)) + row_max
    positives = sims[np.arange(n2), batch.pairing][:, None]
    return float((log_denom - positives).mean())


def startup_objective(
    base_batch_probs=None,
    base_labels=None,
    student_probs_on_unlabeled=None,
    soft_targets=None,
    paired_batch: PairedBatch | None = None,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    nt_temperature: float = 1.0,
) -> float:
    """Weighted sum of the three terms; a zero weight skips that term."""
    w_ce, w_kl, w_ss = (float(w) for w in weights)
    if min(w_ce, w_kl, w_ss) < 0:
        raise ConfigError(f"term weights must be nonnegative, got {weights}")
    if w_ce == w_kl == w_ss == 0.0:
        raise ContractError("all term weights are zero; the objective is empty")
    total = 0.0
    if w_ce != 0.0:
        total += w_ce * cross_entropy(base_batch_probs, base_labels)
    if w_kl != 0.0:
        total += w_kl * kl_soft(student_probs_on_unlabeled, soft_targets)
    if w_ss != 0.0:
        total += w_ss * nt_xent(paired_batch, nt_temperature)
    return total


# -- graph builders -------------------------------------------------------------


def cross_entropy_graph(graph: ValueGraph, logits: Node, labels) -> Node:
    """-mean_i log softmax(logits)[i, label_i] as graph nodes."""
    y = np.asarray(labels, dtype=np.intp)
    n, c = logits.rows, logits.cols
    if y.shape != (n,):
        raise DataError(f"cross_entropy_graph: labels shape {y.shape} != batch {n}")
    if np.any(y < 0) or np.any(y >= c):
        raise DataError(f"cross_entropy_graph: label out of range [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    probs = graph.softmax_row(logits)
    picked = graph.mul(graph.log(probs), graph.constant(onehot))
    per_row = graph.matmul(picked, graph.constant(np.ones((c, 1))))
    return graph.scale(graph.mean(per_row), -1.0)


def kl_soft_graph(graph: ValueGraph, logits: Node, targets) -> Node:
    """Mean KL(target || softmax(logits)); targets enter as constants."""
    t = _check_probs("kl_soft_graph targets", targets)
    if t.shape != (logits.rows, logits.cols):
        raise DataError(f"kl_soft_graph: targets shape {t.shape} != logits {(logits.rows, logits.cols)}")
    # zero targets multiply a finite floored log, so 0*log(0) contributes 0
    log_t = np.log(np.maximum(t, LOG_FLOOR))
    probs = graph.softmax_row(logits)
    diff = graph.sub(graph.constant(log_t), graph.log(probs))
    per_row = graph.matmul(graph.mul(graph.constant(t), diff),
                           graph.constant(np.ones((t.shape[1], 1))))
    return graph.mean(per_row)


def nt_xent_graph(graph: ValueGraph, projections: Node, pairing, temperature: float = 1.0) -> Node:
    """NT-Xent over unit-norm projection rows already in the graph."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    pair = np.asarray(pairing, dtype=np.intp)
    n2 = projections.rows
    idx = np.arange(n2)
    if pair.shape != (n2,) or np.any(pair == idx) or np.any(pair[pair] != idx):
        raise DataError("nt_xent_graph: pairing must be an involution with no fixed points")
    not_self = np.ones((n2, n2))
    not_self[idx, idx] = 0.0
    pair_mask = np.zeros((n2, n2))
    pair_mask[idx, pair] = 1.0
    ones = graph.constant(np.ones((n2, 1)))
    sims = graph.scale(graph.matmul(projections, projections, transpose_b=True),
                       1.0 / temperature)
    row_max = graph.max_rows(sims)
    shifted = graph.exp(graph.sub(sims, row_max))
    denom = graph.matmul(graph.mul(shifted, graph.constant(not_self)), ones)
    log_denom = graph.add(graph.log(denom), row_max)
    positives = graph.matmul(graph.mul(sims, graph.constant(pair_mask)), ones)
    return graph.mean(graph.sub(log_denom, positives))
