"""Teacher-induced grouping, adjusted mutual information, embedding export."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import Dataset
from .errors import ContractError, DataError
from .models import ModelBundle, classify, embed


@dataclass(frozen=True)
class Partition:
    """Cluster index per example."""

    assignments: np.ndarray
    cluster_count: int

    def __post_init__(self):
        arr = np.asarray(self.assignments, dtype=np.intp).copy()
        if arr.ndim != 1:
            raise DataError(f"assignments must be 1-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.cluster_count):
            raise DataError(f"assignments out of range [0, {self.cluster_count})")
        arr.setflags(write=False)
        object.__setattr__(self, "assignments", arr)

    @property
    def n(self) -> int:
        return self.assignments.size


def induced_grouping(teacher: ModelBundle, data: Dataset) -> Partition:
    """Argmax teacher class per example; ties go to the lowest class index."""
    probs = classify(teacher, embed(teacher, data.features))
    return Partition(np.argmax(probs, axis=1), teacher.arch.class_count)


def truth_partition(data: Dataset) -> Partition:
    labels = data.labels if data.labels is not None else data.hidden_labels
    if labels is None:
        raise DataError("dataset carries no ground-truth labels for the analysis")
    return Partition(labels, data.class_count)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _mutual_information(table: np.ndarray, row_sums: np.ndarray, col_sums: np.ndarray,
                        n: int) -> float:
    mi = 0.0
    log_n = math.log(n)
    for i in range(table.shape[0]):
        if row_sums[i] == 0:
            continue
        log_a = math.log(row_sums[i])
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij == 0 or col_sums[j] == 0:
                continue
            mi += (nij / n) * (math.log(nij) - log_a - math.log(col_sums[j]) + log_n)
    return mi


def _expected_mutual_information(row_sums: np.ndarray, col_sums: np.ndarray, n: int) -> float:
    """Exact permutation-model expectation via the hypergeometric distribution."""
    gln = [math.lgamma(k + 1) for k in range(n + 1)]
    log_n = math.log(n)
    emi = 0.0
    for a in row_sums:
        if a == 0:
            continue
        for b in col_sums:
            if b == 0:
                continue
            lo = max(1, a + b - n)
            hi = min(a, b)
            for nij in range(lo, hi + 1):
                term = (nij / n) * (math.log(nij) + log_n - math.log(a) - math.log(b))
                log_p = (
                    gln[a] + gln[b] + gln[n - a] + gln[n - b]
                    - gln[n] - gln[nij] - gln[a - nij] - gln[b - nij]
                    - gln[n - a - b + nij]
                )
                emi += term * math.exp(log_p)
    return emi


def adjusted_mutual_information(u: Partition, v: Partition) -> float:
    """AMI with the arithmetic-mean normalizer and exact expected MI.

    Natural logs throughout. Returns 0 when the normalizer is degenerate
    (e.g. both partitions are a single cluster).
    """
    if u.n != v.n:
        raise ContractError(f"partition lengths differ: {u.n} vs {v.n}")
    if u.n == 0:
        raise ContractError("partitions are empty")
    n = u.n
    table = np.zeros((u.cluster_count, v.cluster_count), dtype=np.int64)
    np.add.at(table, (u.assignments, v.assignments), 1)
    row_sums = table.sum(axis=1)
    col_sums = table.sum(axis=0)
    h_u = _entropy(row_sums, n)
    h_v = _entropy(col_sums, n)
    mi = _mutual_information(table, row_sums, col_sums, n)
    emi = _expected_mutual_information(row_sums, col_sums, n)
    denom = 0.5 * (h_u + h_v) - emi
    if abs(denom) < 1e-15:
        return 0.0
    return (mi - emi) / denom


def export_embeddings(bundle: ModelBundle, data: Dataset, path) -> int:
    """One row per example: id, label (blank when unlabeled), then coordinates."""
    coords = embed(bundle, data.features)
    labels = data.labels
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id,label," + ",".join(f"e{i}" for i in range(coords.shape[1])) + "\n")
        for i in range(coords.shape[0]):
            label = "" if labels is None else str(int(labels[i]))
            fh.write(f"{i},{label}," + ",".join(repr(float(v)) for v in coords[i]) + "\n")
    return coords.shape[0]
