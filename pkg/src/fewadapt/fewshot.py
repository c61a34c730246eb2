"""Episodic n-way k-shot evaluation with linear probes and paired statistics.

Each episode freezes the encoder, fits a linear softmax probe on the support
embeddings by full-batch SGD, and scores query accuracy. Episode seeds derive
deterministically from (base_seed, episode index), so different methods
evaluated under the same protocol see identical tasks and can be compared
with a paired t-test.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .datagen import Dataset
from .diffcore import OptimizerState, sgd_step
from .errors import NumericError, ProtocolError
from .models import ModelBundle, embed
from .seeding import rng_from


@dataclass(frozen=True)
class EvalProtocol:
    n_way: int = 5
    k_shot: int = 1
    query_per_class: int = 15
    n_episodes: int = 600
    base_seed: int = 0

    def __post_init__(self):
        if min(self.n_way, self.k_shot, self.query_per_class, self.n_episodes) < 1:
            raise ProtocolError(f"protocol fields must be >= 1: {self}")


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class Episode:
    """One sampled task; labels are remapped to 0..n-1 in sampling order."""

    support_features: np.ndarray
    support_labels: np.ndarray
    query_features: np.ndarray
    query_labels: np.ndarray
    class_ids: tuple[int, ...]
    episode_seed: int

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.support_features, self.support_labels,
                    self.query_features, self.query_labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ResultSummary:
    per_episode_accuracy: tuple[float, ...]
    mean: float
    ci_half_width: float
    n_episodes: int
    method_tag: str
    protocol_fingerprint: str


def sample_episode(pool: Dataset, n: int, k: int, m: int, episode_seed: int) -> Episode:
    """n classes without replacement, then k+m examples per class without replacement."""
    if pool.labels is None:
        raise ProtocolError("episode sampling requires a labeled pool")
    counts = np.bincount(pool.labels, minlength=pool.class_count)
    eligible = np.flatnonzero(counts >= k + m)
    if eligible.size < n:
        raise ProtocolError(
            f"need {n} classes with >= {k + m} examples, only {eligible.size} qualify "
            f"(class sizes: {counts.tolist()})"
        )
    rng = rng_from(episode_seed, "episode")
    classes = eligible[rng.choice(eligible.size, size=n, replace=False)]
    support_idx, query_idx = [], []
    for c in classes:
        idx = np.flatnonzero(pool.labels == c)
        picked = idx[rng.choice(idx.size, size=k + m, replace=False)]
        support_idx.append(picked[:k])
        query_idx.append(picked[k:])
    support_idx = np.concatenate(support_idx)
    query_idx = np.concatenate(query_idx)
    remap = {int(c): i for i, c in enumerate(classes)}
    support_labels = np.asarray([remap[int(c)] for c in pool.labels[support_idx]], dtype=np.intp)
    query_labels = np.asarray([remap[int(c)] for c in pool.labels[query_idx]], dtype=np.intp)
    return Episode(
        support_features=pool.features[support_idx],
        support_labels=support_labels,
        query_features=pool.features[query_idx],
        query_labels=query_labels,
        class_ids=tuple(int(c) for c in classes),
        episode_seed=int(episode_seed),
    )


def fit_linear_probe(
    support_embeddings: np.ndarray,
    support_labels: np.ndarray,
    n_way: int,
    probe: ProbeConfig = ProbeConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch softmax-CE SGD from zero init; returns (weights dxn, bias n).

    Uses the closed-form softmax cross-entropy gradient; equivalence with the
    graph-based route is covered by tests.
    """
    e = np.asarray(support_embeddings, dtype=np.float64)
    if not np.isfinite(e).all():
        raise NumericError("support embeddings contain non-finite values")
    y = np.asarray(support_labels, dtype=np.intp)
    n, d = e.shape
    onehot = np.zeros((n, n_way))
    onehot[np.arange(n), y] = 1.0
    params = {"w": np.zeros((d, n_way)), "b": np.zeros((1, n_way))}
    state = OptimizerState(probe.learning_rate, probe.momentum, probe.weight_decay)
    for _ in range(probe.epochs):
        logits = e @ params["w"] + params["b"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        probs = expd / expd.sum(axis=1, keepdims=True)
        g_logits = (probs - onehot) / n
        grads = {"w": e.T @ g_logits, "b": g_logits.sum(axis=0, keepdims=True)}
        params, state = sgd_step(params, grads, state)
    return params["w"], params["b"]


def evaluate_episode(bundle: ModelBundle, episode: Episode,
                     probe: ProbeConfig = ProbeConfig()) -> float:
    """Frozen-encoder probe accuracy on the query set."""
    support = embed(bundle, episode.support_features)
    query = embed(bundle, episode.query_features)
    n_way = len(episode.class_ids)
    w, b = fit_linear_probe(support, episode.support_labels, n_way, probe)
    predictions = np.argmax(query @ w + b, axis=1)
    return float((predictions == episode.query_labels).mean())


def protocol_fingerprint(pool: Dataset, protocol: EvalProtocol) -> str:
    h = hashlib.sha256()
    h.update(
        f"{protocol.n_way},{protocol.k_shot},{protocol.query_per_class},"
        f"{protocol.n_episodes},{protocol.base_seed};".encode()
    )
    h.update(np.ascontiguousarray(pool.features).tobytes())
    if pool.labels is not None:
        h.update(np.ascontiguousarray(pool.labels).tobytes())
    return h.hexdigest()


def episode_seed_for(base_seed: int, index: int) -> int:
    return int(rng_from(base_seed, "episode_seed", index).integers(2**63))


def run_evaluation(
    bundle: ModelBundle,
    pool: Dataset,
    protocol: EvalProtocol,
    probe: ProbeConfig = ProbeConfig(),
    method_tag: str = "",
) -> ResultSummary:
    """Accuracy over n_episodes tasks with a normal-approximation 95% CI."""
    accuracies = []
    for i in range(protocol.n_episodes):
        episode = sample_episode(
            pool, protocol.n_way, protocol.k_shot, protocol.query_per_class,
            episode_seed_for(protocol.base_seed, i),
        )
        accuracies.append(evaluate_episode(bundle, episode, probe))
    return summarize_accuracies(accuracies, method_tag, protocol_fingerprint(pool, protocol))


def summarize_accuracies(accuracies, method_tag: str, fingerprint: str) -> ResultSummary:
    acc = np.asarray(accuracies, dtype=np.float64)
    mean = float(acc.mean())
    if acc.size > 1:
        ci = 1.96 * float(acc.std(ddof=1)) / math.sqrt(acc.size)
    else:
        ci = 0.0
    return ResultSummary(
        per_episode_accuracy=tuple(float(a) for a in acc),
        mean=mean,
        ci_half_width=ci,
        n_episodes=int(acc.size),
        method_tag=method_tag,
        protocol_fingerprint=fingerprint,
    )


# -- paired comparison --------------------------------------------------------------


@dataclass(frozen=True)
class CompareResult:
    t_statistic: float
    p_value: float
    significant_at_0_05: bool
    direction: str  # "a>b", "b>a", or "none"


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T_df| >= |t|) via the incomplete beta identity."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def compare(a: ResultSummary, b: ResultSummary) -> CompareResult:
    """Two-sided paired t-test on per-episode accuracy differences."""
    if a.protocol_fingerprint != b.protocol_fingerprint:
        raise ProtocolError(
            "summaries come from different protocols; paired comparison refused"
        )
    if a.n_episodes != b.n_episodes or a.n_episodes < 2:
        raise ProtocolError("paired comparison needs >= 2 episodes of equal count")
    diffs = np.asarray(a.per_episode_accuracy) - np.asarray(b.per_episode_accuracy)
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    n = diffs.size
    if sd == 0.0:
        if mean == 0.0:
            return CompareResult(0.0, 1.0, False, "none")
        t = math.inf if mean > 0 else -math.inf
        return CompareResult(t, 0.0, True, "a>b" if mean > 0 else "b>a")
    t = mean / (sd / math.sqrt(n))
    p = student_t_two_sided_p(t, n - 1)
    significant = p < 0.05
    direction = "none"
    if significant:
        direction = "a>b" if mean > 0 else "b>a"
    return CompareResult(float(t), float(p), significant, direction)
