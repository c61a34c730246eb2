"""Teacher pre-training, soft pseudo-labeling, and student training.

The student objective is a weighted sum of three terms per step: cross-entropy
on a base-domain minibatch, KL against the teacher's soft targets on an
un-augmented unlabeled minibatch, and NT-Xent over two augmented views of the
same unlabeled minibatch. One epoch is a complete pass over the unlabeled
training split; the base loader cycles independently.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .datagen import AugmentPolicy, Dataset, augment_batch
from .diffcore import OptimizerState, ValueGraph, sgd_step
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    NumericError,
    SelectionError,
    StalenessError,
)
from .losses import (
    PairedBatch,
    cross_entropy,
    cross_entropy_graph,
    kl_soft,
    kl_soft_graph,
    nt_xent,
    nt_xent_graph,
    two_view_pairing,
)
from .models import (
    ArchConfig,
    ModelBundle,
    classifier_logits_graph,
    classify,
    embed,
    encoder_graph,
    init_bundle,
    init_student,
    project,
    projection_graph,
)
from .seeding import rng_from

LR_CANDIDATES_DEFAULT = (1e-1, 5e-2, 3e-2, 1e-2, 5e-3, 3e-3, 1e-3)
MIN_PROBE_UPDATES = 50

DEFAULT_AUGMENT = AugmentPolicy(
    gaussian_noise_sigma=1.5,
    feature_dropout_prob=0.1,
    scale_jitter_range=(0.9, 1.1),
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size_base: int = 256
    batch_size_unlabeled: int = 256
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_candidates: tuple[float, ...] = LR_CANDIDATES_DEFAULT
    lr_decay_factor: float = 2.0
    lr_patience_epochs: int = 20
    val_fraction_unlabeled: float = 0.10
    val_fraction_base: float = 0.05
    term_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    init_strategy: str = "teacher_embedding_random_classifier"
    nt_xent_temperature: float = 1.0
    soft_label_temperature: float = 1.0
    seed: int = 0
    arch: ArchConfig | None = None
    augment: AugmentPolicy = DEFAULT_AUGMENT

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size_base < 1 or self.batch_size_unlabeled < 1:
            raise ConfigError("epochs must be >= 0 and batch sizes >= 1")
        if not self.lr_candidates or any(lr <= 0 for lr in self.lr_candidates):
            raise ConfigError(f"lr_candidates must be nonempty and positive: {self.lr_candidates}")
        if self.lr_decay_factor <= 1.0 or self.lr_patience_epochs < 1:
            raise ConfigError("lr decay factor must exceed 1 and patience must be >= 1")
        for frac in (self.val_fraction_unlabeled, self.val_fraction_base):
            if not 0.0 < frac < 1.0:
                raise ConfigError(f"validation fractions must be in (0, 1), got {frac}")
        if len(self.term_weights) != 3 or any(w < 0 for w in self.term_weights):
            raise ConfigError(f"term_weights must be three nonnegative reals: {self.term_weights}")
        if self.nt_xent_temperature <= 0 or self.soft_label_temperature <= 0:
            raise ConfigError("temperatures must be positive")
        object.__setattr__(self, "term_weights", tuple(float(w) for w in self.term_weights))
        object.__setattr__(self, "lr_candidates", tuple(float(lr) for lr in self.lr_candidates))


PROFILES = {
    "desk": dict(epochs=200, batch_size_base=64, batch_size_unlabeled=64),
    "paper": dict(epochs=1000, batch_size_base=256, batch_size_unlabeled=256),
}


def train_profile(name: str, **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile '{name}'; expected one of {sorted(PROFILES)}")
    merged = dict(PROFILES[name])
    merged.update(overrides)
    return TrainConfig(**merged)


@dataclass(frozen=True)
class SoftLabeledSet:
    """Unlabeled features with the teacher's probability-vector targets."""

    features: np.ndarray
    soft_targets: np.ndarray
    teacher_fingerprint: str

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.soft_targets, dtype=np.float64)
        if targets.shape[0] != feats.shape[0]:
            raise DataError(
                f"soft target count {targets.shape[0]} != example count {feats.shape[0]}"
            )
        if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-6):
            raise DataError("soft targets must be row-stochastic")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "soft_targets", targets)

    @property
    def n(self) -> int:
        return self.features.shape[0]


def pseudo_label(teacher: ModelBundle, unlabeled: Dataset, temperature: float = 1.0) -> SoftLabeledSet:
    """Teacher probabilities on every unlabeled example, fingerprint recorded."""
    targets = classify(teacher, embed(teacher, unlabeled.features), temperature=temperature)
    return SoftLabeledSet(unlabeled.features, targets, teacher.fingerprint())


# -- shared training machinery ----------------------------------------------------


def validation_split(labels: np.ndarray | None, n: int, fraction: float, seed: int,
                     class_count: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic held-out split; stratified when labels are given.

    Degenerate case: when rounding leaves the held-out side empty, the
    training indices double as the validation set.
    """
    if labels is not None:
        rng = rng_from(seed, "validation_split")
        val_parts, train_parts = [], []
        for c in range(class_count):
            idx = np.flatnonzero(labels == c)
            idx = idx[rng.permutation(idx.size)]
            take = min(int(round(fraction * idx.size)), idx.size - 1)
            val_parts.append(idx[:take])
            train_parts.append(idx[take:])
        val_idx = np.sort(np.concatenate(val_parts))
        train_idx = np.sort(np.concatenate(train_parts))
    else:
        rng = rng_from(seed, "validation_split")
        order = rng.permutation(n)
        take = min(int(round(fraction * n)), n - 1)
        val_idx = np.sort(order[:take])
        train_idx = np.sort(order[take:])
    if val_idx.size == 0:
        val_idx = train_idx
    return train_idx, val_idx


class _Cycler:
    """Yields minibatch index arrays, reshuffling whenever exhausted."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self._n = n
        self._bs = min(batch_size, n)
        self._rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self._bs > self._n:
            self._order = self._rng.permutation(self._n)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self._bs]
        self._pos += self._bs
        return batch


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class _DecaySchedule:
    """Halve-on-plateau controller over the epoch-mean training loss."""

    def __init__(self, lr: float, factor: float, patience: int):
        self.lr = lr
        self._factor = factor
        self._patience = patience
        self._best = math.inf
        self._since_improve = 0

    def observe(self, train_loss: float) -> None:
        if train_loss < self._best:
            self._best = train_loss
            self._since_improve = 0
            return
        self._since_improve += 1
        if self._since_improve >= self._patience:
            self.lr /= self._factor
            self._since_improve = 0


def _write_training_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,lr,train_loss,val_loss,wall_ms\n")
        for epoch, lr, train_loss, val_loss, wall_ms in rows:
            fh.write(f"{epoch},{lr!r},{train_loss!r},{val_loss!r},{wall_ms:.3f}\n")


def probe_epochs_for(steps_per_epoch: int, min_updates: int = MIN_PROBE_UPDATES) -> int:
    """Smallest epoch count guaranteeing at least min_updates optimizer steps."""
    return max(1, math.ceil(min_updates / max(1, steps_per_epoch)))


def select_learning_rate(candidates, probe_epochs: int, objective_evaluator, seed: int = 0) -> float:
    """Evaluate each candidate with the probe run; pick the lowest validation loss.

    Ties break toward the larger learning rate. If every candidate yields a
    non-finite loss, raises SelectionError listing the losses.
    """
    candidates = tuple(candidates)
    if not candidates:
        raise ConfigError("lr candidate list is empty")
    losses: dict[float, float] = {}
    if len(candidates) == 1:
        return candidates[0]
    for lr in candidates:
        losses[lr] = float(objective_evaluator(lr, probe_epochs, seed))
    finite = {lr: v for lr, v in losses.items() if math.isfinite(v)}
    if not finite:
        raise SelectionError(f"every learning-rate candidate diverged: {losses}")
    return min(finite.items(), key=lambda kv: (kv[1], -kv[0]))[0]


# -- teacher -----------------------------------------------------------------------


def _teacher_step(cur: ModelBundle, batch_x: np.ndarray, batch_y: np.ndarray):
    graph = ValueGraph()
    x = graph.input("x", batch_x.shape[0], batch_x.shape[1])
    logits = classifier_logits_graph(graph, encoder_graph(graph, x, cur), cur)
    loss = cross_entropy_graph(graph, logits, batch_y)
    graph.forward({"x": batch_x})
    grads = graph.backward(loss)
    return float(graph.value(loss)[0, 0]), grads


def train_teacher(base: Dataset, config: TrainConfig, log_path=None) -> ModelBundle:
    """Minibatch SGD on cross-entropy; returns the best held-out-CE bundle."""
    if base.labels is None:
        raise ConfigError("teacher training requires a labeled base dataset")
    if base.class_count < 2:
        raise ConfigError("teacher training requires at least two base classes")
    arch = config.arch or ArchConfig(input_dim=base.input_dim, class_count=base.class_count)
    if arch.input_dim != base.input_dim or arch.class_count != base.class_count:
        raise ConfigError(
            f"arch (dim={arch.input_dim}, classes={arch.class_count}) does not match "
            f"base data (dim={base.input_dim}, classes={base.class_count})"
        )
    init = init_bundle(arch, config.seed)
    if config.epochs == 0:
        if log_path:
            _write_training_log(log_path, [])
        return init
    train_idx, val_idx = validation_split(
        base.labels, base.n, config.val_fraction_base,
        rng_from(config.seed, "teacher_val").integers(2**32), base.class_count,
    )
    x_train, y_train = base.features[train_idx], base.labels[train_idx]
    x_val, y_val = base.features[val_idx], base.labels[val_idx]
    steps_per_epoch = math.ceil(x_train.shape[0] / config.batch_size_base)

    def run(lr: float, epochs: int, log_rows=None):
        params = dict(init.params)
        state = OptimizerState(lr, config.momentum, config.weight_decay)
        shuffle_rng = rng_from(config.seed, "teacher_shuffle")
        schedule = _DecaySchedule(lr, config.lr_decay_factor, config.lr_patience_epochs)
        best_val, best_params = math.inf, dict(init.params)
        for epoch in range(epochs):
            t0 = time.perf_counter()
            epoch_lr = schedule.lr
            state.learning_rate = epoch_lr
            step_losses = []
            for batch in _epoch_batches(x_train.shape[0], config.batch_size_base, shuffle_rng):
                cur = init.with_params(params)
                loss_val, grads = _teacher_step(cur, x_train[batch], y_train[batch])
                if not math.isfinite(loss_val):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                params, state = sgd_step(params, grads, state)
                step_losses.append(loss_val)
            train_loss = float(np.mean(step_losses))
            cur = init.with_params(params)
            val_loss = cross_entropy(classify(cur, embed(cur, x_val)), y_val)
            if val_loss < best_val:
                best_val = val_loss
                best_params = {k: v.copy() for k, v in params.items()}
            schedule.observe(train_loss)
            if log_rows is not None:
                wall_ms = (time.perf_counter() - t0) * 1000.0
                log_rows.append((epoch, epoch_lr, train_loss, val_loss, wall_ms))
        return init.with_params(best_params), best_val

    def probe(lr: float, probe_epochs: int, _seed: int) -> float:
        try:
            return run(lr, probe_epochs)[1]
        except NumericError:
            return math.inf

    lr = select_learning_rate(
        config.lr_candidates, probe_epochs_for(steps_per_epoch), probe, config.seed
    )
    log_rows: list | None = [] if log_path else None
    bundle, _ = run(lr, config.epochs, log_rows)
    if log_path:
        _write_training_log(log_path, log_rows)
    return bundle


# -- student -----------------------------------------------------------------------


def _student_step(
    cur: ModelBundle,
    weights: tuple[float, float, float],
    base_x: np.ndarray | None,
    base_y: np.ndarray | None,
    unlabeled_x: np.ndarray | None,
    targets: np.ndarray | None,
    view1: np.ndarray | None,
    view2: np.ndarray | None,
    nt_temperature: float,
):
    w_ce, w_kl, w_ss = weights
    graph = ValueGraph()
    feeds: dict[str, np.ndarray] = {}
    terms = []
    if w_ce != 0.0:
        xb = graph.input("base_x", base_x.shape[0], base_x.shape[1])
        feeds["base_x"] = base_x
        logits_b = classifier_logits_graph(graph, encoder_graph(graph, xb, cur), cur)
        terms.append(graph.scale(cross_entropy_graph(graph, logits_b, base_y), w_ce))
    if w_kl != 0.0:
        xu = graph.input("unlabeled_x", unlabeled_x.shape[0], unlabeled_x.shape[1])
        feeds["unlabeled_x"] = unlabeled_x
        logits_u = classifier_logits_graph(graph, encoder_graph(graph, xu, cur), cur)
        terms.append(graph.scale(kl_soft_graph(graph, logits_u, targets), w_kl))
    if w_ss != 0.0:
        a1 = graph.input("view1", view1.shape[0], view1.shape[1])
        a2 = graph.input("view2", view2.shape[0], view2.shape[1])
        feeds["view1"], feeds["view2"] = view1, view2
        stacked = graph.concat_rows(a1, a2)
        z = projection_graph(graph, encoder_graph(graph, stacked, cur), cur)
        pairing = two_view_pairing(view1.shape[0])
        terms.append(graph.scale(nt_xent_graph(graph, z, pairing, nt_temperature), w_ss))
    loss = terms[0]
    for term in terms[1:]:
        loss = graph.add(loss, term)
    graph.forward(feeds)
    grads = graph.backward(loss)
    return float(graph.value(loss)[0, 0]), grads


def _student_val_loss(
    cur: ModelBundle,
    weights: tuple[float, float, float],
    base_val: tuple[np.ndarray, np.ndarray] | None,
    unlabeled_val: tuple[np.ndarray, np.ndarray] | None,
    val_views: tuple[np.ndarray, np.ndarray] | None,
    nt_temperature: float,
) -> float:
    w_ce, w_kl, w_ss = weights
    total = 0.0
    if w_ce != 0.0:
        x, y = base_val
        total += w_ce * cross_entropy(classify(cur, embed(cur, x)), y)
    if w_kl != 0.0:
        x, targets = unlabeled_val
        total += w_kl * kl_soft(classify(cur, embed(cur, x)), targets)
    if w_ss != 0.0:
        v1, v2 = val_views
        z = np.concatenate([project(cur, embed(cur, v1)), project(cur, embed(cur, v2))])
        total += w_ss * nt_xent(PairedBatch(z, two_view_pairing(v1.shape[0])), nt_temperature)
    return total


def train_student(
    base: Dataset | None,
    soft_set: SoftLabeledSet | None,
    unlabeled: Dataset,
    teacher: ModelBundle,
    config: TrainConfig,
    log_path=None,
) -> ModelBundle:
    """Optimize the weighted three-term objective; returns the best-validation bundle.

    base and soft_set may be None when their term weight is zero (fine-tuning
    and contrastive-only variants).
    """
    w_ce, w_kl, w_ss = config.term_weights
    if w_ce == w_kl == w_ss == 0.0:
        raise ConfigError("all term weights are zero")
    if unlabeled.input_dim != teacher.arch.input_dim:
        raise DimensionError(
            f"unlabeled width {unlabeled.input_dim} != teacher input {teacher.arch.input_dim}"
        )
    if w_ce != 0.0:
        if base is None or base.labels is None:
            raise ConfigError("cross-entropy term requires a labeled base dataset")
        if base.input_dim != teacher.arch.input_dim:
            raise DimensionError(
                f"base width {base.input_dim} != teacher input {teacher.arch.input_dim}"
            )
    if w_kl != 0.0:
        if soft_set is None:
            raise ConfigError("KL term requires a soft-labeled set")
        if soft_set.n != unlabeled.n:
            raise DataError("soft-labeled set size differs from the unlabeled dataset")
        if soft_set.teacher_fingerprint != teacher.fingerprint():
            raise StalenessError("soft-labeled set was produced by a different teacher")

    student_init = init_student(config.init_strategy, teacher, config.seed)
    if config.epochs == 0:
        if log_path:
            _write_training_log(log_path, [])
        return student_init

    u_train_idx, u_val_idx = validation_split(
        None, unlabeled.n, config.val_fraction_unlabeled,
        rng_from(config.seed, "student_unlabeled_val").integers(2**32),
    )
    xu_train = unlabeled.features[u_train_idx]
    xu_val = unlabeled.features[u_val_idx]
    targets_train = soft_set.soft_targets[u_train_idx] if w_kl != 0.0 else None
    unlabeled_val = (xu_val, soft_set.soft_targets[u_val_idx]) if w_kl != 0.0 else None

    base_train = base_val = None
    if w_ce != 0.0:
        b_train_idx, b_val_idx = validation_split(
            base.labels, base.n, config.val_fraction_base,
            rng_from(config.seed, "student_base_val").integers(2**32), base.class_count,
        )
        base_train = (base.features[b_train_idx], base.labels[b_train_idx])
        base_val = (base.features[b_val_idx], base.labels[b_val_idx])

    val_views = None
    if w_ss != 0.0:
        # fixed once so epoch-end validation losses are comparable
        val_rng = rng_from(config.seed, "student_val_augment")
        val_views = (
            augment_batch(xu_val, config.augment, val_rng),
            augment_batch(xu_val, config.augment, val_rng),
        )

    steps_per_epoch = math.ceil(xu_train.shape[0] / config.batch_size_unlabeled)

    def run(lr: float, epochs: int, log_rows=None):
        params = dict(student_init.params)
        state = OptimizerState(lr, config.momentum, config.weight_decay)
        shuffle_rng = rng_from(config.seed, "student_unlabeled_shuffle")
        augment_rng = rng_from(config.seed, "student_augment")
        base_cycler = None
        if w_ce != 0.0:
            base_cycler = _Cycler(
                base_train[0].shape[0], config.batch_size_base,
                rng_from(config.seed, "student_base_shuffle"),
            )
        schedule = _DecaySchedule(lr, config.lr_decay_factor, config.lr_patience_epochs)
        best_val, best_params = math.inf, dict(student_init.params)
        for epoch in range(epochs):
            t0 = time.perf_counter()
            epoch_lr = schedule.lr
            state.learning_rate = epoch_lr
            step_losses = []
            for chunk in _epoch_batches(xu_train.shape[0], config.batch_size_unlabeled, shuffle_rng):
                batch_x = batch_y = None
                if w_ce != 0.0:
                    b_idx = base_cycler.next_batch()
                    batch_x, batch_y = base_train[0][b_idx], base_train[1][b_idx]
                xu = xu_train[chunk]
                batch_targets = targets_train[chunk] if w_kl != 0.0 else None
                view1 = view2 = None
                if w_ss != 0.0:
                    view1 = augment_batch(xu, config.augment, augment_rng)
                    view2 = augment_batch(xu, config.augment, augment_rng)
                cur = student_init.with_params(params)
                loss_val, grads = _student_step(
                    cur, config.term_weights, batch_x, batch_y,
                    xu if w_kl != 0.0 else None, batch_targets,
                    view1, view2, config.nt_xent_temperature,
                )
                if not math.isfinite(loss_val):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                params, state = sgd_step(params, grads, state)
                step_losses.append(loss_val)
            train_loss = float(np.mean(step_losses))
            cur = student_init.with_params(params)
            val_loss = _student_val_loss(
                cur, config.term_weights, base_val, unlabeled_val, val_views,
                config.nt_xent_temperature,
            )
            if val_loss < best_val:
                best_val = val_loss
                best_params = {k: v.copy() for k, v in params.items()}
            schedule.observe(train_loss)
            if log_rows is not None:
                wall_ms = (time.perf_counter() - t0) * 1000.0
                log_rows.append((epoch, epoch_lr, train_loss, val_loss, wall_ms))
        return student_init.with_params(best_params), best_val

    def probe(lr: float, probe_epochs: int, _seed: int) -> float:
        try:
            return run(lr, probe_epochs)[1]
        except NumericError:
            return math.inf

    lr = select_learning_rate(
        config.lr_candidates, probe_epochs_for(steps_per_epoch), probe, config.seed
    )
    log_rows: list | None = [] if log_path else None
    bundle, _ = run(lr, config.epochs, log_rows)
    if log_path:
        _write_training_log(log_path, log_rows)
    return bundle
