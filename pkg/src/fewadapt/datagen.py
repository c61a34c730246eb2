"""Synthetic domain generation, unlabeled splits, augmentation, dataset files.

Domains are Gaussian class blobs in feature space. A target domain can reuse
the base domain's class-mean directions through an alignment mapping and a
mixing coefficient alpha: alpha=1 reuses base directions exactly, alpha=0
places classes on fresh random directions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .seeding import rng_from


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with optional labels; immutable once constructed.

    hidden_labels retains ground truth for splits whose public labels were
    dropped (used only by the grouping-agreement analysis).
    """

    features: np.ndarray
    labels: np.ndarray | None
    class_count: int
    domain_tag: str = ""
    hidden_labels: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {feats.shape}")
        feats = feats.copy()
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        for attr in ("labels", "hidden_labels"):
            raw = getattr(self, attr)
            if raw is None:
                continue
            lab = np.asarray(raw, dtype=np.intp).copy()
            if lab.shape != (feats.shape[0],):
                raise DataError(f"{attr} shape {lab.shape} != example count {feats.shape[0]}")
            if lab.size and (lab.min() < 0 or lab.max() >= self.class_count):
                raise DataError(f"{attr} out of range [0, {self.class_count})")
            lab.setflags(write=False)
            object.__setattr__(self, attr, lab)
        if self.labels is not None:
            counts = np.bincount(self.labels, minlength=self.class_count)
            if np.any(counts == 0):
                missing = np.flatnonzero(counts == 0).tolist()
                raise DataError(f"labeled dataset has empty classes {missing}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Alignment:
    """Target-to-base class mapping plus the direction mixing coefficient."""

    mapping: tuple[int, ...]
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        object.__setattr__(self, "mapping", tuple(int(m) for m in self.mapping))


@dataclass(frozen=True)
class DomainSpec:
    class_count: int
    per_class_count: int
    input_dim: int
    scale: float = 6.0
    sigma: float = 1.0
    alignment: Alignment | None = None

    def __post_init__(self):
        if self.class_count < 1 or self.per_class_count < 1 or self.input_dim < 1:
            raise ConfigError(f"class/per-class/dim counts must be >= 1, got {self}")
        if self.scale <= 0 or self.sigma < 0:
            raise ConfigError(f"scale must be > 0 and sigma >= 0, got {self}")
        if self.alignment is not None and len(self.alignment.mapping) != self.class_count:
            raise ConfigError(
                f"alignment mapping has {len(self.alignment.mapping)} entries "
                f"for {self.class_count} classes"
            )


@dataclass(frozen=True)
class AugmentPolicy:
    gaussian_noise_sigma: float = 0.0
    feature_dropout_prob: float = 0.0
    scale_jitter_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.scale_jitter_range
        if self.gaussian_noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.gaussian_noise_sigma}")
        if not 0.0 <= self.feature_dropout_prob < 1.0:
            raise ConfigError(f"dropout prob must be in [0, 1), got {self.feature_dropout_prob}")
        if not 0 < lo <= hi:
            raise ConfigError(f"jitter range must satisfy 0 < lo <= hi, got {self.scale_jitter_range}")
        object.__setattr__(self, "scale_jitter_range", (float(lo), float(hi)))


def class_directions(class_count: int, input_dim: int, seed: int) -> np.ndarray:
    """Unit direction per class, deterministic per seed."""
    rng = rng_from(seed, "class_directions")
    dirs = rng.standard_normal((class_count, input_dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def generate_domain(
    spec: DomainSpec,
    seed: int,
    base_directions: np.ndarray | None = None,
    domain_tag: str = "",
) -> Dataset:
    """Sample class blobs: mean_c = scale*(alpha*base_dir + (1-alpha)*fresh_dir)."""
    fresh = class_directions(spec.class_count, spec.input_dim, seed)
    if spec.alignment is not None:
        if base_directions is None:
            raise ConfigError("aligned domain requires base_directions")
        base = np.asarray(base_directions, dtype=np.float64)
        if base.shape[1] != spec.input_dim:
            raise ConfigError(
                f"base directions dim {base.shape[1]} != domain dim {spec.input_dim}"
            )
        mapping = np.asarray(spec.alignment.mapping)
        if mapping.min() < 0 or mapping.max() >= base.shape[0]:
            raise ConfigError("alignment mapping indexes outside base classes")
        a = spec.alignment.alpha
        dirs = a * base[mapping] + (1.0 - a) * fresh
    else:
        dirs = fresh
    means = spec.scale * dirs
    rng = rng_from(seed, "domain_samples")
    features = np.repeat(means, spec.per_class_count, axis=0)
    features = features + spec.sigma * rng.standard_normal(features.shape)
    labels = np.repeat(np.arange(spec.class_count), spec.per_class_count)
    return Dataset(features, labels, spec.class_count, domain_tag=domain_tag)


def _stratified_take(labels: np.ndarray, class_count: int, per_class: np.ndarray,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    taken, rest = [], []
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        taken.append(idx[: per_class[c]])
        rest.append(idx[per_class[c]:])
    return np.sort(np.concatenate(taken)), np.sort(np.concatenate(rest))


def split_unlabeled(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; the unlabeled side drops labels but retains them hidden."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    if dataset.labels is None:
        raise DataError("split_unlabeled requires a labeled dataset")
    counts = np.bincount(dataset.labels, minlength=dataset.class_count)
    per_class = np.clip(np.rint(fraction * counts).astype(int), 0, counts - 1)
    rng = rng_from(seed, "split_unlabeled")
    u_idx, e_idx = _stratified_take(dataset.labels, dataset.class_count, per_class, rng)
    if u_idx.size < 1 or e_idx.size < 1:
        raise ConfigError(f"fraction {fraction} leaves an empty side of the split")
    unlabeled = Dataset(
        dataset.features[u_idx], None, dataset.class_count,
        domain_tag=dataset.domain_tag, hidden_labels=dataset.labels[u_idx],
    )
    eval_pool = Dataset(
        dataset.features[e_idx], dataset.labels[e_idx], dataset.class_count,
        domain_tag=dataset.domain_tag,
    )
    return unlabeled, eval_pool


def split_for_sweep(dataset: Dataset, eval_fraction: float, unlabeled_fraction: float,
                    seed: int) -> tuple[Dataset, Dataset]:
    """Fixed stratified eval reserve; unlabeled drawn from the remainder.

    The eval pool depends only on (dataset, eval_fraction, seed), so episode
    contents stay identical while the unlabeled amount varies. Unlabeled sets
    for the same seed are nested: a larger fraction is a superset of a
    smaller one, so sweep cells differ only by the added examples.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError(f"eval fraction must be in (0, 1), got {eval_fraction}")
    if not 0.0 < unlabeled_fraction <= 1.0 - eval_fraction:
        raise ConfigError(
            f"unlabeled fraction must be in (0, {1.0 - eval_fraction}], got {unlabeled_fraction}"
        )
    if dataset.labels is None:
        raise DataError("split_for_sweep requires a labeled dataset")
    counts = np.bincount(dataset.labels, minlength=dataset.class_count)
    eval_per_class = np.clip(np.rint(eval_fraction * counts).astype(int), 1, counts - 1)
    rng = rng_from(seed, "sweep_eval_reserve")
    e_idx, rest_idx = _stratified_take(dataset.labels, dataset.class_count, eval_per_class, rng)
    rest_labels = dataset.labels[rest_idx]
    want = np.rint(unlabeled_fraction * counts).astype(int)
    rest_counts = np.bincount(rest_labels, minlength=dataset.class_count)
    if np.any(want > rest_counts):
        raise ConfigError(
            f"unlabeled fraction {unlabeled_fraction} exceeds the non-eval remainder"
        )
    # one fraction-independent order per seed gives the nesting property
    rng_u = rng_from(seed, "sweep_unlabeled")
    order_per_class = {
        c: np.flatnonzero(rest_labels == c)[rng_u.permutation(int(rest_counts[c]))]
        for c in range(dataset.class_count)
    }
    u_local = np.sort(np.concatenate([
        order_per_class[c][: want[c]] for c in range(dataset.class_count)
    ]))
    u_idx = rest_idx[u_local]
    unlabeled = Dataset(
        dataset.features[u_idx], None, dataset.class_count,
        domain_tag=dataset.domain_tag, hidden_labels=dataset.labels[u_idx],
    )
    eval_pool = Dataset(
        dataset.features[e_idx], dataset.labels[e_idx], dataset.class_count,
        domain_tag=dataset.domain_tag,
    )
    return unlabeled, eval_pool


def augment_batch(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """x' = jitter * (x * dropout_mask) + noise, drawn row-wise from rng."""
    x = np.asarray(batch, dtype=np.float64)
    n, d = x.shape
    lo, hi = policy.scale_jitter_range
    out = x
    if policy.feature_dropout_prob > 0.0:
        mask = rng.random((n, d)) >= policy.feature_dropout_prob
        out = out * mask
    if (lo, hi) != (1.0, 1.0):
        jitter = rng.uniform(lo, hi, size=(n, 1))
        out = out * jitter
    elif out is x:
        out = x.copy()
    if policy.gaussian_noise_sigma > 0.0:
        out = out + policy.gaussian_noise_sigma * rng.standard_normal((n, d))
    return out


def augment(example: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Single-vector augmentation; identical to one row of augment_batch."""
    vec = np.asarray(example, dtype=np.float64)
    if vec.ndim != 1:
        raise DataError(f"augment expects a 1-D feature vector, got shape {vec.shape}")
    return augment_batch(vec[None, :], policy, rng)[0]


# -- dataset files ----------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """Comma-separated text: header label,f0..f{D-1}; blank label when unlabeled."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(dataset.input_dim)])
        labels = dataset.labels
        for i in range(dataset.n):
            label = "" if labels is None else str(int(labels[i]))
            writer.writerow([label] + [repr(float(v)) for v in dataset.features[i]])


def load_dataset(path, has_labels: bool, domain_tag: str = "") -> Dataset:
    """Parse a dataset file; errors carry the 1-based line number."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise ParseError(f"{path}: file not found") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}:1: empty file, expected a header row") from None
        if len(header) < 2 or header[0] != "label":
            raise ParseError(f"{path}:1: header must be label,f0,...,f{{D-1}}")
        dim = len(header) - 1
        features: list[list[float]] = []
        labels: list[int | None] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise ParseError(
                    f"{path}:{line_no}: expected {dim + 1} fields, got {len(row)}"
                )
            raw_label = row[0].strip()
            if raw_label == "":
                labels.append(None)
            else:
                try:
                    label = int(raw_label)
                except ValueError:
                    raise ParseError(
                        f"{path}:{line_no}: label '{raw_label}' is not an integer"
                    ) from None
                if label < 0:
                    raise ParseError(f"{path}:{line_no}: label {label} out of range")
                labels.append(label)
            try:
                features.append([float(v) for v in row[1:]])
            except ValueError:
                raise ParseError(f"{path}:{line_no}: non-numeric feature value") from None
        if not features:
            raise ParseError(f"{path}:2: no data rows")
    feats = np.asarray(features, dtype=np.float64)
    present = [l for l in labels if l is not None]
    if has_labels:
        missing = [i + 2 for i, l in enumerate(labels) if l is None]
        if missing:
            raise ParseError(f"{path}:{missing[0]}: blank label in a labeled file")
        label_arr = np.asarray(present, dtype=np.intp)
        return Dataset(feats, label_arr, int(label_arr.max()) + 1, domain_tag=domain_tag)
    # unlabeled load: any labels present are retained as hidden ground truth
    hidden = None
    class_count = 0
    if len(present) == len(labels) and present:
        hidden = np.asarray(present, dtype=np.intp)
        class_count = int(hidden.max()) + 1
    return Dataset(feats, None, class_count, domain_tag=domain_tag, hidden_labels=hidden)
