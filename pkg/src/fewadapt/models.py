"""Encoder, linear classifier head, projection head; student initialization.

A ModelBundle is an immutable snapshot of all weights plus the architecture
record. Training never mutates a bundle; it produces new ones.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .diffcore import Node, ValueGraph
from .errors import ConfigError, DimensionError, FormatError
from .seeding import rng_from

BUNDLE_FORMAT_VERSION = 1

INIT_RANDOM = "random"
INIT_TEACHER_EMBEDDING = "teacher_embedding_random_classifier"
INIT_FULL_TEACHER = "full_teacher"
INIT_STRATEGIES = (INIT_RANDOM, INIT_TEACHER_EMBEDDING, INIT_FULL_TEACHER)


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int
    class_count: int
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    proj_hidden_dim: int = 32
    proj_dim: int = 16

    def __post_init__(self):
        dims = (self.input_dim, self.class_count, self.embed_dim,
                self.proj_hidden_dim, self.proj_dim, *self.hidden_dims)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all architecture dims must be >= 1, got {self}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    @property
    def encoder_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.embed_dim)


def encoder_param_names(arch: ArchConfig) -> tuple[str, ...]:
    n_layers = len(arch.encoder_dims) - 1
    return tuple(f"enc{i}_{kind}" for i in range(n_layers) for kind in ("w", "b"))


CLASSIFIER_PARAM_NAMES = ("cls_w", "cls_b")
PROJECTION_PARAM_NAMES = ("proj0_w", "proj0_b", "proj1_w", "proj1_b")


@dataclass(frozen=True)
class ModelBundle:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    rng_seed: int

    @property
    def encoder_params(self) -> dict[str, np.ndarray]:
        return {n: self.params[n] for n in encoder_param_names(self.arch)}

    @property
    def classifier_params(self) -> dict[str, np.ndarray]:
        return {n: self.params[n] for n in CLASSIFIER_PARAM_NAMES}

    @property
    def projection_params(self) -> dict[str, np.ndarray]:
        return {n: self.params[n] for n in PROJECTION_PARAM_NAMES}

    def with_params(self, params: dict[str, np.ndarray]) -> "ModelBundle":
        merged = dict(self.params)
        merged.update(params)
        return replace(self, params=merged)

    def fingerprint(self) -> str:
        return hashlib.sha256(serialize_bundle(self).encode("utf-8")).hexdigest()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_bundle(arch: ArchConfig, seed: int) -> ModelBundle:
    """Glorot-uniform weights, zero biases; deterministic per (arch, seed)."""
    rng = rng_from(seed, "bundle_init")
    params: dict[str, np.ndarray] = {}
    dims = arch.encoder_dims
    for i in range(len(dims) - 1):
        params[f"enc{i}_w"] = _glorot(rng, dims[i], dims[i + 1])
        params[f"enc{i}_b"] = np.zeros((1, dims[i + 1]))
    params["cls_w"] = _glorot(rng, arch.embed_dim, arch.class_count)
    params["cls_b"] = np.zeros((1, arch.class_count))
    params["proj0_w"] = _glorot(rng, arch.embed_dim, arch.proj_hidden_dim)
    params["proj0_b"] = np.zeros((1, arch.proj_hidden_dim))
    params["proj1_w"] = _glorot(rng, arch.proj_hidden_dim, arch.proj_dim)
    params["proj1_b"] = np.zeros((1, arch.proj_dim))
    return ModelBundle(arch=arch, params=params, rng_seed=int(seed))


def init_student(strategy: str, teacher: ModelBundle, seed: int) -> ModelBundle:
    """Student weights per strategy; fresh parts come from init_bundle(seed)."""
    if strategy not in INIT_STRATEGIES:
        raise ConfigError(f"unknown init strategy '{strategy}'; expected one of {INIT_STRATEGIES}")
    fresh = init_bundle(teacher.arch, seed)
    if strategy == INIT_RANDOM:
        return fresh
    params = dict(fresh.params)
    params.update({n: v.copy() for n, v in teacher.encoder_params.items()})
    if strategy == INIT_FULL_TEACHER:
        params.update({n: v.copy() for n, v in teacher.classifier_params.items()})
    return ModelBundle(arch=teacher.arch, params=params, rng_seed=int(seed))


# -- inference (numpy path; mirrors the graph ops operation-for-operation) ----


def _check_width(name: str, batch: np.ndarray, width: int) -> np.ndarray:
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise DimensionError(f"{name}: expected Nx{width}, got shape {arr.shape}")
    return arr


def embed(bundle: ModelBundle, batch) -> np.ndarray:
    """Encoder output: relu MLP, no activation after the final layer."""
    h = _check_width("embed", batch, bundle.arch.input_dim)
    n_layers = len(bundle.arch.encoder_dims) - 1
    for i in range(n_layers):
        h = h @ bundle.params[f"enc{i}_w"] + bundle.params[f"enc{i}_b"]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def classify(bundle: ModelBundle, embeddings, temperature: float = 1.0) -> np.ndarray:
    """Row-stochastic class probabilities: softmax(logits / temperature)."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    e = _check_width("classify", embeddings, bundle.arch.embed_dim)
    logits = (e @ bundle.params["cls_w"] + bundle.params["cls_b"]) * (1.0 / temperature)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def project(bundle: ModelBundle, embeddings) -> np.ndarray:
    """Two-layer projection head, rows l2-normalized (zero rows stay zero)."""
    e = _check_width("project", embeddings, bundle.arch.embed_dim)
    h = np.maximum(e @ bundle.params["proj0_w"] + bundle.params["proj0_b"], 0.0)
    z = h @ bundle.params["proj1_w"] + bundle.params["proj1_b"]
    norms = np.sqrt((z * z).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0) and z.shape[0] > 0:
        warnings.warn("projection produced all-zero rows; they stay zero", RuntimeWarning)
    return z / np.where(norms > 0.0, norms, 1.0)


# -- graph builders ------------------------------------------------------------


def encoder_graph(graph: ValueGraph, x: Node, bundle: ModelBundle) -> Node:
    n_layers = len(bundle.arch.encoder_dims) - 1
    h = x
    for i in range(n_layers):
        w = graph.parameter(f"enc{i}_w", bundle.params[f"enc{i}_w"])
        b = graph.parameter(f"enc{i}_b", bundle.params[f"enc{i}_b"])
        h = graph.add(graph.matmul(h, w), b)
        if i < n_layers - 1:
            h = graph.relu(h)
    return h


def classifier_logits_graph(graph: ValueGraph, embeddings: Node, bundle: ModelBundle,
                            temperature: float = 1.0) -> Node:
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    w = graph.parameter("cls_w", bundle.params["cls_w"])
    b = graph.parameter("cls_b", bundle.params["cls_b"])
    logits = graph.add(graph.matmul(embeddings, w), b)
    if temperature != 1.0:
        logits = graph.scale(logits, 1.0 / temperature)
    return logits


def projection_graph(graph: ValueGraph, embeddings: Node, bundle: ModelBundle) -> Node:
    w0 = graph.parameter("proj0_w", bundle.params["proj0_w"])
    b0 = graph.parameter("proj0_b", bundle.params["proj0_b"])
    w1 = graph.parameter("proj1_w", bundle.params["proj1_w"])
    b1 = graph.parameter("proj1_b", bundle.params["proj1_b"])
    h = graph.relu(graph.add(graph.matmul(embeddings, w0), b0))
    z = graph.add(graph.matmul(h, w1), b1)
    return graph.l2_normalize_rows(z)


# -- persistence ----------------------------------------------------------------


def serialize_bundle(bundle: ModelBundle) -> str:
    payload = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "arch": {
            "input_dim": bundle.arch.input_dim,
            "class_count": bundle.arch.class_count,
            "hidden_dims": list(bundle.arch.hidden_dims),
            "embed_dim": bundle.arch.embed_dim,
            "proj_hidden_dim": bundle.arch.proj_hidden_dim,
            "proj_dim": bundle.arch.proj_dim,
        },
        "rng_seed": bundle.rng_seed,
        "params": {
            name: {
                "rows": int(v.shape[0]),
                "cols": int(v.shape[1]),
                "data": v.reshape(-1).tolist(),
            }
            for name, v in sorted(bundle.params.items())
        },
    }
    return json.dumps(payload, sort_keys=True)


def save_bundle(bundle: ModelBundle, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_bundle(bundle))
        fh.write("\n")


def load_bundle(path) -> ModelBundle:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise FormatError(
            f"{path}: bundle format version {version!r} unsupported "
            f"(expected {BUNDLE_FORMAT_VERSION})"
        )
    arch = ArchConfig(
        input_dim=payload["arch"]["input_dim"],
        class_count=payload["arch"]["class_count"],
        hidden_dims=tuple(payload["arch"]["hidden_dims"]),
        embed_dim=payload["arch"]["embed_dim"],
        proj_hidden_dim=payload["arch"]["proj_hidden_dim"],
        proj_dim=payload["arch"]["proj_dim"],
    )
    params = {
        name: np.asarray(rec["data"], dtype=np.float64).reshape(rec["rows"], rec["cols"])
        for name, rec in payload["params"].items()
    }
    return ModelBundle(arch=arch, params=params, rng_seed=int(payload["rng_seed"]))
