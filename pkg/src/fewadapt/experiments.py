"""Config-driven experiment grid: methods x targets x shots, with reports.

Config files are line-oriented ``section.key = value`` text (``#`` starts a
comment). See configs/default.cfg for the full schema. The grid trains one
teacher on the base domain, builds one representation per (method, target)
cell, evaluates every cell on shared episode seeds, and writes deterministic
results files plus aligned-text and machine-readable reports.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import analysis, datagen, fewshot, models, pipeline
from .errors import ConfigError, EngineError, ReportError
from .seeding import derive_seed

METHODS = (
    "transfer",
    "simclr_only",
    "transfer_plus_simclr",
    "startup",
    "startup_no_ss",
    "startup_t",
    "startup_rand",
    "finetune",
)

# (term weights, init strategy); transfer has no student training
METHOD_RECIPES = {
    "simclr_only": ((0.0, 0.0, 1.0), models.INIT_RANDOM),
    "transfer_plus_simclr": ((0.0, 0.0, 1.0), models.INIT_TEACHER_EMBEDDING),
    "startup": ((1.0, 1.0, 1.0), models.INIT_TEACHER_EMBEDDING),
    "startup_no_ss": ((1.0, 1.0, 0.0), models.INIT_TEACHER_EMBEDDING),
    "startup_t": ((1.0, 1.0, 1.0), models.INIT_FULL_TEACHER),
    "startup_rand": ((1.0, 1.0, 1.0), models.INIT_RANDOM),
    "finetune": ((0.0, 1.0, 1.0), models.INIT_TEACHER_EMBEDDING),
}

RECORDS_HEADER = "method,target,unlabeled_source,n_way,k_shot,episode_id,accuracy,seed"


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class DomainConfig:
    """Either a synthetic spec or a path to a dataset file."""

    name: str
    classes: int = 0
    per_class: int = 0
    dim: int = 0
    scale: float = 12.0
    sigma: float = 1.0
    alpha: float | None = None
    mapping: tuple[int, ...] | None = None
    file: str | None = None

    def is_synthetic(self) -> bool:
        return self.file is None


@dataclass(frozen=True)
class EvalSettings:
    n_way: int = 5
    k_shots: tuple[int, ...] = (1, 5)
    query_per_class: int = 15
    n_episodes: int = 600


@dataclass(frozen=True)
class SweepSettings:
    fractions: tuple[float, ...]
    target: str
    eval_fraction: float = 0.2
    k_shot: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    base: DomainConfig
    targets: tuple[DomainConfig, ...]
    methods: tuple[str, ...]
    unlabeled_fraction: float
    eval: EvalSettings
    pairings: tuple[tuple[str, str], ...]
    sweep: SweepSettings | None
    train_overrides: dict
    arch_overrides: dict
    augment: datagen.AugmentPolicy
    seed: int
    profile: str
    output_dir: str
    source_text: str

    def fingerprint(self) -> str:
        key = self.source_text + f"|seed={self.seed}|profile={self.profile}"
        return hashlib.sha256(key.encode("utf-8")).hexdigest()


def parse_config_text(text: str) -> dict[str, str]:
    """Parse line-oriented 'section.key = value' text into a flat dict."""
    entries: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {line_no}: empty key")
        if key in entries:
            raise ConfigError(f"config line {line_no}: duplicate key '{key}'")
        entries[key] = value
    return entries


def _parse_floats(value: str) -> tuple[float, ...]:
    return tuple(float(v.strip()) for v in value.split(",") if v.strip())


def _parse_ints(value: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in value.split(",") if v.strip())


def _parse_names(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


_DOMAIN_KEYS = {"classes", "per_class", "dim", "scale", "sigma", "alpha", "mapping", "file"}
_EVAL_KEYS = {"n_way", "k_shots", "query_per_class", "episodes"}
_TRAIN_KEYS = {
    "epochs", "batch_base", "batch_unlabeled", "momentum", "weight_decay",
    "lr_candidates", "lr_decay_factor", "lr_patience", "val_fraction_unlabeled",
    "val_fraction_base", "nt_temperature", "soft_label_temperature",
}
_MODEL_KEYS = {"hidden", "embed_dim", "proj_hidden", "proj_dim"}
_AUGMENT_KEYS = {"noise", "dropout", "jitter"}
_SWEEP_KEYS = {"fractions", "target", "eval_fraction", "k_shot"}
_TOP_KEYS = {"methods", "seed", "output_dir"}


def _domain_from_entries(name: str, entries: dict[str, str], problems: list[str]) -> DomainConfig:
    kwargs: dict = {"name": name}
    for key, value in entries.items():
        if key not in _DOMAIN_KEYS:
            problems.append(f"unknown domain key '{name}.{key}'")
            continue
        try:
            if key in ("classes", "per_class", "dim"):
                kwargs[key] = int(value)
            elif key in ("scale", "sigma", "alpha"):
                kwargs[key] = float(value)
            elif key == "mapping":
                kwargs[key] = None if value == "identity" else _parse_ints(value)
            else:
                kwargs[key] = value
        except ValueError:
            problems.append(f"bad value for '{name}.{key}': {value!r}")
    if kwargs.get("file") is None and not all(
        kwargs.get(k, 0) > 0 for k in ("classes", "per_class", "dim")
    ):
        problems.append(f"domain '{name}' needs classes/per_class/dim or a file")
    return DomainConfig(**kwargs)


def build_experiment_config(
    text: str,
    profile: str = "desk",
    seed: int | None = None,
    output_dir: str | None = None,
) -> ExperimentConfig:
    """Validate and assemble a config; raises ConfigError listing every problem."""
    entries = parse_config_text(text)
    problems: list[str] = []
    grouped: dict[str, dict[str, str]] = {}
    top: dict[str, str] = {}
    for key, value in entries.items():
        if "." in key:
            section, sub = key.split(".", 1)
            grouped.setdefault(section, {})[sub] = value
        else:
            top[key] = value
    for key in top:
        if key not in _TOP_KEYS:
            problems.append(f"unknown key '{key}'")

    base_entries = grouped.pop("base", None)
    if base_entries is None:
        problems.append("missing base domain section 'base.*'")
        base = DomainConfig(name="base", classes=1, per_class=1, dim=1)
    else:
        base = _domain_from_entries("base", base_entries, problems)

    target_entries = grouped.pop("target", {})
    by_target: dict[str, dict[str, str]] = {}
    for key, value in target_entries.items():
        if "." not in key:
            problems.append(f"target key must be 'target.<name>.<field>': 'target.{key}'")
            continue
        tname, sub = key.split(".", 1)
        by_target.setdefault(tname, {})[sub] = value
    targets = tuple(
        _domain_from_entries(tname, fields, problems) for tname, fields in by_target.items()
    )
    if not targets:
        problems.append("at least one target domain 'target.<name>.*' is required")

    methods = _parse_names(top.get("methods", ""))
    if not methods:
        problems.append("'methods' must list at least one method")
    for m in methods:
        if m not in METHODS:
            problems.append(f"unknown method '{m}' (expected subset of {METHODS})")

    unlabeled = grouped.pop("unlabeled", {})
    try:
        unlabeled_fraction = float(unlabeled.pop("fraction", "0.2"))
    except ValueError:
        problems.append("bad value for 'unlabeled.fraction'")
        unlabeled_fraction = 0.2
    for key in unlabeled:
        problems.append(f"unknown key 'unlabeled.{key}'")

    eval_entries = grouped.pop("eval", {})
    eval_kwargs: dict = {}
    for key, value in eval_entries.items():
        if key not in _EVAL_KEYS:
            problems.append(f"unknown key 'eval.{key}'")
            continue
        try:
            if key == "k_shots":
                eval_kwargs["k_shots"] = _parse_ints(value)
            elif key == "episodes":
                eval_kwargs["n_episodes"] = int(value)
            else:
                eval_kwargs[key] = int(value)
        except ValueError:
            problems.append(f"bad value for 'eval.{key}': {value!r}")
    eval_settings = EvalSettings(**eval_kwargs)
    if any(k < 1 for k in eval_settings.k_shots):
        problems.append("eval.k_shots must all be >= 1")

    train_entries = grouped.pop("train", {})
    train_overrides: dict = {}
    rename = {
        "batch_base": "batch_size_base",
        "batch_unlabeled": "batch_size_unlabeled",
        "lr_patience": "lr_patience_epochs",
        "nt_temperature": "nt_xent_temperature",
    }
    for key, value in train_entries.items():
        if key not in _TRAIN_KEYS:
            problems.append(f"unknown key 'train.{key}'")
            continue
        try:
            if key == "lr_candidates":
                train_overrides[key] = _parse_floats(value)
            elif key in ("epochs", "batch_base", "batch_unlabeled", "lr_patience"):
                train_overrides[rename.get(key, key)] = int(value)
            else:
                train_overrides[rename.get(key, key)] = float(value)
        except ValueError:
            problems.append(f"bad value for 'train.{key}': {value!r}")

    model_entries = grouped.pop("model", {})
    arch_overrides: dict = {}
    for key, value in model_entries.items():
        if key not in _MODEL_KEYS:
            problems.append(f"unknown key 'model.{key}'")
            continue
        try:
            if key == "hidden":
                arch_overrides["hidden_dims"] = _parse_ints(value)
            elif key == "proj_hidden":
                arch_overrides["proj_hidden_dim"] = int(value)
            else:
                arch_overrides[key] = int(value)
        except ValueError:
            problems.append(f"bad value for 'model.{key}': {value!r}")

    augment_entries = grouped.pop("augment", {})
    augment = pipeline.DEFAULT_AUGMENT
    for key in set(augment_entries) - _AUGMENT_KEYS:
        problems.append(f"unknown key 'augment.{key}'")
    try:
        default_jitter = ",".join(repr(v) for v in augment.scale_jitter_range)
        augment = datagen.AugmentPolicy(
            gaussian_noise_sigma=float(augment_entries.get("noise", augment.gaussian_noise_sigma)),
            feature_dropout_prob=float(augment_entries.get("dropout", augment.feature_dropout_prob)),
            scale_jitter_range=_parse_floats(augment_entries.get("jitter", default_jitter)),
        )
    except (ValueError, ConfigError) as exc:
        problems.append(f"bad augment section: {exc}")

    pairing_entries = grouped.pop("pairing", {})
    target_names = {t.name for t in targets}
    pairings: list[tuple[str, str]] = []
    for tname, source in pairing_entries.items():
        if tname not in target_names:
            problems.append(f"pairing target '{tname}' is not a configured target")
        elif source.strip() not in target_names:
            problems.append(f"pairing source '{source.strip()}' is not a configured target")
        else:
            pairings.append((tname, source.strip()))

    sweep_entries = grouped.pop("sweep", {})
    sweep = None
    if sweep_entries:
        for key in set(sweep_entries) - _SWEEP_KEYS:
            problems.append(f"unknown key 'sweep.{key}'")
        try:
            fractions = _parse_floats(sweep_entries.get("fractions", ""))
            if not fractions:
                problems.append("sweep.fractions must list at least one fraction")
            sweep_target = sweep_entries.get("target", targets[0].name if targets else "")
            if sweep_target not in target_names:
                problems.append(f"sweep.target '{sweep_target}' is not a configured target")
            sweep = SweepSettings(
                fractions=fractions,
                target=sweep_target,
                eval_fraction=float(sweep_entries.get("eval_fraction", "0.2")),
                k_shot=int(sweep_entries.get("k_shot", "5")),
            )
        except ValueError as exc:
            problems.append(f"bad sweep section: {exc}")

    for section in grouped:
        problems.append(f"unknown section '{section}.*'")

    if profile not in pipeline.PROFILES:
        problems.append(f"unknown profile '{profile}'")

    resolved_seed = seed if seed is not None else int(top.get("seed", "0"))
    resolved_out = output_dir or top.get("output_dir", "")
    if not resolved_out:
        problems.append("output directory required ('output_dir' key or --out)")

    if problems:
        raise ConfigError("invalid experiment config: " + "; ".join(problems))
    return ExperimentConfig(
        base=base,
        targets=targets,
        methods=methods,
        unlabeled_fraction=unlabeled_fraction,
        eval=eval_settings,
        pairings=tuple(pairings),
        sweep=sweep,
        train_overrides=train_overrides,
        arch_overrides=arch_overrides,
        augment=augment,
        seed=resolved_seed,
        profile=profile,
        output_dir=resolved_out,
        source_text=text,
    )


def load_experiment_config(path, profile="desk", seed=None, output_dir=None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return build_experiment_config(fh.read(), profile=profile, seed=seed, output_dir=output_dir)


# -- dataset construction -----------------------------------------------------------


def _build_base(config: ExperimentConfig) -> tuple[datagen.Dataset, np.ndarray | None]:
    dom = config.base
    if not dom.is_synthetic():
        return datagen.load_dataset(dom.file, has_labels=True, domain_tag=dom.name), None
    spec = datagen.DomainSpec(dom.classes, dom.per_class, dom.dim, dom.scale, dom.sigma)
    seed = derive_seed(config.seed, "base_data")
    dirs = datagen.class_directions(dom.classes, dom.dim, seed)
    return datagen.generate_domain(spec, seed, domain_tag=dom.name), dirs


def _build_target(config: ExperimentConfig, dom: DomainConfig,
                  base_dirs: np.ndarray | None) -> datagen.Dataset:
    if not dom.is_synthetic():
        return datagen.load_dataset(dom.file, has_labels=True, domain_tag=dom.name)
    if base_dirs is None:
        raise ConfigError(
            f"synthetic target '{dom.name}' needs a synthetic base domain for alignment"
        )
    mapping = dom.mapping
    if mapping is None:
        mapping = tuple(c % base_dirs.shape[0] for c in range(dom.classes))
    alpha = dom.alpha if dom.alpha is not None else 0.9
    spec = datagen.DomainSpec(
        dom.classes, dom.per_class, dom.dim or base_dirs.shape[1], dom.scale, dom.sigma,
        alignment=datagen.Alignment(mapping, alpha),
    )
    return datagen.generate_domain(
        spec, derive_seed(config.seed, "target_data", dom.name), base_directions=base_dirs,
        domain_tag=dom.name,
    )


def _train_config_for(config: ExperimentConfig, method: str, cell_seed: int,
                      input_dim: int, class_count: int) -> pipeline.TrainConfig:
    weights, init = METHOD_RECIPES[method]
    arch = models.ArchConfig(input_dim=input_dim, class_count=class_count,
                             **config.arch_overrides)
    overrides = dict(config.train_overrides)
    overrides.update(
        term_weights=weights, init_strategy=init, seed=cell_seed,
        augment=config.augment, arch=arch,
    )
    return pipeline.train_profile(config.profile, **overrides)


# -- results I/O --------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRecord:
    method: str
    target: str
    unlabeled_source: str
    n_way: int
    k_shot: int
    episode_id: int
    accuracy: float
    seed: int
    config_fingerprint: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ConfigError(f"accuracy {self.accuracy} outside [0, 1]")


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(RECORDS_HEADER + "\n")
        for r in records:
            fh.write(
                f"{r.method},{r.target},{r.unlabeled_source},{r.n_way},{r.k_shot},"
                f"{r.episode_id},{r.accuracy!r},{r.seed}\n"
            )


def read_records(path) -> list[ResultRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RECORDS_HEADER.split(","):
            raise ReportError(f"{path}: unexpected records header {reader.fieldnames}")
        for row in reader:
            records.append(ResultRecord(
                method=row["method"],
                target=row["target"],
                unlabeled_source=row["unlabeled_source"],
                n_way=int(row["n_way"]),
                k_shot=int(row["k_shot"]),
                episode_id=int(row["episode_id"]),
                accuracy=float(row["accuracy"]),
                seed=int(row["seed"]),
            ))
    return records


@dataclass
class RunResult:
    out_dir: str
    records_path: str
    summary_path: str
    summaries: list[dict] = field(default_factory=list)
    ami: dict = field(default_factory=dict)
    sweep: list[dict] = field(default_factory=list)
    sweep_spearman: float | None = None
    failures: list[dict] = field(default_factory=list)


def spearman_rank_correlation(xs, ys) -> float:
    """Spearman rho with average ranks for ties."""
    def ranks(values):
        arr = np.asarray(values, dtype=np.float64)
        order = np.argsort(arr, kind="stable")
        r = np.empty(arr.size)
        i = 0
        while i < arr.size:
            j = i
            while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
                j += 1
            r[order[i : j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        return r
    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)


# -- the runner ---------------------------------------------------------------------


def run_experiment(config: ExperimentConfig, progress=None) -> RunResult:
    """Execute the full grid and write the output directory tree."""
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    for sub in ("teacher", "students", "results"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    say = progress or (lambda msg: None)
    fingerprint = config.fingerprint()

    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"config_sha256 = {fingerprint}\n")
        fh.write(f"seed = {config.seed}\n")
        fh.write(f"profile = {config.profile}\n")

    base, base_dirs = _build_base(config)
    say(f"training teacher on '{base.domain_tag}' ({base.n} examples)")
    teacher_cfg = pipeline.train_profile(
        config.profile,
        seed=derive_seed(config.seed, "teacher"),
        arch=models.ArchConfig(input_dim=base.input_dim, class_count=base.class_count,
                               **config.arch_overrides),
        **config.train_overrides,
    )
    teacher = pipeline.train_teacher(
        base, teacher_cfg, log_path=os.path.join(out, "teacher", "train_log.csv")
    )
    models.save_bundle(teacher, os.path.join(out, "teacher", "teacher.json"))

    targets: dict[str, datagen.Dataset] = {}
    unlabeled: dict[str, datagen.Dataset] = {}
    pools: dict[str, datagen.Dataset] = {}
    ami_rows: list[tuple[str, float]] = []
    for dom in config.targets:
        tgt = _build_target(config, dom, base_dirs)
        targets[dom.name] = tgt
        unl, pool = datagen.split_unlabeled(
            tgt, config.unlabeled_fraction, derive_seed(config.seed, "split", dom.name)
        )
        unlabeled[dom.name], pools[dom.name] = unl, pool
        try:
            ami = analysis.adjusted_mutual_information(
                analysis.induced_grouping(teacher, tgt), analysis.truth_partition(tgt)
            )
            ami_rows.append((dom.name, ami))
        except EngineError:
            pass
    with open(os.path.join(out, "results", "ami.csv"), "w", encoding="utf-8") as fh:
        fh.write("target,ami\n")
        for name, value in ami_rows:
            fh.write(f"{name},{value!r}\n")

    # grid cells: (method, target, unlabeled_source)
    cells: list[tuple[str, str, str]] = []
    for method in config.methods:
        for dom in config.targets:
            cells.append((method, dom.name, dom.name))
    for tname, source in config.pairings:
        cells.append(("startup", tname, source))

    soft_sets: dict[str, pipeline.SoftLabeledSet] = {}

    def soft_for(name: str) -> pipeline.SoftLabeledSet:
        if name not in soft_sets:
            soft_sets[name] = pipeline.pseudo_label(
                teacher, unlabeled[name], temperature=teacher_cfg.soft_label_temperature
            )
        return soft_sets[name]

    records: list[ResultRecord] = []
    summaries: list[dict] = []
    failures: list[dict] = []
    episode_hashes: dict[tuple[str, int, int], list[str]] = {}
    result_summaries: dict[tuple[str, str, str, int], fewshot.ResultSummary] = {}

    for method, tname, source in cells:
        cell_tag = f"{method}@{tname}" + ("" if source == tname else f"<{source}")
        try:
            if method == "transfer":
                bundle = teacher
            else:
                cell_seed = derive_seed(config.seed, "student", method, tname, source)
                cfg = _train_config_for(
                    config, method, cell_seed, base.input_dim, base.class_count
                )
                weights = cfg.term_weights
                say(f"training student for {cell_tag}")
                stem = f"{tname}__{method}" + ("" if source == tname else f"__src_{source}")
                bundle = pipeline.train_student(
                    base if weights[0] != 0.0 else None,
                    soft_for(source) if weights[1] != 0.0 else None,
                    unlabeled[source],
                    teacher,
                    cfg,
                    log_path=os.path.join(out, "students", stem + ".train_log.csv"),
                )
                models.save_bundle(bundle, os.path.join(out, "students", stem + ".json"))
            for k in config.eval.k_shots:
                protocol = fewshot.EvalProtocol(
                    n_way=config.eval.n_way,
                    k_shot=k,
                    query_per_class=config.eval.query_per_class,
                    n_episodes=config.eval.n_episodes,
                    base_seed=derive_seed(config.seed, "eval", tname, k),
                )
                say(f"evaluating {cell_tag} at k={k}")
                summary = fewshot.run_evaluation(
                    bundle, pools[tname], protocol, method_tag=method
                )
                result_summaries[(method, tname, source, k)] = summary
                key = (tname, protocol.n_way, k)
                if key not in episode_hashes:
                    episode_hashes[key] = [
                        fewshot.sample_episode(
                            pools[tname], protocol.n_way, k, protocol.query_per_class,
                            fewshot.episode_seed_for(protocol.base_seed, i),
                        ).content_hash()
                        for i in range(protocol.n_episodes)
                    ]
                for i, acc in enumerate(summary.per_episode_accuracy):
                    records.append(ResultRecord(
                        method=method, target=tname, unlabeled_source=source,
                        n_way=protocol.n_way, k_shot=k, episode_id=i,
                        accuracy=acc, seed=config.seed, config_fingerprint=fingerprint,
                    ))
                summaries.append({
                    "method": method, "target": tname, "unlabeled_source": source,
                    "n_way": protocol.n_way, "k_shot": k,
                    "n_episodes": summary.n_episodes, "mean": summary.mean,
                    "ci_half_width": summary.ci_half_width,
                })
        except EngineError as exc:
            failures.append({"cell": cell_tag, "error": f"{type(exc).__name__}: {exc}"})

    records_path = os.path.join(out, "results", "records.csv")
    write_records(records_path, records)
    with open(os.path.join(out, "results", "episodes.csv"), "w", encoding="utf-8") as fh:
        fh.write("target,n_way,k_shot,episode_id,content_hash\n")
        for (tname, n_way, k), hashes in episode_hashes.items():
            for i, h in enumerate(hashes):
                fh.write(f"{tname},{n_way},{k},{i},{h}\n")
    if failures:
        with open(os.path.join(out, "results", "failures.csv"), "w", encoding="utf-8") as fh:
            fh.write("cell,error\n")
            for f in failures:
                fh.write(f"{f['cell']},\"{f['error']}\"\n")

    result = RunResult(
        out_dir=out,
        records_path=records_path,
        summary_path=os.path.join(out, "results", "summary.txt"),
        summaries=summaries,
        ami=dict(ami_rows),
        failures=failures,
    )

    if config.sweep is not None:
        say("running unlabeled-amount sweep")
        result.sweep, result.sweep_spearman = _run_sweep(
            config, base, targets[config.sweep.target], teacher, teacher_cfg, out
        )

    emit_report(os.path.join(out, "results"))
    return result


def _run_sweep(config: ExperimentConfig, base: datagen.Dataset, tgt: datagen.Dataset,
               teacher: models.ModelBundle, teacher_cfg: pipeline.TrainConfig,
               out: str) -> tuple[list[dict], float]:
    sweep = config.sweep
    dom = next(t for t in config.targets if t.name == sweep.target)
    sweep_dir = os.path.join(out, "sweep")
    os.makedirs(sweep_dir, exist_ok=True)
    rows: list[dict] = []
    sweep_records: list[tuple[float, ResultRecord]] = []
    for fraction in sweep.fractions:
        unl, pool = datagen.split_for_sweep(
            tgt, sweep.eval_fraction, fraction, derive_seed(config.seed, "sweep_split", dom.name)
        )
        cell_seed = derive_seed(config.seed, "sweep_student", dom.name, repr(float(fraction)))
        cfg = _train_config_for(config, "startup", cell_seed, base.input_dim, base.class_count)
        soft = pipeline.pseudo_label(teacher, unl, temperature=teacher_cfg.soft_label_temperature)
        student = pipeline.train_student(base, soft, unl, teacher, cfg)
        protocol = fewshot.EvalProtocol(
            n_way=config.eval.n_way, k_shot=sweep.k_shot,
            query_per_class=config.eval.query_per_class,
            n_episodes=config.eval.n_episodes,
            base_seed=derive_seed(config.seed, "sweep_eval", dom.name, sweep.k_shot),
        )
        summary = fewshot.run_evaluation(student, pool, protocol, method_tag="startup")
        rows.append({
            "fraction": fraction, "unlabeled_count": unl.n, "mean": summary.mean,
            "ci_half_width": summary.ci_half_width, "n_episodes": summary.n_episodes,
        })
        for i, acc in enumerate(summary.per_episode_accuracy):
            sweep_records.append((fraction, ResultRecord(
                method="startup", target=dom.name, unlabeled_source=dom.name,
                n_way=protocol.n_way, k_shot=sweep.k_shot, episode_id=i,
                accuracy=acc, seed=config.seed,
            )))
    rho = spearman_rank_correlation(
        [r["fraction"] for r in rows], [r["mean"] for r in rows]
    )
    with open(os.path.join(sweep_dir, "sweep_records.csv"), "w", encoding="utf-8") as fh:
        fh.write("fraction," + RECORDS_HEADER + "\n")
        for fraction, r in sweep_records:
            fh.write(
                f"{fraction!r},{r.method},{r.target},{r.unlabeled_source},{r.n_way},"
                f"{r.k_shot},{r.episode_id},{r.accuracy!r},{r.seed}\n"
            )
    with open(os.path.join(sweep_dir, "sweep_summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("fraction,unlabeled_count,mean,ci_half_width,n_episodes\n")
        for r in rows:
            fh.write(
                f"{r['fraction']!r},{r['unlabeled_count']},{r['mean']!r},"
                f"{r['ci_half_width']!r},{r['n_episodes']}\n"
            )
        fh.write(f"# spearman_rho = {rho!r}\n")
    return rows, rho


# -- reporting ----------------------------------------------------------------------


def _summary_from_records(group: list[ResultRecord]) -> fewshot.ResultSummary:
    ordered = sorted(group, key=lambda r: r.episode_id)
    fingerprint = f"records:{ordered[0].target}:{ordered[0].n_way}:{ordered[0].k_shot}:{len(ordered)}"
    return fewshot.summarize_accuracies(
        [r.accuracy for r in ordered], ordered[0].method, fingerprint
    )


def _method_label(method: str, target: str, source: str) -> str:
    return method if source == target else f"{method}[unlabeled={source}]"


def emit_report(results_dir) -> dict:
    """Build summary.txt / summary.csv / pairwise.csv from records.csv."""
    records_path = os.path.join(results_dir, "records.csv")
    if not os.path.exists(records_path):
        raise ReportError(f"{results_dir}: no records.csv to report on")
    records = read_records(records_path)
    if not records:
        raise ReportError(f"{records_path}: records file is empty")

    groups: dict[tuple, list[ResultRecord]] = {}
    for r in records:
        groups.setdefault((r.target, r.n_way, r.k_shot, r.method, r.unlabeled_source), []).append(r)

    tables: dict[tuple, list[tuple]] = {}
    for (target, n_way, k, method, source), group in groups.items():
        tables.setdefault((target, n_way, k), []).append(
            (_method_label(method, target, source), _summary_from_records(group))
        )

    summary_rows: list[dict] = []
    pairwise_rows: list[dict] = []
    text_blocks: list[str] = []
    for (target, n_way, k) in tables:
        entries = tables[(target, n_way, k)]
        best_label, best_summary = max(entries, key=lambda e: e[1].mean)
        bold = {best_label}
        for label, summary in entries:
            if label == best_label:
                continue
            outcome = fewshot.compare(best_summary, summary)
            pairwise_rows.append({
                "target": target, "n_way": n_way, "k_shot": k,
                "method_a": best_label, "method_b": label,
                "t_statistic": outcome.t_statistic, "p_value": outcome.p_value,
                "significant": outcome.significant_at_0_05,
            })
            if not outcome.significant_at_0_05:
                bold.add(label)
        lines = [f"== {target}: {n_way}-way {k}-shot =="]
        width = max(len(label) for label, _ in entries)
        for label, summary in entries:
            marker = " *" if label in bold else ""
            lines.append(
                f"{label.ljust(width)}  {summary.mean:.4f} +- {summary.ci_half_width:.4f}"
                f" (n={summary.n_episodes}){marker}"
            )
            summary_rows.append({
                "target": target, "n_way": n_way, "k_shot": k, "method": label,
                "mean": summary.mean, "ci_half_width": summary.ci_half_width,
                "n_episodes": summary.n_episodes, "bold": label in bold,
            })
        text_blocks.append("\n".join(lines))

    summary_text = "\n\n".join(text_blocks) + "\n"
    with open(os.path.join(results_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary_text)
    with open(os.path.join(results_dir, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("target,n_way,k_shot,method,mean,ci_half_width,n_episodes,bold\n")
        for row in summary_rows:
            fh.write(
                f"{row['target']},{row['n_way']},{row['k_shot']},{row['method']},"
                f"{row['mean']!r},{row['ci_half_width']!r},{row['n_episodes']},{row['bold']}\n"
            )
    with open(os.path.join(results_dir, "pairwise.csv"), "w", encoding="utf-8") as fh:
        fh.write("target,n_way,k_shot,method_a,method_b,t_statistic,p_value,significant\n")
        for row in pairwise_rows:
            fh.write(
                f"{row['target']},{row['n_way']},{row['k_shot']},{row['method_a']},"
                f"{row['method_b']},{row['t_statistic']!r},{row['p_value']!r},{row['significant']}\n"
            )
    return {
        "summary_text": summary_text,
        "summary_rows": summary_rows,
        "pairwise_rows": pairwise_rows,
    }
