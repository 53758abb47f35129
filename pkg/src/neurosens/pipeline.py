"""Experiment specs and the pipelines behind the command line.

Every random choice in a run derives from the spec's root seed through named
streams, so a spec plus its seed fixes every numeric output byte. Worker
counts only change how work is scheduled.
"""
from __future__ import annotations

import dataclasses
import datetime as _dt
import enum
import hashlib
import json
import math
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import dacite
import numba
import numpy as np
import yaml

from . import __version__
from .attacks import AttackConfig, AttackSpec, evaluate_attack
from .data import Dataset, EmptyDatasetError, load_idx, synth_blobs, train_test_split
from .nn import Network, forward, init_network, load_network, save_network
from .pruning import Basis, prune_sweep, write_sweep_csv
from .sensitivity import (
    build_sensitivity_matrix,
    export_activation_distribution,
    export_delta_distribution,
    feature_stats,
    median_scaled_delta,
)
from .streams import derive_seed
from .training import RegMode, RegularizerConfig, TrainConfig, train_adversarial, train_sensitivity, train_standard

PIPELINES = ("train", "attack", "sensitivity", "prune", "figure", "table")
MODEL_KINDS = ("standard", "adversarial", "sensitivity")
SEED_STREAMS = ("data.synth", "data.split", "nn_core.init", "training", "attacks")


class ConfigError(ValueError):
    """The experiment spec is malformed or refers to missing files."""


# -- spec ------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | idx
    class_count: int = 10
    per_class: int = 500
    dim: int = 32
    separation: float = 4.0
    noise: float = 1.0
    test_fraction: float = 0.2
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    eval_limit: int | None = None  # evaluate on the first n test inputs

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "idx" and not (self.train_images and self.train_labels):
            raise ValueError("idx data needs train_images and train_labels")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.eval_limit is not None and self.eval_limit < 1:
            raise ValueError("eval_limit must be positive")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)  # last entry is the feature width
    checkpoint: str | None = None  # load instead of training

    def __post_init__(self):
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden widths must be positive and non-empty")


@dataclass(frozen=True)
class TrainingSection:
    kind: str = "standard"  # standard | adversarial | sensitivity
    config: TrainConfig = field(default_factory=TrainConfig)
    regularizer: RegularizerConfig = field(
        default_factory=lambda: RegularizerConfig(mode=RegMode.PROPOSED))

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass(frozen=True)
class AttackSection:
    spec: AttackSpec = field(default_factory=AttackSpec)
    config: AttackConfig = field(default_factory=AttackConfig)


@dataclass(frozen=True)
class SensitivitySection:
    split: str = "test"  # inputs the matrix is built on

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError("sensitivity split must be 'train' or 'test'")


@dataclass(frozen=True)
class PruneSection:
    fractions: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.5)
    bases: tuple[Basis, ...] = (Basis.MOST_SENSITIVE_FIRST, Basis.LEAST_SENSITIVE_FIRST)
    attack: AttackConfig | None = None


@dataclass(frozen=True)
class FigureSection:
    name: str = "fig2"  # fig1 | fig2 | fig3
    models: tuple[str, ...] = ("standard", "sensitivity")  # fig1 and fig3
    attack: AttackConfig = field(default_factory=AttackConfig)  # fig2 rank curve

    def __post_init__(self):
        if self.name not in ("fig1", "fig2", "fig3"):
            raise ValueError(f"unknown figure {self.name!r}")
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad:
            raise ValueError(f"unknown model kinds {bad}")


@dataclass(frozen=True)
class TableSection:
    name: str = "t1"
    ks: tuple[int, ...] = (1, 4, 8, 16)
    models: tuple[str, ...] = MODEL_KINDS
    l2: AttackConfig = field(default_factory=lambda: AttackConfig(norm="l2", epsilon=0.5))
    linf: AttackConfig = field(default_factory=lambda: AttackConfig(norm="linf", epsilon=0.03))

    def __post_init__(self):
        if self.name != "t1":
            raise ValueError(f"unknown table {self.name!r}")
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad:
            raise ValueError(f"unknown model kinds {bad}")


@dataclass(frozen=True)
class ExperimentSpec:
    pipeline: str
    seed: int
    output_dir: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    attack: AttackSection = field(default_factory=AttackSection)
    sensitivity: SensitivitySection = field(default_factory=SensitivitySection)
    prune: PruneSection = field(default_factory=PruneSection)
    figure: FigureSection = field(default_factory=FigureSection)
    table: TableSection = field(default_factory=TableSection)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}; expected one of {PIPELINES}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


_DACITE = dacite.Config(strict=True, cast=[tuple, enum.Enum], type_hooks={float: float})


def _reject_nested_seeds(tree, path=()):
    if isinstance(tree, dict):
        for key, value in tree.items():
            here = path + (str(key),)
            if key == "seed" and path:
                raise ConfigError(f"{'.'.join(here)}: nested seeds are derived from the root seed; remove this key")
            _reject_nested_seeds(value, here)


def spec_from_dict(tree: dict, seed: int | None = None, output_dir: str | None = None) -> ExperimentSpec:
    """Build a spec from a plain tree; ``seed``/``output_dir`` override the tree."""
    if not isinstance(tree, dict):
        raise ConfigError("config must be a mapping at the top level")
    tree = dict(tree)
    _reject_nested_seeds(tree)
    if seed is not None:
        tree["seed"] = seed
    if output_dir is not None:
        tree["output_dir"] = output_dir
    if "seed" not in tree:
        raise ConfigError("seed is mandatory (config key 'seed' or --seed)")
    try:
        spec = dacite.from_dict(ExperimentSpec, tree, config=_DACITE)
    except dacite.UnexpectedDataError as exc:
        raise ConfigError(f"unknown config keys: {sorted(exc.keys)}") from None
    except dacite.DaciteError as exc:
        raise ConfigError(str(exc)) from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    _check_files(spec)
    return spec


def load_spec(path, seed: int | None = None, output_dir: str | None = None) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return spec_from_dict(tree or {}, seed, output_dir)


def _check_files(spec: ExperimentSpec) -> None:
    d = spec.data
    refs = [d.train_images, d.train_labels, d.test_images, d.test_labels, spec.model.checkpoint]
    missing = [r for r in refs if r is not None and not Path(r).is_file()]
    if missing:
        raise ConfigError(f"referenced files do not exist: {missing}")


def spec_to_dict(spec: ExperimentSpec) -> dict:
    return _plain(dataclasses.asdict(spec))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def config_hash(spec: ExperimentSpec) -> str:
    """sha256 of the canonical spec, ignoring where outputs go."""
    tree = spec_to_dict(spec)
    tree.pop("output_dir")
    return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()


def seeds_for(spec: ExperimentSpec) -> dict:
    return {"root": spec.seed, **{name: derive_seed(spec.seed, name) for name in SEED_STREAMS}}


# -- stages ----------------------------------------------------------------------

def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def load_data(spec: ExperimentSpec) -> tuple[Dataset, Dataset]:
    """(train, evaluation) datasets for a spec."""
    d = spec.data
    seeds = seeds_for(spec)
    if d.source == "synthetic":
        full = synth_blobs(d.class_count, d.per_class, d.dim, d.separation, seeds["data.synth"], noise=d.noise)
    else:
        full = load_idx(d.train_images, d.train_labels, d.class_count)
    if len(full) == 0:
        raise EmptyDatasetError("dataset is empty; nothing to train or evaluate")
    if d.source == "idx" and d.test_images:
        train, test = full, load_idx(d.test_images, d.test_labels, d.class_count)
    else:
        train, test = train_test_split(full, d.test_fraction, seeds["data.split"])
    if len(train) == 0 or len(test) == 0:
        raise EmptyDatasetError("train or test split is empty")
    if d.eval_limit is not None:
        test = test.subset(np.arange(min(d.eval_limit, len(test))))
    return train, test


def _attack_cfg(spec: ExperimentSpec, cfg: AttackConfig, stream: str = "attacks") -> AttackConfig:
    return replace(cfg, seed=derive_seed(spec.seed, stream))


def train_model(spec: ExperimentSpec, kind: str, train: Dataset, test: Dataset):
    """Initialise and train one model kind; returns (net, log). Seeds are shared across kinds."""
    seeds = seeds_for(spec)
    widths = [train.dim, *spec.model.hidden, train.class_count]
    net0 = init_network(widths, seeds["nn_core.init"])
    sec = spec.training
    cfg = replace(sec.config, seed=seeds["training"])
    if kind == "standard":
        return train_standard(net0, train, cfg, eval_set=test)
    if kind == "adversarial":
        adv = sec.config.adversarial or AttackConfig(epsilon=0.03, steps=10)
        return train_adversarial(net0, train, replace(cfg, adversarial=adv), eval_set=test)
    return train_sensitivity(net0, train, cfg, sec.regularizer, eval_set=test)


class _Run:
    """Output directory bookkeeping for one pipeline run."""

    def __init__(self, spec: ExperimentSpec, out: Path, workers: int):
        self.spec, self.out, self.workers = spec, out, workers
        self.outputs: list[str] = []
        self.summary: dict = {}

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def model(self, kind: str, train: Dataset, test: Dataset, suffix: str = "") -> Network:
        if self.spec.model.checkpoint is not None:
            return load_network(self.spec.model.checkpoint)
        net, log = train_model(self.spec, kind, train, test)
        save_network(net, self.path(f"model{suffix}.npz"))
        log.to_csv(self.path(f"train_log{suffix}.csv"))
        if log.alarm is not None:
            self.summary.setdefault("alarms", {})[kind] = log.alarm
        return net


def _accuracy(net: Network, ds: Dataset) -> float:
    return float(np.mean(forward(net, ds.inputs).predicted_class == ds.labels))


def _pipeline_train(run: _Run, train: Dataset, test: Dataset) -> None:
    kind = run.spec.training.kind
    net = run.model(kind, train, test)
    write_json(run.path("metrics.json"), {"kind": kind, "train_acc": _accuracy(net, train),
                                          "test_acc": _accuracy(net, test)})


def _pipeline_attack(run: _Run, train: Dataset, test: Dataset) -> None:
    net = run.model(run.spec.training.kind, train, test)
    sec = run.spec.attack
    report = evaluate_attack(net, test, sec.spec, _attack_cfg(run.spec, sec.config), workers=run.workers)
    report.to_json(run.path("attack_report.json"))
    if sec.spec.kind == "rank_curve":
        report.rank_curve_csv(run.path("rank_curve.csv"))


def _pipeline_sensitivity(run: _Run, train: Dataset, test: Dataset) -> None:
    net = run.model(run.spec.training.kind, train, test)
    ds = train if run.spec.sensitivity.split == "train" else test
    matrix = build_sensitivity_matrix(net, ds, workers=run.workers)
    stats = feature_stats(net, ds)
    matrix.to_csv(run.path("sensitivity.csv"))
    export_delta_distribution(matrix, stats).to_csv(run.path("delta_distribution.csv"))
    run.outputs.append("delta_distribution.meta.json")
    export_activation_distribution(net, ds).to_csv(run.path("activation_distribution.csv"))
    run.outputs.append("activation_distribution.meta.json")
    write_json(run.path("sensitivity_summary.json"),
               {"rows": len(matrix), "median_scaled_delta": median_scaled_delta(matrix, stats)})


def _pipeline_prune(run: _Run, train: Dataset, test: Dataset) -> None:
    net = run.model(run.spec.training.kind, train, test)
    sec = run.spec.prune
    cfg = None if sec.attack is None else _attack_cfg(run.spec, sec.attack)
    matrix = build_sensitivity_matrix(net, train, workers=run.workers)
    rows = prune_sweep(net, test, sec.fractions, sec.bases, cfg, matrix=matrix, workers=run.workers)
    write_sweep_csv(rows, run.path("prune_sweep.csv"))


def _zero_fraction(net: Network, ds: Dataset) -> float:
    return float(np.mean(forward(net, ds.inputs).features == 0.0))


def _pipeline_figure(run: _Run, train: Dataset, test: Dataset) -> None:
    sec = run.spec.figure
    if sec.name == "fig2":
        net = run.model("standard", train, test)
        report = evaluate_attack(net, test, AttackSpec("rank_curve"), _attack_cfg(run.spec, sec.attack),
                                 workers=run.workers)
        report.rank_curve_csv(run.path("fig2_rank_curve.csv"))
        return
    summary = {}
    for kind in sec.models:
        net = run.model(kind, train, test, suffix=f"_{kind}")
        if sec.name == "fig1":
            matrix = build_sensitivity_matrix(net, test, workers=run.workers)
            stats = feature_stats(net, test)
            export_delta_distribution(matrix, stats).to_csv(run.path(f"fig1_{kind}.csv"))
            run.outputs.append(f"fig1_{kind}.meta.json")
            summary[kind] = {"median_scaled_delta": median_scaled_delta(matrix, stats),
                             "clean_acc": _accuracy(net, test)}
            if run.spec.attack.spec.kind == "kns":
                rep = evaluate_attack(net, test, run.spec.attack.spec, _attack_cfg(run.spec, run.spec.attack.config),
                                      matrix=matrix, workers=run.workers)
                summary[kind]["kns_success"] = rep.rate_over_correct
        else:
            export_activation_distribution(net, test).to_csv(run.path(f"fig3_{kind}.csv"))
            run.outputs.append(f"fig3_{kind}.meta.json")
            summary[kind] = {"zero_activation_fraction": _zero_fraction(net, test)}
    write_json(run.path(f"{sec.name}_summary.json"), summary)


def _pipeline_table(run: _Run, train: Dataset, test: Dataset) -> None:
    sec = run.spec.table
    rows = []
    for kind in sec.models:
        net = run.model(kind, train, test, suffix=f"_{kind}")
        row = {"model": kind, "clean_acc": _accuracy(net, test)}
        matrix = build_sensitivity_matrix(net, test, workers=run.workers)
        for norm, cfg in (("l2", sec.l2), ("linf", sec.linf)):
            acfg = _attack_cfg(run.spec, cfg, f"attacks.{norm}")
            pgd = evaluate_attack(net, test, AttackSpec("pgd"), acfg, workers=run.workers)
            kns = evaluate_attack(net, test, AttackSpec("kns", ks=sec.ks), acfg, matrix=matrix, workers=run.workers)
            row[norm] = {"epsilon": cfg.epsilon, "PGD": pgd.rate_over_correct["pgd"],
                         **{k: v for k, v in kns.rate_over_correct.items()}}
        rows.append(row)
    columns = ["PGD", *[f"{k}-NS" for k in sec.ks]]
    write_json(run.path("table1.json"), {"columns": columns, "norms": ["l2", "linf"], "rows": rows,
                                         "rate": "success rate over correctly classified test inputs"})


_STAGES = {
    "train": _pipeline_train,
    "attack": _pipeline_attack,
    "sensitivity": _pipeline_sensitivity,
    "prune": _pipeline_prune,
    "figure": _pipeline_figure,
    "table": _pipeline_table,
}


def versions() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "numba": numba.__version__,
            "pyyaml": yaml.__version__, "neurosens": __version__}


def run_pipeline(spec: ExperimentSpec, workers: int = 1) -> dict:
    """Run the spec's pipeline; returns the manifest (also written to manifest.json)."""
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    started = _dt.datetime.now(_dt.timezone.utc)
    t0 = time.perf_counter()
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_data(spec)  # aborts on empty data before any training
    run = _Run(spec, out, workers)
    _STAGES[spec.pipeline](run, train, test)
    if run.summary:
        write_json(run.path("alarms.json"), run.summary)
    files = {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in sorted(run.outputs)}
    manifest = {
        "pipeline": spec.pipeline,
        "config_hash": config_hash(spec),
        "config": spec_to_dict(spec),
        "seeds": seeds_for(spec),
        "versions": versions(),
        "outputs": files,
        "wall_clock": {"started": started.isoformat(), "seconds": time.perf_counter() - t0},
    }
    write_json(out / "manifest.json", manifest)
    return manifest
