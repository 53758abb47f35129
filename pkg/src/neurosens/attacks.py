"""PGD and neuron-sensitivity attacks, plus dataset-level evaluation.

A single-neuron attack freezes the logit vector obtained by shifting one
feature by its sensitivity and then searches input space for a point whose
logits match it. The k-NS attack runs that search independently on the
k most sensitive neurons of an input and succeeds if any run does.

All attack loops work on batches of independent rows. Every row owns its
random stream, keyed by (seed, input id, neuron, restart), so outcomes do not
depend on how rows are scheduled across workers.
"""
from __future__ import annotations

import csv
import enum
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .nn import ForwardTrace, Network, backward_custom, forward, forward_perturbed, softmax
from .sensitivity import SensitivityMatrix, build_sensitivity_matrix, delta_min, rank_neurons_for_input
from .streams import rng_for

CHUNK_ROWS = 512
NO_NEURON = -1


class Norm(str, enum.Enum):
    L2 = "l2"
    LINF = "linf"


class Mode(str, enum.Enum):
    PROJECTED = "projected"
    LAGRANGIAN = "lagrangian"


@dataclass(frozen=True)
class AttackConfig:
    norm: Norm = Norm.LINF
    epsilon: float = 0.1
    steps: int = 100
    step_size: float | None = None
    restarts: int = 1
    lagrange_coefficient: float = 0.0
    mode: Mode = Mode.PROJECTED
    seed: int = 0
    backtracking: bool = True

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm(self.norm))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.steps < 0 or self.restarts < 1:
            raise ValueError("steps must be >= 0 and restarts >= 1")
        if self.mode is Mode.LAGRANGIAN and self.lagrange_coefficient <= 0:
            raise ValueError("Lagrangian mode needs a positive lagrange_coefficient")

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.mode is Mode.LAGRANGIAN:
            return 0.05
        return self.epsilon / 4 if self.norm is Norm.LINF else self.epsilon / 10


@dataclass(frozen=True)
class AttackResult:
    success: bool
    adversarial_input: np.ndarray
    perturbation_norm_l2: float
    perturbation_norm_linf: float
    target_neuron: int | None
    iterations_used: int
    final_objective: float
    status: str = "ok"
    objective_history: tuple = ()

    def norm(self, which: Norm) -> float:
        return self.perturbation_norm_l2 if Norm(which) is Norm.L2 else self.perturbation_norm_linf


# -- geometry ----------------------------------------------------------------

def _project(x, x0, cfg: AttackConfig, bounds):
    d = x - x0
    if cfg.norm is Norm.LINF:
        d = np.clip(d, -cfg.epsilon, cfg.epsilon)
    else:
        n = np.linalg.norm(d, axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(n > cfg.epsilon, cfg.epsilon / n, 1.0)
        d = d * factor
    return np.clip(x0 + d, bounds[0], bounds[1])


def _random_start(rng: np.random.Generator, x0: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.epsilon == 0:
        return x0.copy()
    dim = x0.shape[-1]
    if cfg.norm is Norm.LINF:
        return x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=dim)
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)
    return x0 + u * cfg.epsilon * rng.uniform() ** (1.0 / dim)


def _step(direction, cfg: AttackConfig, size):
    if cfg.norm is Norm.LINF:
        return size * np.sign(direction)
    n = np.linalg.norm(direction, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(n > 0, size * direction / n, 0.0)


def _norm_subgradient(d, norm: Norm):
    if norm is Norm.L2:
        n = np.linalg.norm(d, axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(n > 0, d / n, 0.0)
    g = np.zeros_like(d)
    rows = np.arange(d.shape[0])
    j = np.argmax(np.abs(d), axis=1)
    g[rows, j] = np.sign(d[rows, j])
    return g


def _norms(d):
    return np.linalg.norm(d, axis=1), np.max(np.abs(d), axis=1, initial=0.0)


# -- objectives ----------------------------------------------------------------

def _objective(logits, labels, targets):
    """Cross-entropy (to maximise) when ``targets`` is None, else logit distance."""
    if targets is None:
        m = logits.max(axis=1)
        lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        return lse - logits[np.arange(len(labels)), labels]
    return np.linalg.norm(logits - targets, axis=1)


def _objective_seed(logits, labels, targets):
    """Gradient of the objective w.r.t. the logits."""
    if targets is None:
        seed = softmax(logits)
        seed[np.arange(len(labels)), labels] -= 1.0
        return seed
    diff = logits - targets
    n = np.linalg.norm(diff, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(n > 0, diff / n, 0.0)


# -- batched engine ------------------------------------------------------------

@dataclass
class _Rows:
    x: np.ndarray
    success: np.ndarray
    iters: np.ndarray
    objective: np.ndarray
    history: list


def _take(tr: ForwardTrace, keep) -> ForwardTrace:
    return ForwardTrace(tr.inputs[keep], tuple(a[keep] for a in tr.per_layer_pre),
                        tuple(a[keep] for a in tr.per_layer_post))


def _projected(net, x0, start, labels, targets, cfg: AttackConfig, bounds, early_stop: bool) -> _Rows:
    n = len(labels)
    ascend = targets is None
    x = start.copy()
    success = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    obj = np.full(n, np.nan)
    alive = np.arange(n)
    alpha = cfg.effective_step_size
    for step in range(cfg.steps + 1):
        if alive.size == 0:
            break
        tr = forward(net, x[alive])
        logits = tr.logits
        t = None if ascend else targets[alive]
        obj[alive] = _objective(logits, labels[alive], t)
        flipped = np.argmax(logits, axis=1) != labels[alive]
        success[alive[flipped]] = True
        if early_stop and flipped.any():
            keep = ~flipped
            alive, logits, t = alive[keep], logits[keep], None if ascend else t[keep]
            tr = _take(tr, keep)
        if step == cfg.steps or alive.size == 0:
            break
        seed = _objective_seed(logits, labels[alive], t)
        g = backward_custom(net, tr, seed).input_gradient
        direction = g if ascend else -g
        x[alive] = _project(x[alive] + _step(direction, cfg, alpha), x0[alive], cfg, bounds)
        iters[alive] = step + 1
    return _Rows(x, success, iters, obj, [[] for _ in range(n)])


def _lagrangian(net, x0, start, labels, targets, cfg: AttackConfig, bounds, early_stop: bool) -> _Rows:
    n = len(labels)
    lam = cfg.lagrange_coefficient
    x = start.copy()
    eta = np.full(n, cfg.effective_step_size)
    success = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)

    def value(xs, rows):
        logits = forward(net, xs).logits
        d = xs - x0[rows]
        pen = np.linalg.norm(d, axis=1) if cfg.norm is Norm.L2 else np.max(np.abs(d), axis=1)
        return _objective(logits, labels[rows], targets[rows]) + lam * pen, np.argmax(logits, axis=1) != labels[rows]

    all_rows = np.arange(n)
    obj, flipped = value(x, all_rows)
    history = [[float(v)] for v in obj]
    success[flipped] = True
    alive = all_rows[~flipped] if early_stop else all_rows
    for step in range(cfg.steps):
        if alive.size == 0:
            break
        tr = forward(net, x[alive])
        seed = _objective_seed(tr.logits, labels[alive], targets[alive])
        g = backward_custom(net, tr, seed).input_gradient
        g = g + lam * _norm_subgradient(x[alive] - x0[alive], cfg.norm)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        moving = gn[:, 0] > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(gn > 0, g / gn, 0.0)
        cand = np.clip(x[alive] - eta[alive, None] * d, bounds[0], bounds[1])
        c_obj, c_flip = value(cand, alive)
        accept = moving & ((c_obj <= obj[alive]) if cfg.backtracking else True)
        acc_rows = alive[accept]
        x[acc_rows] = cand[accept]
        obj[acc_rows] = c_obj[accept]
        for r, v in zip(acc_rows, c_obj[accept]):
            history[r].append(float(v))
        eta[alive[~accept]] *= 0.5
        iters[alive] = step + 1
        new_succ = accept & c_flip
        success[alive[new_succ]] = True
        keep = moving & ~(new_succ if early_stop else False)
        alive = alive[keep]
    return _Rows(x, success, iters, obj, history)


def _run_rows(
    net: Network,
    x0: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray | None,
    keys: Sequence[tuple[int, int]],
    cfg: AttackConfig,
    bounds,
    stream: str,
    early_stop: bool = True,
) -> _Rows:
    """Run every restart for a batch of rows; keys are (input id, neuron) per row."""
    n = len(labels)
    maximise = targets is None
    best = _Rows(x0.copy(), np.zeros(n, dtype=bool), np.zeros(n, dtype=np.int64),
                 np.full(n, -np.inf if maximise else np.inf), [[] for _ in range(n)])
    pending = np.arange(n)
    engine = _lagrangian if cfg.mode is Mode.LAGRANGIAN else _projected
    for restart in range(cfg.restarts):
        if pending.size == 0:
            break
        start = np.stack([
            _random_start(rng_for(cfg.seed, stream, keys[r][0], keys[r][1] + 1, restart), x0[r], cfg)
            for r in pending
        ])
        start = _project(start, x0[pending], cfg, bounds) if cfg.mode is Mode.PROJECTED else np.clip(start, *bounds)
        res = engine(net, x0[pending], start, labels[pending],
                     None if maximise else targets[pending], cfg, bounds, early_stop)
        best.iters[pending] += res.iters
        better = res.success | ((res.objective > best.objective[pending]) if maximise
                                else (res.objective < best.objective[pending]))
        upd = pending[better]
        best.x[upd] = res.x[better]
        best.objective[upd] = res.objective[better]
        best.success[upd] = res.success[better]
        for i, r in enumerate(pending):
            if better[i]:
                best.history[r] = res.history[i]
        pending = pending[~res.success] if early_stop else pending
    return best


def _results(net, x0, labels, rows: _Rows, neurons) -> list[AttackResult]:
    out = []
    l2, linf = _norms(rows.x - x0)
    for r in range(len(labels)):
        success = bool(rows.success[r])
        status = "ok"
        if success and forward(net, rows.x[r]).predicted_class == labels[r]:
            success, status = False, "unverified"
        neuron = None if neurons[r] == NO_NEURON else int(neurons[r])
        out.append(AttackResult(success, rows.x[r].copy(), float(l2[r]), float(linf[r]), neuron,
                                int(rows.iters[r]), float(rows.objective[r]), status, tuple(rows.history[r])))
    return out


def _unreachable(x, neuron) -> AttackResult:
    return AttackResult(False, np.array(x, dtype=np.float64), 0.0, 0.0, int(neuron), 0, float("inf"),
                        "unreachable_target")


def pgd_attack_batch(net, xs, ys, cfg: AttackConfig, bounds=(0.0, 1.0), input_ids=None) -> list[AttackResult]:
    if cfg.mode is not Mode.PROJECTED:
        raise ValueError("PGD runs in projected mode")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    ids = range(len(ys)) if input_ids is None else input_ids
    keys = [(int(i), NO_NEURON) for i in ids]
    rows = _run_rows(net, xs, ys, None, keys, cfg, bounds, "attacks.pgd")
    return _results(net, xs, ys, rows, [NO_NEURON] * len(ys))


def pgd_attack(net: Network, x, y: int, cfg: AttackConfig, bounds=(0.0, 1.0), input_id: int = 0) -> AttackResult:
    """Untargeted PGD on the cross-entropy loss; returns the first successful restart."""
    return pgd_attack_batch(net, np.asarray(x)[None, :], [y], cfg, bounds, [input_id])[0]


def neuron_target(net: Network, x, y: int, neuron: int) -> tuple[np.ndarray | None, float]:
    """Frozen logit target for a single-neuron attack, or None if unreachable."""
    tr = forward(net, x)
    if tr.predicted_class != y:
        raise ValueError("seed is already misclassified; sensitivity is undefined")
    delta, _ = delta_min(tr, net.logits_layer, y, neuron)
    if not np.isfinite(delta):
        return None, delta
    return forward_perturbed(net, x, neuron, delta).logits, delta


def neuron_attack_batch(net, xs, ys, neurons, cfg: AttackConfig, bounds=(0.0, 1.0), input_ids=None,
                        targets=None) -> list[AttackResult]:
    """Single-neuron attacks, one (input, neuron) pair per row."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    neurons = np.asarray(neurons, dtype=np.int64).reshape(-1)
    ids = list(range(len(ys))) if input_ids is None else list(input_ids)
    if targets is None:
        targets = np.stack([_target_or_nan(net, xs[r], ys[r], neurons[r]) for r in range(len(ys))])
    reachable = np.all(np.isfinite(targets), axis=1)
    out: list[AttackResult | None] = [None] * len(ys)
    idx = np.flatnonzero(reachable)
    if idx.size:
        keys = [(ids[r], int(neurons[r])) for r in idx]
        rows = _run_rows(net, xs[idx], ys[idx], targets[idx], keys, cfg, bounds, "attacks.neuron")
        for r, res in zip(idx, _results(net, xs[idx], ys[idx], rows, neurons[idx])):
            out[r] = res
    for r in np.flatnonzero(~reachable):
        out[r] = _unreachable(xs[r], neurons[r])
    return out


def _target_or_nan(net, x, y, neuron):
    t, _ = neuron_target(net, x, y, neuron)
    return np.full(net.class_count, np.nan) if t is None else t


def single_neuron_attack(net: Network, x, y: int, neuron: int, cfg: AttackConfig, bounds=(0.0, 1.0),
                         input_id: int = 0) -> AttackResult:
    """Drive the logits of ``x`` toward those produced by shifting ``neuron`` by its sensitivity."""
    return neuron_attack_batch(net, np.asarray(x)[None, :], [y], [neuron], cfg, bounds, [input_id])[0]


def _pick_kns(results: Sequence[AttackResult], norm: Norm) -> AttackResult:
    wins = [(r.norm(norm), rank, r) for rank, r in enumerate(results) if r.success]
    if not wins:
        return results[0]
    return min(wins, key=lambda t: (t[0], t[1]))[2]


def k_ns_attack(net: Network, x, y: int, k: int, matrix: SensitivityMatrix, cfg: AttackConfig,
                input_id: int, bounds=(0.0, 1.0)) -> AttackResult:
    """Independent single-neuron attacks on the top-k neurons of ``input_id``.

    Each sub-attack is exactly ``single_neuron_attack``; the winner is the
    successful run with the smallest perturbation (ties: best rank).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ranking = rank_neurons_for_input(matrix, input_id)
    clamped = k > len(ranking)
    if clamped:
        warnings.warn(f"k={k} exceeds the {len(ranking)} ranked neurons; clamping", stacklevel=2)
    subs = [single_neuron_attack(net, x, y, n, cfg, bounds, input_id) for n in ranking[:k]]
    best = _pick_kns(subs, cfg.norm)
    return replace(best, status="k_clamped") if clamped and best.status == "ok" else best


# -- evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class AttackSpec:
    """What to evaluate: ``pgd``, ``kns`` (for each k in ``ks``) or ``rank_curve``."""

    kind: str = "pgd"
    ks: tuple[int, ...] = (1, 4, 8, 16)
    ranks: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("pgd", "kns", "rank_curve"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if self.ranks is not None:
            object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))


@dataclass
class EvaluationReport:
    attack: str
    config: dict
    n_seeds: int
    n_correct: int
    vacuous: bool
    successes: dict = field(default_factory=dict)
    rate_over_correct: dict = field(default_factory=dict)
    rate_over_all: dict = field(default_factory=dict)
    per_seed: list = field(default_factory=list)
    rank_curve: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def rank_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "success_rate", "denominator"])
            for row in self.rank_curve:
                w.writerow([row["rank"], repr(float(row["success_rate"])), row["denominator"]])


def _chunked(items: list, fn, workers: int):
    chunks = [items[s:s + CHUNK_ROWS] for s in range(0, len(items), CHUNK_ROWS)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return [r for part in parts for r in part]


def _config_echo(cfg: AttackConfig) -> dict:
    d = asdict(cfg)
    d["norm"], d["mode"] = cfg.norm.value, cfg.mode.value
    d["effective_step_size"] = cfg.effective_step_size
    return d


def _rate(num: int, den: int) -> float:
    return num / den if den else 0.0


def evaluate_attack(
    net: Network,
    dataset: Dataset,
    spec: AttackSpec,
    cfg: AttackConfig,
    matrix: SensitivityMatrix | None = None,
    workers: int = 1,
) -> EvaluationReport:
    """Success rates of an attack over a dataset.

    Only correctly classified seeds are attacked. ``rate_over_correct`` divides
    by those seeds; ``rate_over_all`` divides by every seed and counts
    misclassified seeds as trivially fooled.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    bounds = dataset.input_range
    pred = forward(net, dataset.inputs).predicted_class
    correct = np.flatnonzero(pred == dataset.labels)
    n_all, n_ok = len(dataset), int(correct.size)
    n_wrong = n_all - n_ok
    report = EvaluationReport(spec.kind, _config_echo(cfg), n_all, n_ok, n_ok == 0)
    report.metadata = {
        "target_space": "logits (pre-softmax)",
        "seed_policy": "correctly classified seeds are attacked; misclassified count as fooled in rate_over_all",
    }
    if n_ok == 0:
        return report
    xs, ys = dataset.inputs, dataset.labels

    if spec.kind == "pgd":
        def job(chunk):
            return pgd_attack_batch(net, xs[chunk], ys[chunk], cfg, bounds, chunk)

        results = _chunked([int(i) for i in correct], job, workers)
        wins = sum(r.success for r in results)
        report.successes["pgd"] = wins
        report.rate_over_correct["pgd"] = _rate(wins, n_ok)
        report.rate_over_all["pgd"] = _rate(wins + n_wrong, n_all)
        report.per_seed = [
            {"input_id": int(i), "success": bool(r.success), "l2": r.perturbation_norm_l2,
             "linf": r.perturbation_norm_linf, "iterations": r.iterations_used}
            for i, r in zip(correct, results)
        ]
        return report

    if matrix is None:
        matrix = build_sensitivity_matrix(net, dataset, workers=workers)
    rankings = {int(i): rank_neurons_for_input(matrix, int(i)) for i in correct}
    n_feat = len(matrix.neurons)
    if spec.kind == "kns":
        positions = list(range(min(max(spec.ks), n_feat)))
    else:
        positions = list(spec.ranks) if spec.ranks is not None else list(range(n_feat))
        if any(p < 0 or p >= n_feat for p in positions):
            raise ValueError("rank position outside the neuron range")
    # Seed-major order: each chunk holds whole seeds, independent of ``workers``.
    items = [(int(i), p, rankings[int(i)][p]) for i in correct for p in positions]

    def job(chunk):
        ids = [c[0] for c in chunk]
        return neuron_attack_batch(net, xs[ids], ys[ids], [c[2] for c in chunk], cfg, bounds, ids)

    results = _chunked(items, job, workers)
    outcome = {(i, p): r for (i, p, _), r in zip(items, results)}

    if spec.kind == "kns":
        report.metadata["k_reduction"] = "k-NS success = any success among the top-k ranked single-neuron attacks"
        for k in spec.ks:
            kk = min(k, n_feat)
            name = f"{k}-NS"
            wins = sum(any(outcome[(int(i), p)].success for p in range(kk)) for i in correct)
            report.successes[name] = wins
            report.rate_over_correct[name] = _rate(wins, n_ok)
            report.rate_over_all[name] = _rate(wins + n_wrong, n_all)
        report.per_seed = [
            {"input_id": int(i), "ranked_neurons": rankings[int(i)][: len(positions)],
             "success_by_rank": [bool(outcome[(int(i), p)].success) for p in positions]}
            for i in correct
        ]
    else:
        for p in positions:
            wins = sum(outcome[(int(i), p)].success for i in correct)
            report.rank_curve.append({"rank": p, "success_rate": _rate(wins, n_ok), "denominator": n_ok})
        report.per_seed = [
            {"input_id": int(i), "success_by_rank": [bool(outcome[(int(i), p)].success) for p in positions]}
            for i in correct
        ]
    return report
