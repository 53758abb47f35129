"""Standard, adversarial, and sensitivity-regularised training loops.

Two penalties act on the logits layer. The vanilla one penalises, for each
wrong class, the largest standardised sensitivity over features; it is only
usable under a logit-norm alarm because the network can satisfy it by
inflating its logits. The proposed one sums, over the top-k features, the
spread of each feature's class weights (term 1) and the feature's relative
contribution to the gap between the true and runner-up logits (term 2).
"""
from __future__ import annotations

import csv
import enum
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .attacks import NO_NEURON, AttackConfig, _run_rows
from .data import Dataset, EmptyDatasetError
from .nn import (
    AdamHyperparams,
    AdamState,
    DenseLayer,
    ForwardTrace,
    GradientBundle,
    Network,
    adam_step,
    backward,
    backward_custom,
    cross_entropy_loss,
    forward,
    sgd_step,
    softmax,
)
from .sensitivity import STD_TOL, FeatureStats, build_sensitivity_matrix, delta_table, feature_stats, median_scaled_delta
from .streams import derive_seed, rng_for

SUM_TOL = 1e-12


class RegMode(str, enum.Enum):
    NONE = "none"
    VANILLA = "vanilla"
    PROPOSED = "proposed"


class StatsSource(str, enum.Enum):
    RUNNING_BATCH = "running_batch"
    PRECOMPUTED = "precomputed_dataset"


@dataclass(frozen=True)
class RegularizerConfig:
    mode: RegMode = RegMode.NONE
    lambda1: float = 1.0
    lambda2: float = 1.0
    top_k: int | None = None  # None: max(1, feature_count // 8)
    stats_source: StatsSource = StatsSource.RUNNING_BATCH
    stats_momentum: float = 0.9
    contrast: str = "runner_up"  # or "all": average over every wrong class

    def __post_init__(self):
        object.__setattr__(self, "mode", RegMode(self.mode))
        object.__setattr__(self, "stats_source", StatsSource(self.stats_source))
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regulariser weights must be non-negative")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.contrast not in ("runner_up", "all"):
            raise ValueError("contrast must be 'runner_up' or 'all'")

    def k_for(self, feature_count: int) -> int:
        k = max(1, feature_count // 8) if self.top_k is None else self.top_k
        if k > feature_count:
            raise ValueError(f"top_k={k} exceeds feature count {feature_count}")
        return k


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lr_schedule: str = "constant"  # constant | cosine | step
    lr_step_every: int = 10
    lr_gamma: float = 0.5
    optimizer: str = "adam"  # adam | sgd
    adversarial: AttackConfig | None = None
    seed: int = 0
    logit_norm_alarm_threshold: float | None = 10.0
    alarm_warmup_epochs: int = 0  # baseline taken after this many epochs (0 = untrained net)
    alarm_floor: float = 1.0  # smallest baseline mean |logit|
    track_delta: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.logit_norm_alarm_threshold is not None and self.logit_norm_alarm_threshold <= 0:
            raise ValueError("alarm threshold must be positive")
        if self.alarm_warmup_epochs < 0 or self.alarm_floor < 0:
            raise ValueError("alarm warmup and floor must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine", "step"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1 + math.cos(math.pi * epoch / max(1, self.epochs)))
        if self.lr_schedule == "step":
            return self.lr * self.lr_gamma ** (epoch // self.lr_step_every)
        return self.lr


LOG_COLUMNS = ("epoch", "task_loss", "reg1", "reg2", "acc", "mean_abs_logit", "median_scaled_delta", "seconds")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    alarm: dict | None = None
    halted: bool = False

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epochs must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path, include_timing: bool = True) -> None:
        cols = LOG_COLUMNS if include_timing else LOG_COLUMNS[:-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in cols[1:]])


# -- regularisers ----------------------------------------------------------------

def _as_batch(trace: ForwardTrace, y):
    z = np.atleast_2d(trace.features)
    logits = np.atleast_2d(trace.logits)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return z, logits, y


def _vanilla_terms(z, logits, W, y, mean, std, std_tol=STD_TOL):
    """Value and gradients (w.r.t. logits and W) of the vanilla term, batch mean."""
    n, C = logits.shape
    table = delta_table(logits, W, y)  # [n, F, C]
    live = std > std_tol
    safe_std = np.where(live, std, 1.0)
    u = (table - mean[None, :, None]) / safe_std[None, :, None]
    score = np.abs(u)
    valid = np.isfinite(table) & live[None, :, None]
    score = np.where(valid, score, -np.inf)
    jstar = np.argmax(score, axis=1)  # [n, C]
    best = np.take_along_axis(score, jstar[:, None, :], axis=1)[:, 0, :]
    wrong = np.ones((n, C), dtype=bool)
    wrong[np.arange(n), y] = False
    has = wrong & np.isfinite(best)
    if not has.any():
        warnings.warn("vanilla penalty: every feature excluded; penalty is 0", stacklevel=3)
    scale = 1.0 / (n * (C - 1))
    value = scale * float(np.sum(np.where(has, best, 0.0)))

    dlogits = np.zeros_like(logits)
    dW = np.zeros_like(W)
    ii, cc = np.nonzero(has)
    jj = jstar[ii, cc]
    yy = y[ii]
    uu = u[ii, jj, cc]
    dd = table[ii, jj, cc]
    den = W[jj, cc] - W[jj, yy]
    s = scale * np.sign(uu) / safe_std[jj] / den
    np.add.at(dlogits, (ii, yy), s)
    np.add.at(dlogits, (ii, cc), -s)
    np.add.at(dW, (jj, cc), -s * dd)
    np.add.at(dW, (jj, yy), s * dd)
    return value, dlogits, dW


def regularizer_vanilla(trace: ForwardTrace, logits_layer: DenseLayer, y, stats: FeatureStats) -> float:
    """Mean over wrong classes of the largest |standardised sensitivity| (batch mean)."""
    z, logits, y = _as_batch(trace, y)
    value = _vanilla_terms(z, logits, logits_layer.weights, y, stats.mean, stats.std)[0]
    return value


def _term1(W, y, k, lam=1.0):
    """Weight-spread term averaged over the batch labels; returns (value, dW)."""
    return _kernels.weight_spread(np.ascontiguousarray(W), y, k, float(lam))


def _term2(z, logits, W, y, k, contrast, lam=1.0):
    """Relative-contribution term averaged over rows; returns (value, dz, dW, skipped)."""
    return _kernels.relative_contribution(
        np.ascontiguousarray(z), np.ascontiguousarray(logits), np.ascontiguousarray(W), y, k, float(lam),
        contrast == "all", SUM_TOL)


def regularizer_proposed(trace: ForwardTrace, logits_layer: DenseLayer, y, cfg: RegularizerConfig) -> tuple[float, float]:
    """Weighted (term1, term2) of the proposed penalty, averaged over a batch."""
    z, logits, y = _as_batch(trace, y)
    W = logits_layer.weights
    k = cfg.k_for(W.shape[0])
    t1 = cfg.lambda1 * _term1(W, y, k)[0] if cfg.lambda1 else 0.0
    t2 = 0.0
    if cfg.lambda2:
        raw, _, _, skipped = _term2(z, logits, W, y, k, cfg.contrast)
        if skipped:
            warnings.warn(f"{skipped} sample(s) with zero feature sum skipped in term 2", stacklevel=2)
        t2 = cfg.lambda2 * raw
    return t1, t2


def penalty_terms(trace: ForwardTrace, y, W: np.ndarray, regcfg: RegularizerConfig,
                  stats: FeatureStats | None = None):
    """Weighted (term1, term2) and their gradients for a batch trace.

    Gradients come as seeds at the logits and features plus a direct
    gradient for the logits-layer weights, so callers can fold them into
    the same backward pass as the task loss.

    The vanilla term enters with a negative sign: it rewards standardized
    sensitivities far from their feature's typical activation, which is the
    direction that raises the smallest delta. Its (t1) is reported signed.
    Statistics are treated as constants.
    """
    z, logits, yb = _as_batch(trace, y)
    dl = dz = dW = None
    t1 = t2 = 0.0
    if regcfg.mode is RegMode.VANILLA and regcfg.lambda1:
        if stats is None:
            raise ValueError("the vanilla penalty needs feature statistics")
        v, g_l, g_W = _vanilla_terms(z, logits, W, yb, stats.mean, stats.std)
        lam = -regcfg.lambda1
        t1, dl, dW = lam * v, lam * g_l, lam * g_W
    elif regcfg.mode is RegMode.PROPOSED:
        k = regcfg.k_for(W.shape[0])
        if regcfg.lambda1:
            t1, dW = _term1(W, yb, k, regcfg.lambda1)
        if regcfg.lambda2:
            t2, dz, g2W, skipped = _term2(z, logits, W, yb, k, regcfg.contrast, regcfg.lambda2)
            if skipped:
                warnings.warn(f"{skipped} sample(s) with zero feature sum skipped in term 2", stacklevel=3)
            dW = g2W if dW is None else dW + g2W
    if trace.logits.ndim == 1:
        dl = None if dl is None else dl[0]
        dz = None if dz is None else dz[0]
    return t1, t2, dl, dz, dW


def _backward_with_direct(net: Network, trace: ForwardTrace, logit_seed, feature_seed, dW) -> GradientBundle:
    if logit_seed is None:
        logit_seed = np.zeros_like(trace.logits)
    bundle = backward_custom(net, trace, logit_seed, feature_seed)
    if dW is None:
        return bundle
    weights = list(bundle.weights)
    weights[-1] = weights[-1] + dW
    return GradientBundle(tuple(weights), bundle.biases, bundle.input_gradient)


def penalty_and_gradient(net: Network, trace: ForwardTrace, y, regcfg: RegularizerConfig,
                         stats: FeatureStats | None = None):
    """(term1, term2, GradientBundle) of the configured penalty."""
    t1, t2, dl, dz, dW = penalty_terms(trace, y, net.logits_layer.weights, regcfg, stats)
    return t1, t2, _backward_with_direct(net, trace, dl, dz, dW)


# -- training loops --------------------------------------------------------------

class LogitAlarm(RuntimeError):
    pass


def _ce_seed(logits, y):
    seed = softmax(logits)
    seed[np.arange(len(y)), y] -= 1.0
    return seed / len(y)


def _mean_abs_logit(net: Network, ds: Dataset) -> float:
    return float(np.mean(np.abs(forward(net, ds.inputs).logits)))


def _train(net: Network, dataset: Dataset, cfg: TrainConfig, regcfg: RegularizerConfig | None,
           eval_set: Dataset | None) -> tuple[Network, TrainLog]:
    if len(dataset) == 0:
        raise EmptyDatasetError("training dataset is empty")
    regcfg = regcfg or RegularizerConfig()
    if regcfg.mode is RegMode.VANILLA and cfg.logit_norm_alarm_threshold is None:
        raise ValueError("the vanilla penalty may only run with the logit-norm alarm enabled")
    use_reg = regcfg.mode is not RegMode.NONE and (regcfg.lambda1 or regcfg.lambda2)
    if use_reg and regcfg.mode is RegMode.PROPOSED:
        regcfg.k_for(net.feature_count)
    log = TrainLog()
    eval_set = eval_set if eval_set is not None else dataset
    adam = AdamState.zeros(net)
    x_all, y_all = dataset.inputs, dataset.labels
    running: FeatureStats | None = None
    baseline = None
    alarm_on = cfg.logit_norm_alarm_threshold is not None
    if alarm_on and cfg.alarm_warmup_epochs == 0:
        baseline = max(_mean_abs_logit(net, dataset), cfg.alarm_floor)

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        hp = AdamHyperparams(lr=lr)
        order = rng_for(cfg.seed, "training.shuffle", epoch).permutation(len(dataset))
        adv_cfg = None
        if cfg.adversarial is not None:
            adv_cfg = replace(cfg.adversarial, seed=derive_seed(cfg.seed, "training.adversarial", epoch))
        if use_reg and regcfg.mode is RegMode.VANILLA and regcfg.stats_source is StatsSource.PRECOMPUTED:
            running = feature_stats(net, dataset)
        sums = np.zeros(3)
        nb = 0
        t0 = time.perf_counter()
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if adv_cfg is not None:
                keys = [(int(i), NO_NEURON) for i in idx]
                xb = _run_rows(net, xb, yb, None, keys, adv_cfg, dataset.input_range, "training.adversarial",
                               early_stop=False).x
            tr = forward(net, xb)
            task = float(np.mean(cross_entropy_loss(tr.logits, yb)))
            t1 = t2 = 0.0
            if use_reg:
                if regcfg.mode is RegMode.VANILLA:
                    running = _update_stats(running, tr.features, regcfg)
                t1, t2, dl, dz, dW = penalty_terms(tr, yb, net.logits_layer.weights, regcfg, running)
                ce = _ce_seed(tr.logits, yb)
                dl = ce if dl is None else dl + ce
                grads = _backward_with_direct(net, tr, dl, dz, dW)
            else:
                grads = backward(net, tr, yb)
            if cfg.optimizer == "adam":
                net, adam = adam_step(net, grads, adam, hp)
            else:
                net = sgd_step(net, grads, lr)
            sums += (task, t1, t2)
            nb += 1
        seconds = time.perf_counter() - t0

        tr_all = forward(net, x_all)
        acc = float(np.mean(tr_all.predicted_class == y_all))
        mal = float(np.mean(np.abs(tr_all.logits)))
        med = float("nan")
        if cfg.track_delta:
            try:
                med = median_scaled_delta(build_sensitivity_matrix(net, eval_set), feature_stats(net, eval_set))
            except EmptyDatasetError:
                pass
        sums /= max(nb, 1)
        log.append({"epoch": epoch, "task_loss": sums[0], "reg1": sums[1], "reg2": sums[2], "acc": acc,
                    "mean_abs_logit": mal, "median_scaled_delta": med, "seconds": seconds})

        if alarm_on:
            if epoch + 1 == cfg.alarm_warmup_epochs:
                baseline = max(mal, cfg.alarm_floor)
            elif baseline is not None and mal >= cfg.logit_norm_alarm_threshold * baseline:
                log.alarm = {"epoch": epoch, "mean_abs_logit": mal, "baseline": baseline,
                             "ratio": mal / baseline}
                if regcfg.mode is RegMode.VANILLA:
                    log.halted = True
                    break
                warnings.warn(f"logit-norm alarm at epoch {epoch}: mean |logit| {mal:.3g} "
                              f"is {mal / baseline:.1f}x the baseline", stacklevel=2)
                baseline = None  # warn once
    return net, log


def _update_stats(running: FeatureStats | None, z: np.ndarray, regcfg: RegularizerConfig) -> FeatureStats:
    if regcfg.stats_source is StatsSource.PRECOMPUTED and running is not None:
        return running
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    if running is None:
        return FeatureStats(mean, std, z.shape[0])
    m = regcfg.stats_momentum
    return FeatureStats(m * running.mean + (1 - m) * mean, m * running.std + (1 - m) * std,
                        running.sample_count + z.shape[0])


def train_standard(net: Network, dataset: Dataset, cfg: TrainConfig, eval_set: Dataset | None = None):
    """Mini-batch cross-entropy training."""
    return _train(net, dataset, replace(cfg, adversarial=None), None, eval_set)


def train_adversarial(net: Network, dataset: Dataset, cfg: TrainConfig, eval_set: Dataset | None = None):
    """Cross-entropy training on PGD examples generated against the current network."""
    if cfg.adversarial is None:
        raise ValueError("adversarial training needs an inner attack config")
    return _train(net, dataset, cfg, None, eval_set)


def train_sensitivity(net: Network, dataset: Dataset, cfg: TrainConfig, regcfg: RegularizerConfig,
                      eval_set: Dataset | None = None):
    """Cross-entropy plus the configured sensitivity penalty."""
    return _train(net, dataset, replace(cfg, adversarial=None), regcfg, eval_set)
