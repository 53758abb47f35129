"""Neuron sensitivities of logits-layer features.

The sensitivity of feature ``i`` at input ``x`` is the smallest-magnitude
shift of that feature's output that changes the predicted class. At the
logits layer the logits move linearly with the shift, so the boundary with
each alternative class has a closed form; a bracketing/bisection search on
the perturbed network serves as an independent check.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, EmptyDatasetError
from .nn import DenseLayer, ForwardTrace, Network, forward, forward_perturbed

DENOMINATOR_TOL = 1e-12
STD_TOL = 1e-8
CHUNK_SIZE = 256


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class SensitivityRecord:
    input_id: int
    neuron: int
    per_class_delta: dict
    min_delta: float
    min_target: int  # -1 when no class is reachable


def delta_table(logits: np.ndarray, weights: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Signed boundary shifts for every (row, feature, class).

    ``logits`` is [n, C], ``weights`` the [F, C] logits-layer matrix. Entry
    [r, j, c] is the shift of feature j that ties class c with the label of
    row r; +inf where the weight rows do not separate the two classes, NaN
    on the label column itself.
    """
    n = logits.shape[0]
    rows = np.arange(n)
    margin = logits[rows, labels][:, None] - logits  # [n, C]
    denom = weights[None, :, :] - weights[:, labels].T[:, :, None]  # [n, F, C]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = margin[:, None, :] / denom
    out[np.abs(denom) <= DENOMINATOR_TOL] = np.inf
    out[rows, :, labels] = np.nan
    return out


def _reduce_min(table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mag = np.abs(table)
    mag = np.where(np.isnan(mag), np.inf, mag)
    target = np.argmin(mag, axis=-1)
    best = np.take_along_axis(table, target[..., None], axis=-1)[..., 0]
    unreachable = ~np.isfinite(np.take_along_axis(mag, target[..., None], axis=-1)[..., 0])
    best = np.where(unreachable, np.inf, best)
    target = np.where(unreachable, -1, target)
    return best, target


def delta_closed_form(trace: ForwardTrace, logits_layer: DenseLayer, y: int, y_hat: int, neuron: int) -> float:
    """Shift of feature ``neuron`` that ties logit ``y_hat`` with logit ``y``."""
    if y == y_hat:
        raise ValueError("target class must differ from the current class")
    if trace.predicted_class != y:
        raise ValueError("sensitivity is defined relative to the current prediction")
    w = logits_layer.weights
    denom = w[neuron, y_hat] - w[neuron, y]
    if abs(denom) <= DENOMINATOR_TOL:
        return np.inf
    l = trace.logits
    return float((l[y] - l[y_hat]) / denom)


def delta_min(trace: ForwardTrace, logits_layer: DenseLayer, y: int, neuron: int) -> tuple[float, int]:
    """Smallest-magnitude boundary shift over all other classes, and its class.

    Returns ``(inf, -1)`` when no class can be reached.
    """
    if trace.predicted_class != y:
        raise ValueError("sensitivity is defined relative to the current prediction")
    table = delta_table(trace.logits[None, :], logits_layer.weights[neuron : neuron + 1], np.array([y]))
    best, target = _reduce_min(table)
    return float(best[0, 0]), int(target[0, 0])


def delta_oracle(net: Network, x, neuron: int, bound: float, start: float = 1e-6, tol: float = 1e-9):
    """Smallest-magnitude shift in [-bound, bound] that flips the prediction.

    Scans each direction on a doubling grid, then bisects the bracketing
    interval. Returns ``None`` when neither direction flips within ``bound``.
    """
    if bound <= 0:
        raise ValueError("bound must be positive")
    base = forward(net, x).predicted_class

    def flips(d):
        return forward_perturbed(net, x, neuron, d).predicted_class != base

    best = None
    for sign in (-1.0, 1.0):
        lo, hi = 0.0, None
        step = start
        while True:
            probe = min(step, bound)
            if flips(sign * probe):
                hi = probe
                break
            lo = probe
            if probe >= bound:
                break
            step *= 2.0
        if hi is None:
            continue
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if flips(sign * mid):
                hi = mid
            else:
                lo = mid
        if best is None or hi < abs(best):
            best = sign * hi
    return best


@dataclass
class SensitivityMatrix:
    """Sensitivity records over a grid of (correctly classified input, neuron).

    Arrays are indexed [row, neuron position]; ``input_ids`` maps rows back to
    dataset indices.
    """

    input_ids: np.ndarray
    labels: np.ndarray
    neurons: np.ndarray
    min_delta: np.ndarray
    min_target: np.ndarray
    per_class: np.ndarray  # [rows, neurons, C]
    _row_of: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._row_of = {int(i): r for r, i in enumerate(self.input_ids)}

    def __len__(self) -> int:
        return len(self.input_ids)

    def row(self, input_id: int) -> int:
        try:
            return self._row_of[int(input_id)]
        except KeyError:
            raise KeyError(f"input {input_id} is not in the sensitivity matrix") from None

    def record(self, input_id: int, neuron: int) -> SensitivityRecord:
        r = self.row(input_id)
        c = int(np.flatnonzero(self.neurons == neuron)[0])
        y = int(self.labels[r])
        per_class = {k: float(v) for k, v in enumerate(self.per_class[r, c]) if k != y}
        return SensitivityRecord(int(input_id), int(neuron), per_class, float(self.min_delta[r, c]), int(self.min_target[r, c]))

    def records(self):
        for iid in self.input_ids:
            for n in self.neurons:
                yield self.record(iid, n)

    def mean_abs_delta(self) -> np.ndarray:
        """Per-neuron mean |delta| over inputs (inf if any input is unreachable)."""
        return np.mean(np.abs(self.min_delta), axis=0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["input_id", "neuron", "min_delta", "min_target", "per_class_delta"])
            for r, iid in enumerate(self.input_ids):
                y = int(self.labels[r])
                for c, n in enumerate(self.neurons):
                    per = {str(k): _fmt(v) for k, v in enumerate(self.per_class[r, c]) if k != y}
                    w.writerow([int(iid), int(n), _fmt(self.min_delta[r, c]), int(self.min_target[r, c]), json.dumps(per)])


def _fmt(v) -> str:
    return repr(float(v))


def _matrix_chunk(net: Network, x: np.ndarray, y: np.ndarray, neurons: np.ndarray):
    logits = forward(net, x).logits
    table = delta_table(logits, net.logits_layer.weights[neurons], y)
    best, target = _reduce_min(table)
    return table, best, target


def build_sensitivity_matrix(
    net: Network, dataset: Dataset, neurons: Sequence[int] | None = None, workers: int = 1
) -> SensitivityMatrix:
    """Records for every correctly classified input and every requested neuron.

    Work is split into fixed-size chunks, so the result does not depend on
    ``workers``.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("dataset is empty")
    neurons = np.arange(net.feature_count) if neurons is None else np.asarray(neurons, dtype=np.int64)
    pred = forward(net, dataset.inputs).predicted_class
    keep = np.flatnonzero(pred == dataset.labels)
    if keep.size == 0:
        raise EmptyDatasetError("no correctly classified inputs")
    x, y = dataset.inputs[keep], dataset.labels[keep]

    spans = [(s, min(s + CHUNK_SIZE, keep.size)) for s in range(0, keep.size, CHUNK_SIZE)]

    def job(span):
        s, e = span
        return _matrix_chunk(net, x[s:e], y[s:e], neurons)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, spans))
    else:
        parts = [job(sp) for sp in spans]
    table = np.concatenate([p[0] for p in parts])
    best = np.concatenate([p[1] for p in parts])
    target = np.concatenate([p[2] for p in parts])
    return SensitivityMatrix(keep, y, neurons, best, target, table)


def _order_by_magnitude(values: np.ndarray, ids: np.ndarray) -> list[int]:
    mag = np.abs(values)
    # lexsort: last key is primary; inf sorts last naturally, ties by neuron id.
    order = np.lexsort((ids, mag))
    return [int(ids[i]) for i in order]


def rank_neurons_for_input(matrix: SensitivityMatrix, input_id: int) -> list[int]:
    """Neurons in order of increasing |delta| for one input."""
    r = matrix.row(input_id)
    return _order_by_magnitude(matrix.min_delta[r], matrix.neurons)


def rank_neurons_global(matrix: SensitivityMatrix) -> list[int]:
    """Neurons in order of increasing mean |delta| over all inputs."""
    return _order_by_magnitude(matrix.mean_abs_delta(), matrix.neurons)


def feature_stats(net: Network, dataset: Dataset) -> FeatureStats:
    """Population mean and standard deviation of each feature (two passes)."""
    z = forward(net, dataset.inputs).features
    mean = z.sum(axis=0) / z.shape[0]
    std = np.sqrt(((z - mean) ** 2).sum(axis=0) / z.shape[0])
    return FeatureStats(mean, std, z.shape[0])


@dataclass
class DistributionTable:
    entity_id: np.ndarray
    neuron: np.ndarray
    value: np.ndarray
    scaled_value: np.ndarray
    metadata: dict

    def __len__(self) -> int:
        return len(self.value)

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["entity_id", "neuron", "value", "scaled_value"])
            for row in zip(self.entity_id, self.neuron, self.value, self.scaled_value):
                w.writerow([int(row[0]), int(row[1]), _fmt(row[2]), _fmt(row[3])])
        meta_path = path.with_name(path.stem + ".meta.json")
        meta_path.write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")


def scaled_abs_delta(matrix: SensitivityMatrix, stats: FeatureStats) -> np.ndarray:
    """|delta| divided by the neuron's feature std; NaN for (near-)constant features."""
    std = stats.std[matrix.neurons]
    dead = std <= STD_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.abs(matrix.min_delta) / np.where(dead, 1.0, std)
    scaled[:, dead] = np.nan
    return scaled


def median_scaled_delta(matrix: SensitivityMatrix, stats: FeatureStats) -> float:
    s = scaled_abs_delta(matrix, stats)
    s = s[np.isfinite(s)]
    return float(np.median(s)) if s.size else float("nan")


def export_delta_distribution(matrix: SensitivityMatrix, stats: FeatureStats) -> DistributionTable:
    scaled = scaled_abs_delta(matrix, stats)
    ids = np.repeat(matrix.input_ids, len(matrix.neurons))
    neurons = np.tile(matrix.neurons, len(matrix.input_ids))
    meta = {
        "quantity": "abs_min_delta",
        "scaling": "abs(delta) / population std of the neuron's feature activation",
        "scaling_note": "standardisation chosen by this package; features with std <= 1e-8 are reported as NaN",
        "weight": "uniform, 1 per row",
        "stats_sample_count": int(stats.sample_count),
    }
    return DistributionTable(ids, neurons, np.abs(matrix.min_delta).ravel(), scaled.ravel(), meta)


def export_activation_distribution(net: Network, dataset: Dataset) -> DistributionTable:
    """Feature activations min-max scaled over the whole table.

    A degenerate range (all activations equal) scales to all zeros.
    """
    z = forward(net, dataset.inputs).features
    lo, hi = float(z.min()), float(z.max())
    scaled = np.zeros_like(z) if hi <= lo else (z - lo) / (hi - lo)
    n, f = z.shape
    meta = {
        "quantity": "feature_activation",
        "scaling": "global min-max over all (input, neuron) activations",
        "min": lo,
        "max": hi,
        "weight": "uniform, 1 per row",
    }
    return DistributionTable(np.repeat(np.arange(n), f), np.tile(np.arange(f), n), z.ravel(), scaled.ravel(), meta)
