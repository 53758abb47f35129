"""Feature pruning by average sensitivity."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, AttackSpec, evaluate_attack
from .data import Dataset
from .nn import DenseLayer, Network, forward
from .sensitivity import SensitivityMatrix, build_sensitivity_matrix, rank_neurons_global


class Basis(str, enum.Enum):
    MOST_SENSITIVE_FIRST = "most_sensitive_first"
    LEAST_SENSITIVE_FIRST = "least_sensitive_first"


@dataclass(frozen=True)
class PruneMask:
    keep: np.ndarray  # bool [feature_count], False = pruned
    pruned_fraction: float
    basis: Basis

    def __and__(self, other: "PruneMask") -> "PruneMask":
        keep = self.keep & other.keep
        return PruneMask(keep, 1.0 - keep.mean(), self.basis)


def build_mask(matrix: SensitivityMatrix, fraction: float, basis: Basis) -> PruneMask:
    """Mask the floor(fraction * F) features at one end of the mean-|delta| ranking.

    Most sensitive means lowest mean |delta|; unreachable (+inf) features rank last.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    basis = Basis(basis)
    order = rank_neurons_global(matrix)
    if basis is Basis.LEAST_SENSITIVE_FIRST:
        order = order[::-1]
    n_prune = int(np.floor(fraction * len(order) + 1e-9))
    keep = np.ones(int(matrix.neurons.max()) + 1, dtype=bool)
    keep[order[:n_prune]] = False
    return PruneMask(keep, fraction, basis)


def apply_mask(net: Network, mask: PruneMask) -> Network:
    """Zero the incoming weights and bias of pruned features, forcing them to 0."""
    keep = np.asarray(mask.keep, dtype=bool)
    if keep.shape != (net.feature_count,):
        raise ValueError(f"mask length {keep.size} != feature count {net.feature_count}")
    idx = len(net.layers) - 2
    layer = net.layers[idx]
    w = layer.weights * keep[None, :]
    b = layer.bias * keep
    return net.replace_layer(idx, DenseLayer(w, b, layer.activation))


def accuracy(net: Network, ds: Dataset) -> float:
    return float(np.mean(forward(net, ds.inputs).predicted_class == ds.labels))


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    basis: Basis
    clean_acc: float
    pgd_success_rate: float
    seeds: int


def prune_sweep(
    net: Network,
    dataset: Dataset,
    fractions,
    basis,
    attack_cfg: AttackConfig | None,
    matrix: SensitivityMatrix | None = None,
    rank_set: Dataset | None = None,
    workers: int = 1,
) -> list[SweepRow]:
    """Accuracy and PGD success on ``dataset`` after pruning each fraction.

    The ranking comes from ``matrix`` or is built on ``rank_set`` (the
    training inputs, typically). ``basis`` may be one basis or a sequence.
    PGD success is over correctly classified seeds of the pruned network.
    """
    if matrix is None:
        matrix = build_sensitivity_matrix(net, rank_set if rank_set is not None else dataset, workers=workers)
    bases = [Basis(basis)] if isinstance(basis, (str, Basis)) else [Basis(b) for b in basis]
    rows = []
    for b in bases:
        for frac in fractions:
            pruned = apply_mask(net, build_mask(matrix, frac, b))
            acc = accuracy(pruned, dataset)
            rate, seeds = float("nan"), 0
            if attack_cfg is not None:
                rep = evaluate_attack(pruned, dataset, AttackSpec("pgd"), attack_cfg, workers=workers)
                rate, seeds = rep.rate_over_correct.get("pgd", 0.0), rep.n_correct
            rows.append(SweepRow(float(frac), b, acc, rate, seeds))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "basis", "clean_acc", "pgd_success_rate", "seeds"])
        for r in rows:
            w.writerow([repr(r.fraction), r.basis.value, repr(r.clean_acc), repr(r.pgd_success_rate), r.seeds])
