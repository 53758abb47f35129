import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import linear_logits_net, random_net
from neurosens.data import Dataset, EmptyDatasetError
from neurosens.nn import DenseLayer, Network, forward, forward_perturbed
from neurosens.sensitivity import (
    FeatureStats,
    build_sensitivity_matrix,
    delta_closed_form,
    delta_min,
    delta_oracle,
    export_activation_distribution,
    export_delta_distribution,
    feature_stats,
    median_scaled_delta,
    rank_neurons_for_input,
    rank_neurons_global,
    scaled_abs_delta,
)

seeds = st.integers(0, 2**31 - 1)


def _dataset(x, y, classes, rng=(-1e6, 1e6)):
    return Dataset(np.asarray(x, float), np.asarray(y), classes, rng)


def _random_case(seed):
    """Random net and an input, with the label set to the net's prediction."""
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    x = rng.uniform(0, 1, size=net.input_dim)
    return net, x, forward(net, x).predicted_class


# --- closed form -----------------------------------------------------------

def test_identity_weights_example():
    net = linear_logits_net(np.eye(2))
    tr = forward(net, [2.0, 0.0])
    assert delta_closed_form(tr, net.logits_layer, 0, 1, 0) == -2.0


def test_equal_weight_rows_are_unreachable():
    net = linear_logits_net([[1.0, 1.0], [0.0, 1.0]])
    tr = forward(net, [2.0, 0.0])
    assert delta_closed_form(tr, net.logits_layer, 0, 1, 0) == np.inf
    assert delta_min(tr, net.logits_layer, 0, 0) == (np.inf, -1)


def test_closed_form_rejects_bad_classes():
    net = linear_logits_net(np.eye(2))
    tr = forward(net, [2.0, 0.0])
    with pytest.raises(ValueError):
        delta_closed_form(tr, net.logits_layer, 0, 0, 0)
    with pytest.raises(ValueError):
        delta_closed_form(tr, net.logits_layer, 1, 0, 0)
    with pytest.raises(ValueError):
        delta_min(tr, net.logits_layer, 1, 0)


def test_delta_min_example():
    net = linear_logits_net(np.eye(3))
    tr = forward(net, [3.0, 1.0, 0.0])
    assert delta_min(tr, net.logits_layer, 0, 0) == (-2.0, 1)


@given(seeds)
def test_plugging_delta_back_ties_the_logits(seed):
    net, x, y = _random_case(seed)
    tr = forward(net, x)
    for j in range(net.feature_count):
        for c in range(net.class_count):
            if c == y:
                continue
            d = delta_closed_form(tr, net.logits_layer, y, c, j)
            if not np.isfinite(d):
                continue
            l = forward_perturbed(net, x, j, d).logits
            assert abs(l[y] - l[c]) <= 1e-9 * max(1.0, abs(tr.logits[y]))


@given(seeds)
def test_delta_min_matches_bisection_oracle(seed):
    net, x, y = _random_case(seed)
    tr = forward(net, x)
    for j in range(net.feature_count):
        d, target = delta_min(tr, net.logits_layer, y, j)
        if not np.isfinite(d):
            assert target == -1
            assert delta_oracle(net, x, j, bound=1e6) is None
            continue
        found = delta_oracle(net, x, j, bound=2 * abs(d) + 1.0)
        assert found is not None
        assert abs(abs(found) - abs(d)) <= 1e-6 * max(1.0, abs(d))
        # Ties at the boundary go to the lower class, so the flip side can differ;
        # pushing slightly past d must land on the reported target class.
        past = forward_perturbed(net, x, j, d * (1 + 1e-7) + np.sign(d) * 1e-9).predicted_class
        assert past == target


def test_oracle_examples():
    net = linear_logits_net(np.eye(2))
    assert delta_oracle(net, [2.0, 0.0], 0, bound=10.0) == pytest.approx(-2.0, abs=1e-8)
    same = linear_logits_net([[1.0, 1.0], [1.0, 1.0]])
    assert delta_oracle(same, [2.0, 0.0], 0, bound=10.0) is None
    with pytest.raises(ValueError):
        delta_oracle(net, [2.0, 0.0], 0, bound=0.0)


def test_oracle_respects_bound():
    net = linear_logits_net(np.eye(2))
    assert delta_oracle(net, [5.0, 0.0], 0, bound=4.0) is None


@given(seeds, st.floats(0.05, 20.0))
def test_scaling_logits_layer_leaves_delta_unchanged(seed, c):
    net, x, y = _random_case(seed)
    last = net.logits_layer
    scaled = net.replace_layer(-1, DenseLayer(last.weights * c, last.bias * c, last.activation))
    a, b = forward(net, x), forward(scaled, x)
    assert b.predicted_class == y
    for j in range(net.feature_count):
        d1, t1 = delta_min(a, last, y, j)
        d2, t2 = delta_min(b, scaled.logits_layer, y, j)
        if np.isfinite(d1):
            assert d2 == pytest.approx(d1, rel=1e-9, abs=1e-12)
        else:
            assert not np.isfinite(d2)


@given(seeds)
def test_duplicating_a_class_row_keeps_min_delta(seed):
    net, x, y = _random_case(seed)
    last = net.logits_layer
    # Append a copy of the label's own column: it can never be separated from y.
    w = np.hstack([last.weights, last.weights[:, [y]]])
    b = np.append(last.bias, last.bias[y] - 1e-3)
    bigger = net.replace_layer(-1, DenseLayer(w, b, last.activation))
    a, t = forward(net, x), forward(bigger, x)
    for j in range(net.feature_count):
        d1, _ = delta_min(a, last, y, j)
        d2, _ = delta_min(t, bigger.logits_layer, y, j)
        # Matmul over a wider layer may differ in the last ulp.
        assert d2 == pytest.approx(d1, rel=1e-12) if np.isfinite(d1) else d2 == d1


# --- matrix, ranking, statistics --------------------------------------------

def _blob_case(seed, n=60):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [4, 6, 3])
    x = rng.uniform(0, 1, size=(n, 4))
    y = forward(net, x).predicted_class.copy()
    y[:5] = (y[:5] + 1) % 3  # a few misclassified rows
    return net, Dataset(x, y, 3)


def test_matrix_keeps_only_correct_inputs_and_matches_pointwise():
    net, ds = _blob_case(1)
    m = build_sensitivity_matrix(net, ds)
    pred = forward(net, ds.inputs).predicted_class
    assert list(m.input_ids) == list(np.flatnonzero(pred == ds.labels))
    for iid in m.input_ids[:10]:
        tr = forward(net, ds.inputs[iid])
        for j in range(net.feature_count):
            rec = m.record(iid, j)
            d, t = delta_min(tr, net.logits_layer, int(ds.labels[iid]), j)
            # Batched and single-row matmuls can differ in the last ulp.
            assert rec.min_delta == pytest.approx(d, rel=1e-12) and rec.min_target == t
            assert int(ds.labels[iid]) not in rec.per_class_delta
    assert len(list(m.records())) == len(m) * net.feature_count
    with pytest.raises(KeyError):
        m.row(0)


def test_matrix_neuron_subset():
    net, ds = _blob_case(2)
    full = build_sensitivity_matrix(net, ds)
    part = build_sensitivity_matrix(net, ds, neurons=[4, 1])
    np.testing.assert_array_equal(part.min_delta, full.min_delta[:, [4, 1]])


def test_matrix_rejects_empty_inputs():
    net, ds = _blob_case(3)
    with pytest.raises(EmptyDatasetError):
        build_sensitivity_matrix(net, ds.subset(np.arange(0)))
    wrong = Dataset(ds.inputs, (forward(net, ds.inputs).predicted_class + 1) % 3, 3)
    with pytest.raises(EmptyDatasetError):
        build_sensitivity_matrix(net, wrong)


def test_parallel_matrix_equals_sequential():
    rng = np.random.default_rng(4)
    net = random_net(rng, [5, 8, 4])
    x = rng.uniform(0, 1, size=(700, 5))
    ds = Dataset(x, forward(net, x).predicted_class, 4)
    a = build_sensitivity_matrix(net, ds, workers=1)
    b = build_sensitivity_matrix(net, ds, workers=3)
    np.testing.assert_array_equal(a.per_class, b.per_class)
    np.testing.assert_array_equal(a.min_target, b.min_target)


def test_ranking_examples():
    # Two features; input sensitivities |delta| 0.5 and 2.0.
    net = linear_logits_net([[2.0, 0.0], [0.5, 0.0]])
    ds = _dataset([[0.5, 0.0]], [0], 2)
    m = build_sensitivity_matrix(net, ds)
    assert np.abs(m.min_delta[0]).tolist() == [0.5, 2.0]
    assert rank_neurons_for_input(m, 0) == [0, 1]
    flat = linear_logits_net([[1.0, 1.0], [1.0, 1.0]], b=np.array([1.0, 0.0]))
    m2 = build_sensitivity_matrix(flat, _dataset([[0.3, 0.1]], [0], 2))
    assert rank_neurons_for_input(m2, 0) == [0, 1]
    assert rank_neurons_global(m2) == [0, 1]


@given(seeds)
def test_ranking_matches_brute_force(seed):
    net, ds = _blob_case(seed, n=20)
    m = build_sensitivity_matrix(net, ds)
    for iid in m.input_ids[:3]:
        r = m.row(iid)
        expect = sorted(range(net.feature_count), key=lambda j: (abs(m.min_delta[r, j]), j))
        assert rank_neurons_for_input(m, iid) == expect
    mean = [np.mean(np.abs(m.min_delta[:, j])) for j in range(net.feature_count)]
    assert rank_neurons_global(m) == sorted(range(net.feature_count), key=lambda j: (mean[j], j))


def test_ranking_is_stable_under_shuffled_rows():
    net, ds = _blob_case(5)
    perm = np.random.default_rng(0).permutation(len(ds))
    a = build_sensitivity_matrix(net, ds)
    b = build_sensitivity_matrix(net, ds.subset(perm))
    assert rank_neurons_global(a) == rank_neurons_global(b)


@given(seeds)
def test_feature_stats_match_reference(seed):
    net, ds = _blob_case(seed, n=40)
    s = feature_stats(net, ds)
    z = forward(net, ds.inputs).features
    np.testing.assert_allclose(s.mean, z.mean(axis=0), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(s.std, z.std(axis=0), rtol=1e-10, atol=1e-14)
    assert s.sample_count == len(ds)


def test_constant_feature_has_zero_std():
    net = linear_logits_net(np.eye(2))
    s = feature_stats(net, _dataset([[1.0, 0.5], [1.0, 0.2], [1.0, 0.9]], [0, 0, 0], 2))
    assert s.std[0] == 0.0


# --- exports ----------------------------------------------------------------

def test_delta_export_example(tmp_path):
    net = linear_logits_net(np.eye(2))
    m = build_sensitivity_matrix(net, _dataset([[2.0, 0.0]], [0], 2), neurons=[0])
    stats = FeatureStats(np.zeros(2), np.ones(2), 1)
    table = export_delta_distribution(m, stats)
    assert len(table) == 1
    assert table.value.tolist() == [2.0] and table.scaled_value.tolist() == [2.0]
    table.to_csv(tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["entity_id", "neuron", "value", "scaled_value"] and len(rows) == 2
    meta = json.loads((tmp_path / "d.meta.json").read_text())
    assert meta["stats_sample_count"] == 1


def test_delta_export_row_count_and_dead_features():
    net, ds = _blob_case(6)
    m = build_sensitivity_matrix(net, ds)
    stats = feature_stats(net, ds)
    table = export_delta_distribution(m, stats)
    assert len(table) == len(m) * net.feature_count
    scaled = scaled_abs_delta(m, stats)
    dead = stats.std <= 1e-8
    assert np.isnan(scaled[:, dead]).all()
    live = scaled[:, ~dead]
    fin = live[np.isfinite(live)]
    assert median_scaled_delta(m, stats) == pytest.approx(np.median(fin))


def test_activation_export():
    net, ds = _blob_case(7, n=10)
    t = export_activation_distribution(net, ds)
    assert len(t) == 10 * net.feature_count
    assert t.scaled_value.min() == 0.0 and t.scaled_value.max() == 1.0
    const = Network((DenseLayer(np.zeros((4, 3)), np.full(3, 0.5)), DenseLayer(np.ones((3, 3)), np.zeros(3), "identity")))
    t2 = export_activation_distribution(const, ds)
    assert (t2.scaled_value == 0).all()
