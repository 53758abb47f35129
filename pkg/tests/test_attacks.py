import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import linear_logits_net, random_net
from neurosens.attacks import (
    AttackConfig,
    AttackSpec,
    Mode,
    Norm,
    evaluate_attack,
    k_ns_attack,
    neuron_target,
    pgd_attack,
    pgd_attack_batch,
    single_neuron_attack,
)
from neurosens.data import Dataset
from neurosens.nn import forward
from neurosens.sensitivity import build_sensitivity_matrix, rank_neurons_for_input

seeds = st.integers(0, 2**31 - 1)
WIDE = (-100.0, 100.0)


def _toy(seed, dim=5):
    """Two-class linear net with logits (a, -a), a = w . x, and a point with a > 0."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=dim)
    net = linear_logits_net(np.stack([w, -w], axis=1))
    x = rng.normal(size=dim)
    if w @ x < 0:
        x = -x
    return net, x, float(w @ x), w


def _classified(seed, n=40, widths=(4, 8, 3)):
    rng = np.random.default_rng(seed)
    net = random_net(rng, list(widths))
    x = rng.uniform(0, 1, size=(n, widths[0]))
    return net, Dataset(x, forward(net, x).predicted_class, widths[-1])


# --- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(step_size=0.0)
    with pytest.raises(ValueError):
        AttackConfig(mode=Mode.LAGRANGIAN, lagrange_coefficient=0.0)
    assert AttackConfig(norm="linf", epsilon=0.4).effective_step_size == pytest.approx(0.1)
    assert AttackConfig(norm="l2", epsilon=1.0).effective_step_size == pytest.approx(0.1)
    net, x, _, _ = _toy(0)
    with pytest.raises(ValueError):
        pgd_attack(net, x, 0, AttackConfig(mode=Mode.LAGRANGIAN, lagrange_coefficient=1.0))


# --- PGD --------------------------------------------------------------------

def test_pgd_zero_budget_does_not_move():
    net, x, _, _ = _toy(1)
    r = pgd_attack(net, x, 0, AttackConfig(epsilon=0.0, steps=20), WIDE)
    np.testing.assert_array_equal(r.adversarial_input, x)
    assert not r.success


@pytest.mark.parametrize("norm,dual", [(Norm.LINF, 1), (Norm.L2, 2)])
@pytest.mark.parametrize("seed", range(5))
def test_pgd_margin_on_linear_toy(norm, dual, seed):
    net, x, a, w = _toy(seed)
    # Logit gap 2a shrinks by at most 2 eps ||w||_dual inside the ball.
    bound = a / np.linalg.norm(w, dual)
    below = pgd_attack(net, x, 0, AttackConfig(norm=norm, epsilon=0.9 * bound, steps=100), WIDE)
    above = pgd_attack(net, x, 0, AttackConfig(norm=norm, epsilon=1.5 * bound, steps=100), WIDE)
    assert not below.success
    assert above.success


@given(seeds, st.sampled_from([Norm.LINF, Norm.L2]), st.floats(0.0, 0.5), st.integers(1, 3))
def test_pgd_budget_and_success_soundness(seed, norm, eps, restarts):
    net, ds = _classified(seed, n=8)
    cfg = AttackConfig(norm=norm, epsilon=eps, steps=15, restarts=restarts, seed=seed)
    for x, y, r in zip(ds.inputs, ds.labels, pgd_attack_batch(net, ds.inputs, ds.labels, cfg)):
        d = r.adversarial_input - x
        assert (np.abs(d).max() if norm is Norm.LINF else np.linalg.norm(d)) <= eps + 1e-9
        assert r.adversarial_input.min() >= 0.0 and r.adversarial_input.max() <= 1.0
        assert r.success == (forward(net, r.adversarial_input).predicted_class != y)


@given(seeds)
def test_more_restarts_never_lose_a_seed(seed):
    net, ds = _classified(seed, n=10)
    base = dict(norm=Norm.LINF, epsilon=0.1, steps=5, seed=seed)
    one = pgd_attack_batch(net, ds.inputs, ds.labels, AttackConfig(restarts=1, **base))
    four = pgd_attack_batch(net, ds.inputs, ds.labels, AttackConfig(restarts=4, **base))
    for a, b in zip(one, four):
        assert b.success or not a.success


# --- single-neuron ----------------------------------------------------------

def test_neuron_target_is_the_tie_point():
    net, x, a, w = _toy(2)
    t, delta = neuron_target(net, x, 0, 1)
    assert delta == pytest.approx(-a / w[1])
    np.testing.assert_allclose(t, [0.0, 0.0], atol=1e-12)


def test_single_neuron_zero_budget_fails():
    net, x, _, _ = _toy(3)
    r = single_neuron_attack(net, x, 0, 0, AttackConfig(epsilon=0.0, steps=50), WIDE)
    assert not r.success and r.target_neuron == 0


@pytest.mark.parametrize("seed", range(5))
def test_single_neuron_succeeds_iff_budget_covers_preimage(seed):
    net, x, a, w = _toy(seed)
    # Target logits (0, 0); least-squares preimage of the required logit shift.
    shift = np.linalg.lstsq(net.logits_layer.weights.T, -forward(net, x).logits, rcond=None)[0]
    n_star = np.linalg.norm(shift)
    assert n_star == pytest.approx(a / np.linalg.norm(w))
    cfg = dict(norm=Norm.L2, steps=100)
    ok = single_neuron_attack(net, x, 0, 0, AttackConfig(epsilon=1.05 * n_star, **cfg), WIDE)
    short = single_neuron_attack(net, x, 0, 0, AttackConfig(epsilon=0.95 * n_star, **cfg), WIDE)
    assert ok.success and not short.success
    assert short.final_objective < 0.1 * np.linalg.norm(forward(net, x).logits)


def test_unreachable_neuron_is_skipped():
    net = linear_logits_net([[1.0, 1.0], [1.0, -1.0]])
    r = single_neuron_attack(net, np.array([0.5, 0.5]), 0, 0, AttackConfig(epsilon=1.0), WIDE)
    assert not r.success and r.status == "unreachable_target"


@given(seeds)
def test_lagrangian_objective_never_increases(seed):
    net, ds = _classified(seed, n=3)
    cfg = AttackConfig(norm=Norm.L2, mode=Mode.LAGRANGIAN, lagrange_coefficient=0.1, steps=30, seed=seed)
    matrix = build_sensitivity_matrix(net, ds)
    for i in matrix.input_ids:
        top = rank_neurons_for_input(matrix, i)[0]
        r = single_neuron_attack(net, ds.inputs[i], int(ds.labels[i]), top, cfg, input_id=int(i))
        h = np.array(r.objective_history)
        assert np.all(np.diff(h) <= 1e-12)
        if r.success:
            assert forward(net, r.adversarial_input).predicted_class != ds.labels[i]


@given(seeds, st.sampled_from([Norm.LINF, Norm.L2]))
def test_projected_neuron_attack_respects_budget(seed, norm):
    net, ds = _classified(seed, n=5)
    cfg = AttackConfig(norm=norm, epsilon=0.2, steps=20, seed=seed)
    for x, y in zip(ds.inputs, ds.labels):
        r = single_neuron_attack(net, x, int(y), 0, cfg)
        d = r.adversarial_input - x
        assert (np.abs(d).max() if norm is Norm.LINF else np.linalg.norm(d)) <= 0.2 + 1e-9
        assert 0.0 <= r.adversarial_input.min() and r.adversarial_input.max() <= 1.0


# --- k-NS -------------------------------------------------------------------

def test_one_ns_equals_top_neuron_attack():
    net, ds = _classified(7, n=6)
    matrix = build_sensitivity_matrix(net, ds)
    cfg = AttackConfig(epsilon=0.1, steps=20, seed=3)
    for i in matrix.input_ids:
        x, y = ds.inputs[i], int(ds.labels[i])
        a = k_ns_attack(net, x, y, 1, matrix, cfg, int(i))
        b = single_neuron_attack(net, x, y, rank_neurons_for_input(matrix, i)[0], cfg, input_id=int(i))
        np.testing.assert_array_equal(a.adversarial_input, b.adversarial_input)
        assert a.success == b.success


def test_k_ns_clamps_large_k():
    net, ds = _classified(8, n=3)
    matrix = build_sensitivity_matrix(net, ds)
    i = int(matrix.input_ids[0])
    with pytest.warns(UserWarning):
        r = k_ns_attack(net, ds.inputs[i], int(ds.labels[i]), 50, matrix, AttackConfig(epsilon=0.3, steps=10), i)
    assert r.status in ("k_clamped", "ok", "unreachable_target")
    with pytest.raises(ValueError):
        k_ns_attack(net, ds.inputs[i], int(ds.labels[i]), 0, matrix, AttackConfig(), i)


def test_k_ns_picks_smallest_successful_perturbation():
    net, ds = _classified(9, n=8)
    matrix = build_sensitivity_matrix(net, ds)
    cfg = AttackConfig(epsilon=0.3, steps=30, seed=1)
    for i in matrix.input_ids:
        x, y = ds.inputs[i], int(ds.labels[i])
        subs = [single_neuron_attack(net, x, y, n, cfg, input_id=int(i)) for n in rank_neurons_for_input(matrix, i)[:4]]
        r = k_ns_attack(net, x, y, 4, matrix, cfg, int(i))
        assert r.success == any(s.success for s in subs)
        if r.success:
            assert r.perturbation_norm_linf == min(s.perturbation_norm_linf for s in subs if s.success)


# --- evaluation -------------------------------------------------------------

@given(seeds)
def test_kns_rates_are_monotone_and_consistent(seed):
    net, ds = _classified(seed, n=12)
    rep = evaluate_attack(net, ds, AttackSpec("kns", ks=(1, 2, 4, 8)), AttackConfig(epsilon=0.1, steps=10, seed=seed))
    rates = [rep.rate_over_correct[f"{k}-NS"] for k in (1, 2, 4, 8)]
    assert rates == sorted(rates)
    for k in (1, 2, 4, 8):
        name = f"{k}-NS"
        assert 0 <= rep.rate_over_correct[name] <= 1 and 0 <= rep.rate_over_all[name] <= 1
        assert rep.rate_over_correct[name] == rep.successes[name] / rep.n_correct


def test_rate_over_all_counts_misclassified_seeds():
    net, ds = _classified(10, n=20)
    labels = ds.labels.copy()
    labels[:4] = (labels[:4] + 1) % 3
    ds = Dataset(ds.inputs, labels, 3)
    rep = evaluate_attack(net, ds, AttackSpec("pgd"), AttackConfig(epsilon=0.05, steps=10))
    assert rep.n_seeds == 20 and rep.n_correct == 16
    assert rep.rate_over_all["pgd"] == (rep.successes["pgd"] + 4) / 20


def test_vacuous_report():
    net, ds = _classified(11, n=5)
    wrong = Dataset(ds.inputs, (ds.labels + 1) % 3, 3)
    rep = evaluate_attack(net, wrong, AttackSpec("pgd"), AttackConfig())
    assert rep.vacuous and rep.n_correct == 0 and rep.successes == {}
    with pytest.raises(ValueError):
        evaluate_attack(net, ds.subset(np.arange(0)), AttackSpec("pgd"), AttackConfig())


def test_rank_curve(tmp_path):
    net, ds = _classified(12, n=10)
    rep = evaluate_attack(net, ds, AttackSpec("rank_curve", ranks=(0, 3, 7)), AttackConfig(epsilon=0.2, steps=10))
    assert [r["rank"] for r in rep.rank_curve] == [0, 3, 7]
    assert all(r["denominator"] == rep.n_correct for r in rep.rank_curve)
    rep.rank_curve_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "rank,success_rate,denominator"
    with pytest.raises(ValueError):
        evaluate_attack(net, ds, AttackSpec("rank_curve", ranks=(8,)), AttackConfig())
    with pytest.raises(ValueError):
        AttackSpec("fgsm")


def test_evaluation_is_deterministic_and_worker_independent(tmp_path):
    net, ds = _classified(13, n=300, widths=(4, 8, 3))
    spec, cfg = AttackSpec("kns", ks=(1, 2)), AttackConfig(epsilon=0.05, steps=5, restarts=2, seed=4)
    a = evaluate_attack(net, ds, spec, cfg, workers=1)
    b = evaluate_attack(net, ds, spec, cfg, workers=1)
    c = evaluate_attack(net, ds, spec, cfg, workers=3)
    a.to_json(tmp_path / "a.json")
    c.to_json(tmp_path / "c.json")
    assert a.to_dict() == b.to_dict()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "c.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text())["metadata"]["target_space"].startswith("logits")
