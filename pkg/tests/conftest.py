import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neurosens.nn import Activation, DenseLayer, Network, init_network

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Filled by test_acceptance; printed once at the end of the session.
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_net(rng: np.random.Generator, widths=None) -> Network:
    """Small ReLU net with random widths and non-zero biases."""
    if widths is None:
        depth = rng.integers(1, 3)
        widths = [int(rng.integers(2, 6))] + [int(rng.integers(2, 7)) for _ in range(depth)] + [int(rng.integers(2, 5))]
    net = init_network(widths, rng)
    layers = tuple(
        DenseLayer(l.weights, rng.normal(0, 0.3, size=l.bias.shape), l.activation) for l in net.layers
    )
    return Network(layers)


def linear_logits_net(W, b=None, feature_dim=None) -> Network:
    """Identity feature layer followed by a logits layer with weights ``W``."""
    W = np.asarray(W, dtype=float)
    F = W.shape[0]
    ident = DenseLayer(np.eye(F), np.zeros(F), Activation.IDENTITY)
    return Network((ident, DenseLayer(W, np.zeros(W.shape[1]) if b is None else b, Activation.IDENTITY)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def with_param(net: Network, layer: int, kind: str, index, value) -> Network:
    l = net.layers[layer]
    w, b = l.weights.copy(), l.bias.copy()
    (w if kind == "w" else b)[index] = value
    return net.replace_layer(layer, DenseLayer(w, b, l.activation))


def ridders(g, h: float = 1e-5, shrink: float = 1.4, rows: int = 10) -> float:
    """Derivative of the scalar ``g`` at 0 by Ridders' extrapolation of central differences.

    Steps shrink geometrically from ``h``; the tableau entry with the smallest
    estimated error wins. ``h`` is kept small because penalties built on
    1/(W[i,a]-W[i,b]) can have a pole within 1e-4 of the evaluation point.
    """
    a = np.empty((rows, rows))
    a[0, 0] = (g(h) - g(-h)) / (2 * h)
    best, err = a[0, 0], np.inf
    for i in range(1, rows):
        h /= shrink
        a[0, i] = (g(h) - g(-h)) / (2 * h)
        fac = shrink**2
        for j in range(1, i + 1):
            a[j, i] = (a[j - 1, i] * fac - a[j - 1, i - 1]) / (fac - 1)
            fac *= shrink**2
            e = max(abs(a[j, i] - a[j - 1, i]), abs(a[j, i] - a[j - 1, i - 1]))
            if e <= err:
                best, err = a[j, i], e
    return best


def fd_worst(net: Network, f, grads, floor: float = 1e-4) -> float:
    """Largest relative gap between ``grads`` and numerical derivatives of the scalar ``f(net)``.

    Entries smaller than ``floor`` are compared absolutely.
    """
    worst = 0.0
    for li, layer in enumerate(net.layers):
        for kind, arr, grad in (("w", layer.weights, grads.weights[li]), ("b", layer.bias, grads.biases[li])):
            for idx in np.ndindex(arr.shape):
                v = arr[idx]
                num = ridders(lambda d: f(with_param(net, li, kind, idx, v + d)))
                worst = max(worst, abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), floor))
    return worst
