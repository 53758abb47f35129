"""Dense feed-forward network engine with exact reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects in float64. Functions accept a
single input of shape ``(d,)`` or a batch of shape ``(n, d)``; traces mirror
whichever was given.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class NonFiniteError(ValueError):
    """Raised when a value that must be finite contains NaN or Inf."""


class ShapeError(ValueError):
    pass


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Convert to a float64 array and check every entry is finite."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray  # [in, out]
    bias: np.ndarray  # [out]
    activation: Activation = Activation.RELU

    def __post_init__(self):
        w = as_tensor(self.weights, "weights")
        b = as_tensor(self.bias, "bias")
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ShapeError(f"weights {w.shape} and bias {b.shape} do not chain")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def in_features(self) -> int:
        return self.weights.shape[0]

    @property
    def out_features(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class Network:
    layers: tuple[DenseLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if len(layers) < 2:
            raise ShapeError("need at least a feature layer and a logits layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ShapeError(f"layer widths {prev.out_features} -> {nxt.in_features} do not chain")
        if layers[-1].activation is not Activation.IDENTITY:
            raise ShapeError("logits layer must use the identity activation")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_features

    @property
    def feature_count(self) -> int:
        return self.layers[-1].in_features

    @property
    def logits_layer(self) -> DenseLayer:
        return self.layers[-1]

    def replace_layer(self, index: int, layer: DenseLayer) -> "Network":
        layers = list(self.layers)
        layers[index] = layer
        return Network(tuple(layers))


@dataclass(frozen=True)
class ForwardTrace:
    inputs: np.ndarray
    per_layer_pre: tuple[np.ndarray, ...]
    per_layer_post: tuple[np.ndarray, ...]

    @property
    def features(self) -> np.ndarray:
        return self.per_layer_post[-2]

    @property
    def logits(self) -> np.ndarray:
        return self.per_layer_post[-1]

    @property
    def predicted_class(self):
        # np.argmax returns the first maximal index, i.e. ties go to the lowest class.
        pred = np.argmax(self.logits, axis=-1)
        return int(pred) if pred.ndim == 0 else pred


@dataclass(frozen=True)
class GradientBundle:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    input_gradient: np.ndarray

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            tuple(a + b for a, b in zip(self.weights, other.weights)),
            tuple(a + b for a, b in zip(self.biases, other.biases)),
            self.input_gradient + other.input_gradient,
        )

    def is_finite(self) -> bool:
        arrays = (*self.weights, *self.biases, self.input_gradient)
        return all(np.all(np.isfinite(a)) for a in arrays)


def _activate(pre: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(pre, 0.0)
    return pre


def _check_input(net: Network, x) -> np.ndarray:
    x = as_tensor(x, "input")
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match input width {net.input_dim}")
    return x


def _run(net: Network, x: np.ndarray, neuron=None, delta=0.0) -> ForwardTrace:
    pre, post = [], []
    h = x
    last = len(net.layers) - 1
    for idx, layer in enumerate(net.layers):
        if idx == last and neuron is not None:
            h = h.copy()
            h[..., neuron] += delta
            post[-1] = h
        z = h @ layer.weights + layer.bias
        h = _activate(z, layer.activation)
        pre.append(z)
        post.append(h)
    return ForwardTrace(x, tuple(pre), tuple(post))


def forward(net: Network, x) -> ForwardTrace:
    """Evaluate ``net`` on ``x`` and keep every intermediate activation."""
    return _run(net, _check_input(net, x))


def forward_perturbed(net: Network, x, neuron: int, delta) -> ForwardTrace:
    """Forward pass with ``delta`` added to feature ``neuron`` before the logits layer.

    ``delta`` may be a scalar or, for batched ``x``, one value per row.
    """
    if not 0 <= neuron < net.feature_count:
        raise IndexError(f"neuron {neuron} outside [0, {net.feature_count})")
    x = _check_input(net, x)
    delta = np.asarray(delta, dtype=np.float64)
    return _run(net, x, neuron=neuron, delta=delta)


def logits_of(net: Network, x: np.ndarray) -> np.ndarray:
    """Logits only, without validation. Hot-loop helper."""
    h = x
    for layer in net.layers:
        h = _activate(h @ layer.weights + layer.bias, layer.activation)
    return h


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy_loss(logits, label):
    """-log softmax(logits)[label]; per-row array for batched logits."""
    logits = np.asarray(logits, dtype=np.float64)
    label = np.asarray(label)
    n_classes = logits.shape[-1]
    if np.any(label < 0) or np.any(label >= n_classes):
        raise IndexError(f"label outside [0, {n_classes})")
    m = np.max(logits, axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.sum(np.exp(logits - m), axis=-1))
    picked = np.take_along_axis(logits, label.reshape(logits.shape[:-1] + (1,)), axis=-1)[..., 0]
    out = lse - picked
    return float(out) if out.ndim == 0 else out


def _onehot(label, n_classes: int, batch_shape) -> np.ndarray:
    out = np.zeros(batch_shape + (n_classes,))
    np.put_along_axis(out, np.asarray(label).reshape(batch_shape + (1,)), 1.0, axis=-1)
    return out


def _check_trace(net: Network, trace: ForwardTrace):
    if len(trace.per_layer_post) != len(net.layers):
        raise ShapeError("trace depth does not match network")
    for layer, post in zip(net.layers, trace.per_layer_post):
        if post.shape[-1] != layer.out_features:
            raise ShapeError("trace widths do not match network")


def backward_custom(net: Network, trace: ForwardTrace, logit_seed, feature_seed=None) -> GradientBundle:
    """Gradients of ``sum(logit_seed * logits) + sum(feature_seed * features)``.

    For batched traces the contributions of all rows are summed.
    """
    _check_trace(net, trace)
    g = np.asarray(logit_seed, dtype=np.float64)
    if g.shape != trace.logits.shape:
        raise ShapeError(f"logit seed shape {g.shape} != logits shape {trace.logits.shape}")
    if feature_seed is not None:
        feature_seed = np.asarray(feature_seed, dtype=np.float64)
        if feature_seed.shape != trace.features.shape:
            raise ShapeError("feature seed shape does not match features")

    n = len(net.layers)
    gw: list = [None] * n
    gb: list = [None] * n
    for idx in range(n - 1, -1, -1):
        layer = net.layers[idx]
        if layer.activation is Activation.RELU:
            g = g * (trace.per_layer_pre[idx] > 0)
        h_in = trace.inputs if idx == 0 else trace.per_layer_post[idx - 1]
        if h_in.ndim == 1:
            gw[idx] = np.outer(h_in, g)
            gb[idx] = g.copy()
        else:
            gw[idx] = h_in.T @ g
            gb[idx] = g.sum(axis=0)
        g = g @ layer.weights.T
        if idx == n - 1 and feature_seed is not None:
            g = g + feature_seed
    return GradientBundle(tuple(gw), tuple(gb), g)


def backward(net: Network, trace: ForwardTrace, label) -> GradientBundle:
    """Gradients of the cross-entropy loss (mean over rows for a batch)."""
    logits = trace.logits
    label = np.asarray(label)
    batch_shape = logits.shape[:-1]
    if label.shape != batch_shape:
        raise ShapeError("label shape does not match trace batch")
    if np.any(label < 0) or np.any(label >= net.class_count):
        raise IndexError("label out of range")
    seed = softmax(logits) - _onehot(label, net.class_count, batch_shape)
    if logits.ndim == 2:
        seed /= logits.shape[0]
    return backward_custom(net, trace, seed)


# -- initialisation ---------------------------------------------------------

def init_network(widths: Sequence[int], seed: int | np.random.Generator) -> Network:
    """He-normal ReLU hidden layers and a Glorot-uniform identity logits layer.

    ``widths`` lists input width, hidden widths, and class count; the last
    hidden width is the feature count.
    """
    if len(widths) < 3:
        raise ShapeError("need input, at least one hidden, and output width")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for idx, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        if idx == len(widths) - 2:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append(DenseLayer(w, np.zeros(fan_out), Activation.IDENTITY))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            layers.append(DenseLayer(w, np.zeros(fan_out), Activation.RELU))
    return Network(tuple(layers))


# -- optimisers --------------------------------------------------------------

def _require_finite(grads: GradientBundle):
    if not grads.is_finite():
        raise NonFiniteError("gradient bundle contains non-finite values")


def sgd_step(net: Network, grads: GradientBundle, lr: float) -> Network:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    _require_finite(grads)
    layers = tuple(
        DenseLayer(layer.weights - lr * gw, layer.bias - lr * gb, layer.activation)
        for layer, gw, gb in zip(net.layers, grads.weights, grads.biases)
    )
    return Network(layers)


@dataclass(frozen=True)
class AdamHyperparams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class AdamState:
    step: int
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]

    @classmethod
    def zeros(cls, net: Network) -> "AdamState":
        shapes = [a.shape for layer in net.layers for a in (layer.weights, layer.bias)]
        return cls(0, tuple(np.zeros(s) for s in shapes), tuple(np.zeros(s) for s in shapes))


def adam_step(
    net: Network, grads: GradientBundle, state: AdamState, hp: AdamHyperparams = AdamHyperparams()
) -> tuple[Network, AdamState]:
    """One bias-corrected Adam update; returns the new network and moment state."""
    if hp.lr < 0:
        raise ValueError("learning rate must be non-negative")
    _require_finite(grads)
    t = state.step + 1
    flat_g = [g for pair in zip(grads.weights, grads.biases) for g in pair]
    flat_p = [p for layer in net.layers for p in (layer.weights, layer.bias)]
    new_m, new_v, new_p = [], [], []
    c1 = 1.0 - hp.beta1**t
    c2 = 1.0 - hp.beta2**t
    for p, g, m, v in zip(flat_p, flat_g, state.m, state.v):
        m = hp.beta1 * m + (1.0 - hp.beta1) * g
        v = hp.beta2 * v + (1.0 - hp.beta2) * g * g
        new_p.append(p - hp.lr * (m / c1) / (np.sqrt(v / c2) + hp.eps))
        new_m.append(m)
        new_v.append(v)
    layers = tuple(
        DenseLayer(new_p[2 * i], new_p[2 * i + 1], layer.activation) for i, layer in enumerate(net.layers)
    )
    return Network(layers), AdamState(t, tuple(new_m), tuple(new_v))


# -- checkpoints -------------------------------------------------------------

def save_network(net: Network, path) -> None:
    arrays = {"format_version": np.array(CHECKPOINT_VERSION)}
    arrays["activations"] = np.array([layer.activation.value for layer in net.layers])
    for i, layer in enumerate(net.layers):
        arrays[f"w{i}"] = layer.weights
        arrays[f"b{i}"] = layer.bias
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path) -> Network:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        acts = [str(a) for a in data["activations"]]
        layers = tuple(
            DenseLayer(data[f"w{i}"], data[f"b{i}"], Activation(a)) for i, a in enumerate(acts)
        )
    return Network(layers)
