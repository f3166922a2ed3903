"""Dense network substrate: layers, activations, losses, reverse-mode gradients, SGD.

Everything is float64 numpy. A "Tensor2" is simply a 2-D ``np.ndarray`` whose
rows are samples. Gradients are written by hand for the small layer vocabulary
below, so they can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, NumericalError, StateError, ValidationError


def as_tensor2(x, name: str = "tensor") -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float64 matrix (1-D input becomes one row)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def check_finite(arr, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains NaN or Inf")


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"
    SIGMOID = "sigmoid"

    def apply(self, a: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(a, 0.0)
        if self is Activation.TANH:
            return np.tanh(a)
        if self is Activation.SIGMOID:
            # tanh form avoids overflow in exp for large |a|
            return 0.5 * (1.0 + np.tanh(0.5 * a))
        return a

    def derivative(self, a: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Elementwise dh/da given pre-activation ``a`` and output ``h``."""
        if self is Activation.RELU:
            return (a > 0.0).astype(np.float64)
        if self is Activation.TANH:
            return 1.0 - h * h
        if self is Activation.SIGMOID:
            return h * (1.0 - h)
        return np.ones_like(a)


@dataclass(eq=False)
class DenseLayer:
    """``h = activation(x @ weights + bias)`` with gradient buffers."""

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY
    grad_weights: np.ndarray = field(default=None, repr=False)
    grad_bias: np.ndarray = field(default=None, repr=False)
    # bumped on every parameter update; lets backward detect stale caches
    version: int = field(default=0, repr=False)

    def __post_init__(self):
        self.weights = as_tensor2(self.weights, "weights")
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weights.shape[1]:
            raise DimensionError(
                f"bias length {self.bias.shape[0]} != weight columns {self.weights.shape[1]}"
            )
        self.activation = Activation(self.activation)
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_features(self) -> int:
        return self.weights.shape[0]

    @property
    def out_features(self) -> int:
        return self.weights.shape[1]

    def zero_grad(self) -> None:
        self.grad_weights.fill(0.0)
        self.grad_bias.fill(0.0)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


def init_layer(in_features: int, out_features: int, activation, rng: np.random.Generator) -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    limit = np.sqrt(6.0 / (in_features + out_features))
    w = rng.uniform(-limit, limit, size=(in_features, out_features))
    return DenseLayer(w, np.zeros(out_features), Activation(activation))


def build_stack(sizes: Sequence[int], activations: Sequence, rng: np.random.Generator) -> List[DenseLayer]:
    """Layers mapping ``sizes[0] -> sizes[1] -> ... -> sizes[-1]``."""
    if len(activations) != len(sizes) - 1:
        raise ValidationError("need one activation per layer")
    return [init_layer(a, b, act, rng) for a, b, act in zip(sizes[:-1], sizes[1:], activations)]


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    outputs: List[np.ndarray]
    layer_ids: Tuple[int, ...]
    versions: Tuple[int, ...]


def forward(layers: Sequence[DenseLayer], x) -> Tuple[np.ndarray, ForwardCache]:
    h = as_tensor2(x, "input")
    if not layers:
        raise ValidationError("empty layer stack")
    if h.shape[1] != layers[0].in_features:
        raise DimensionError(
            f"input shape {h.shape} does not match first layer weights {layers[0].weights.shape}"
        )
    inputs, pre, outs = [], [], []
    for layer in layers:
        if h.shape[1] != layer.in_features:
            raise DimensionError(f"activation shape {h.shape} vs weights {layer.weights.shape}")
        inputs.append(h)
        a = h @ layer.weights + layer.bias
        h = layer.activation.apply(a)
        pre.append(a)
        outs.append(h)
    cache = ForwardCache(
        inputs, pre, outs,
        tuple(id(layer) for layer in layers),
        tuple(layer.version for layer in layers),
    )
    return h, cache


def backward(layers: Sequence[DenseLayer], cache: Optional[ForwardCache], output_grad,
             accumulate: bool = False) -> np.ndarray:
    """Populate every layer's gradient buffers and return d loss / d input.

    With ``accumulate=True`` gradients are added to the buffers instead of
    overwriting them.
    """
    if cache is None:
        raise StateError("backward called without a forward cache")
    if cache.layer_ids != tuple(id(layer) for layer in layers):
        raise StateError("cache was produced by a different layer stack")
    if cache.versions != tuple(layer.version for layer in layers):
        raise StateError("stale cache: parameters changed since the forward pass")
    g = as_tensor2(output_grad, "output_grad")
    if g.shape != cache.outputs[-1].shape:
        raise DimensionError(f"output_grad shape {g.shape} != output shape {cache.outputs[-1].shape}")
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        ga = g * layer.activation.derivative(cache.pre[i], cache.outputs[i])
        gw = cache.inputs[i].T @ ga
        gb = ga.sum(axis=0)
        if accumulate:
            layer.grad_weights += gw
            layer.grad_bias += gb
        else:
            layer.grad_weights[...] = gw
            layer.grad_bias[...] = gb
        g = ga @ layer.weights.T
    return g


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n:
        raise DimensionError(f"labels shape {y.shape} does not match {n} rows")
    if y.size and (not np.issubdtype(y.dtype, np.integer)):
        if not np.all(y == np.round(y)):
            raise ValidationError("labels must be integer class indices")
        y = y.astype(np.int64)
    bad = (y < 0) | (y >= k)
    if np.any(bad):
        raise ValidationError(f"labels out of range [0, {k}): {np.unique(y[bad]).tolist()}")
    return y.astype(np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` under softmax(logits), and its gradient."""
    logits = as_tensor2(logits, "logits")
    n, k = logits.shape
    y = _check_labels(labels, n, k)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= n
    check_finite(loss, "cross-entropy loss")
    return float(loss), grad


def mse_loss(reconstruction, target) -> Tuple[float, np.ndarray]:
    """Mean of squared elementwise differences, and its gradient."""
    r = as_tensor2(reconstruction, "reconstruction")
    t = as_tensor2(target, "target")
    if r.shape != t.shape:
        raise DimensionError(f"reconstruction shape {r.shape} != target shape {t.shape}")
    if r.size == 0:
        return 0.0, np.zeros_like(r)
    diff = r - t
    loss = float(np.mean(diff * diff))
    check_finite(loss, "mse loss")
    return loss, 2.0 * diff / diff.size


@dataclass
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    minibatch_size: int = 64
    seed: int = 0
    # rescale the global gradient norm down to this value; None disables clipping
    clip_norm: Optional[float] = 5.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.minibatch_size < 1:
            raise ValidationError(f"minibatch_size must be >= 1, got {self.minibatch_size}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValidationError(f"clip_norm must be > 0 or None, got {self.clip_norm}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], config: SgdConfig,
             velocity: Optional[List[np.ndarray]] = None) -> Sequence[np.ndarray]:
    """In-place momentum SGD: ``v <- momentum*v + g``; ``p <- p - lr*v``.

    ``velocity`` is updated in place when given; with ``None`` a zero velocity
    is assumed (plain SGD for this step).
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if velocity is not None and len(velocity) != len(params):
        raise DimensionError(f"{len(params)} params but {len(velocity)} velocity buffers")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"param shape {p.shape} != grad shape {g.shape}")
        if velocity is None:
            p -= config.learning_rate * g
        else:
            v = velocity[i]
            if v.shape != p.shape:
                raise DimensionError(f"velocity shape {v.shape} != param shape {p.shape}")
            v *= config.momentum
            v += g
            p -= config.learning_rate * v
    return params


class Sgd:
    """Momentum SGD over a list of layers, using their gradient buffers."""

    def __init__(self, layers: Sequence[DenseLayer], config: SgdConfig):
        self.layers = list(layers)
        self.config = config
        self.velocity = [np.zeros_like(p) for p in self._params()]

    def _params(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def _grads(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.grad_weights, layer.grad_bias]
        return out

    def step(self) -> None:
        params = self._params()
        grads = self._grads()
        if self.config.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.config.clip_norm:
                grads = [g * (self.config.clip_norm / norm) for g in grads]
        sgd_step(params, grads, self.config, self.velocity)
        for p in params:
            check_finite(p, "parameters after SGD step")
        for layer in self.layers:
            layer.version += 1

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()
