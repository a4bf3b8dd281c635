"""Dense neural-network engine: forward/backward passes, losses and Adam.

Everything works on ``float64`` numpy arrays laid out as ``(batch, features)``.
Weights are stored ``(out, in)`` so a layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

BCE_EPSILON = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class ContractError(RuntimeError):
    """Raised when a caller breaks a calling contract (stale cache, bad state)."""


class Activation(enum.IntEnum):
    IDENTITY = 0
    SIGMOID = 1
    RELU = 2
    TANH = 3
    SOFTMAX = 4


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax_rows received non-finite logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.IDENTITY:
        return z.copy()
    if kind is Activation.SIGMOID:
        return sigmoid(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.SOFTMAX:
        return softmax_rows(z)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Elementwise derivative da/dz given pre-activation ``z`` and output ``a``.

    Softmax has no elementwise derivative; use :func:`activation_backward`.
    """
    if kind is Activation.IDENTITY:
        return np.ones_like(z)
    if kind is Activation.SIGMOID:
        return a * (1.0 - a)
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    if kind is Activation.TANH:
        return 1.0 - a * a
    raise ValueError(f"{kind.name} has no elementwise derivative")


def activation_backward(kind: Activation, z: np.ndarray, a: np.ndarray, grad_a: np.ndarray) -> np.ndarray:
    """Map dL/da to dL/dz."""
    if kind is Activation.SOFTMAX:
        inner = np.sum(grad_a * a, axis=1, keepdims=True)
        return a * (grad_a - inner)
    return grad_a * activation_derivative(kind, z, a)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation = Activation.IDENTITY

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weights.shape[0]}"
            )

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def glorot(cls, n_in: int, n_out: int, activation: Activation, rng: np.random.Generator) -> "DenseLayer":
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        return cls(w, np.zeros(n_out), activation)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class MlpModel:
    layers: List[DenseLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for i in range(len(self.layers) - 1):
            if self.layers[i].n_out != self.layers[i + 1].n_in:
                raise ShapeError(
                    f"layer {i} outputs {self.layers[i].n_out} values but layer {i + 1} "
                    f"expects {self.layers[i + 1].n_in}"
                )
        for i, layer in enumerate(self.layers[:-1]):
            if layer.activation is Activation.SOFTMAX:
                raise ShapeError(f"softmax is only allowed on the final layer (found on layer {i})")

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n_out

    def parameters(self) -> List[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (live references)."""
        out: List[np.ndarray] = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} arrays, got {len(params)}")
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"parameter shape mismatch at layer {i}")
            layer.weights = np.asarray(w, dtype=np.float64)
            layer.bias = np.asarray(b, dtype=np.float64)

    def copy(self) -> "MlpModel":
        return MlpModel([layer.copy() for layer in self.layers])

    def fingerprint(self) -> str:
        return parameter_fingerprint(self.parameters())

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return dense_forward(self, batch)[0]


def build_mlp(sizes: Sequence[int], activations: Sequence[Activation], rng: np.random.Generator) -> MlpModel:
    """Glorot-uniform MLP; ``sizes`` lists every width including input and output."""
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per layer")
    return MlpModel([
        DenseLayer.glorot(sizes[i], sizes[i + 1], Activation(act), rng)
        for i, act in enumerate(activations)
    ])


def parameter_fingerprint(params: Sequence[np.ndarray]) -> str:
    """Order-stable SHA-256 over shapes and little-endian float64 bytes."""
    h = hashlib.sha256()
    for p in params:
        arr = np.ascontiguousarray(p, dtype="<f8")
        h.update(np.asarray(arr.shape, dtype="<i8").tobytes())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class ForwardCache:
    model_id: int
    shapes: Tuple[Tuple[int, int], ...]
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)


def dense_forward(model: MlpModel, batch: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    cache = ForwardCache(id(model), tuple(l.weights.shape for l in model.layers))
    for i, layer in enumerate(model.layers):
        if x.shape[1] != layer.n_in:
            raise ShapeError(f"layer {i} expects {layer.n_in} inputs, got {x.shape[1]}")
        z = x @ layer.weights.T + layer.bias
        a = activate(layer.activation, z)
        cache.inputs.append(x)
        cache.pre.append(z)
        cache.post.append(a)
        x = a
    return x, cache


def mlp_backward(
    model: MlpModel, cache: ForwardCache, output_gradient: np.ndarray
) -> Tuple[List[np.ndarray], np.ndarray]:
    """Backpropagate dL/d(output).

    Returns gradients in :meth:`MlpModel.parameters` order and dL/d(input).
    """
    if cache.model_id != id(model) or cache.shapes != tuple(l.weights.shape for l in model.layers):
        raise ContractError("forward cache does not belong to this model")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ContractError(f"output gradient shape {g.shape} != forward output {cache.post[-1].shape}")
    grads: List[np.ndarray] = [None] * (2 * len(model.layers))  # type: ignore[list-item]
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        gz = activation_backward(layer.activation, cache.pre[i], cache.post[i], g)
        grads[2 * i] = gz.T @ cache.inputs[i]
        grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ layer.weights
    return grads, g


def bce_loss(predictions: np.ndarray, labels: np.ndarray, eps: float = BCE_EPSILON) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``predictions``.

    Predictions are clipped to ``[eps, 1 - eps]``; the gradient is taken at the
    clipped value.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} vs labels {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(p, eps, 1.0 - eps)
    n = p.size
    loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)) / n
    grad = (p - y) / (p * (1.0 - p)) / n
    return float(loss), grad


def mse_loss(predictions: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Squared error summed over features and averaged over rows."""
    diff = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    if diff.ndim != 2:
        raise ShapeError("mse_loss expects 2-D arrays")
    n = diff.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh arrays, advances ``state.t``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer state have different lengths")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ContractError(f"shape mismatch for parameter {i}: {p.shape} vs {np.shape(g)}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
    return out, state


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 100
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for a (seed, purpose, ...) tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def minibatches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffled row indices for one epoch; the last short batch is kept."""
    order = derive_rng(seed, 0xBA7C4, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def classifier_step(
    model: MlpModel,
    state: AdamState,
    x: np.ndarray,
    y: np.ndarray,
    learning_rate: float,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Forward, BCE, backward and Adam update on one batch.

    Returns the batch loss, the pre-update predictions and dL/d(input).
    """
    out, cache = dense_forward(model, x)
    loss, g = bce_loss(out, y)
    grads, gin = mlp_backward(model, cache, g)
    new, _ = adam_step(model.parameters(), grads, state, learning_rate)
    model.set_parameters(new)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    return loss, out, gin


def as_column(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    return y.reshape(-1, 1) if y.ndim == 1 else y


def check_finite(name: str, arr: np.ndarray, context: Optional[str] = None) -> None:
    if not np.all(np.isfinite(arr)):
        where = f" ({context})" if context else ""
        raise FloatingPointError(f"{name} contains non-finite values{where}")
