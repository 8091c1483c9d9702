"""Minimal dense-network core: explicit forward/backward plus a hookable SGD step.

Everything is float64 numpy. Backward is hand-rolled reverse mode so it can
be checked against central finite differences, and ``sgd_step`` takes a
gradient-transform hook, which is the seam where gradient masking plugs in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

RELU = "relu"
IDENTITY = "identity"

CROSS_ENTROPY = "cross_entropy"
LOGIT_SUM = "logit_sum"


class ShapeError(ValueError):
    """A tensor disagrees with the network's declared shapes."""


@dataclass
class LayerParams:
    """One dense layer: ``weights`` (out_dim, in_dim) and ``bias`` (out_dim,).

    Also used as the per-layer container of a GradientSet, since gradients
    mirror parameter shapes exactly.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError(
                f"expected 2-d weights and 1-d bias, got {self.weights.shape} / {self.bias.shape}"
            )
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != out_dim {self.weights.shape[0]}"
            )

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    def flat(self) -> np.ndarray:
        """Weights and bias of the layer as one vector (weights first, C order)."""
        return np.concatenate([self.weights.ravel(), self.bias])

    def set_flat(self, vec: np.ndarray) -> None:
        if vec.shape != (self.size,):
            raise ShapeError(f"flat vector has {vec.shape}, layer needs ({self.size},)")
        self.weights = vec[: self.weights.size].reshape(self.weights.shape).copy()
        self.bias = vec[self.weights.size :].copy()

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy())


@dataclass
class GradientSet:
    """Per-layer gradients, shape-congruent with a list of LayerParams."""

    layers: list[LayerParams]

    def copy(self) -> "GradientSet":
        return GradientSet([g.copy() for g in self.layers])

    def check_congruent(self, params: Sequence[LayerParams]) -> None:
        if len(self.layers) != len(params):
            raise ShapeError(f"{len(self.layers)} gradient layers vs {len(params)} parameter layers")
        for i, (g, p) in enumerate(zip(self.layers, params)):
            if g.weights.shape != p.weights.shape or g.bias.shape != p.bias.shape:
                raise ShapeError(
                    f"layer {i}: gradient shape {g.weights.shape}/{g.bias.shape} "
                    f"!= parameter shape {p.weights.shape}/{p.bias.shape}"
                )

    def all_finite(self) -> bool:
        return all(
            np.isfinite(g.weights).all() and np.isfinite(g.bias).all() for g in self.layers
        )


@dataclass
class Layer:
    params: LayerParams
    activation: str  # RELU or IDENTITY

    def __post_init__(self):
        if self.activation not in (RELU, IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class Network:
    """Ordered dense layers, each with its own activation."""

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1].params, self.layers[i].params
            if cur.in_dim != prev.out_dim:
                raise ShapeError(
                    f"layer {i}: in_dim {cur.in_dim} != previous out_dim {prev.out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].params.in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].params.out_dim

    @property
    def params(self) -> list[LayerParams]:
        return [l.params for l in self.layers]

    def copy(self) -> "Network":
        return Network([Layer(l.params.copy(), l.activation) for l in self.layers])


@dataclass
class Batch:
    """Inputs (n, in_dim) and optional integer class labels (n,)."""

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ShapeError(f"batch inputs must be 2-d, got shape {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ShapeError(
                    f"labels shape {self.labels.shape} != ({self.inputs.shape[0]},)"
                )

    def __len__(self) -> int:
        return self.inputs.shape[0]


def init_layer(in_dim: int, out_dim: int, rng: np.random.Generator) -> LayerParams:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero bias."""
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return LayerParams(w, np.zeros(out_dim))


def init_mlp(dims: Sequence[int], rng: np.random.Generator,
             output_activation: str = IDENTITY) -> Network:
    """MLP with ReLU hidden layers; dims = [in, hidden..., out]."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for i in range(len(dims) - 1):
        act = RELU if i < len(dims) - 2 else output_activation
        layers.append(Layer(init_layer(dims[i], dims[i + 1], rng), act))
    return Network(layers)


def _apply_activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == RELU:
        return np.maximum(z, 0.0)
    return z


def forward_cached(network: Network, inputs: np.ndarray):
    """Forward pass keeping pre-activations and activations for backward."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != network.in_dim:
        raise ShapeError(
            f"layer 0: expected input dim {network.in_dim}, got shape {x.shape}"
        )
    pre, post = [], [x]
    for i, layer in enumerate(network.layers):
        p = layer.params
        if post[-1].shape[1] != p.in_dim:
            raise ShapeError(f"layer {i}: expected input dim {p.in_dim}, got {post[-1].shape[1]}")
        z = post[-1] @ p.weights.T + p.bias
        pre.append(z)
        post.append(_apply_activation(z, layer.activation))
    return pre, post


def forward(network: Network, batch: Batch) -> np.ndarray:
    """Logits (batch x out_dim) for the batch inputs."""
    _, post = forward_cached(network, batch.inputs)
    return post[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-softmax of the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("cross entropy of an empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(
            f"labels must be in [0, {logits.shape[1]}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(n), labels]))


def loss_logit_sum(logits: np.ndarray) -> float:
    """Sum over classes, mean over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] == 0:
        raise ValueError("logit sum of an empty batch")
    return float(logits.sum(axis=1).mean())


def backward(network: Network, batch: Batch, loss_kind: str):
    """Loss value and per-layer gradients of the batch-mean loss.

    loss_kind is CROSS_ENTROPY (needs labels) or LOGIT_SUM.
    """
    if loss_kind not in (CROSS_ENTROPY, LOGIT_SUM):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    pre, post = forward_cached(network, batch.inputs)
    logits = post[-1]
    n = logits.shape[0]
    if n == 0:
        raise ValueError("backward on an empty batch")

    if loss_kind == CROSS_ENTROPY:
        if batch.labels is None:
            raise ValueError("cross entropy requires labels")
        loss = loss_cross_entropy(logits, batch.labels)
        dlogits = softmax(logits)
        dlogits[np.arange(n), batch.labels] -= 1.0
        dlogits /= n
    else:
        loss = loss_logit_sum(logits)
        dlogits = np.full_like(logits, 1.0 / n)

    grads: list[LayerParams] = [None] * len(network.layers)  # type: ignore[list-item]
    dout = dlogits
    for i in range(len(network.layers) - 1, -1, -1):
        layer = network.layers[i]
        dz = dout * (pre[i] > 0.0) if layer.activation == RELU else dout
        grads[i] = LayerParams(dz.T @ post[i], dz.sum(axis=0))
        if i > 0:
            dout = dz @ layer.params.weights
    return loss, GradientSet(grads)


GradTransform = Callable[[GradientSet], GradientSet]


def sgd_step(params: Sequence[LayerParams], grads: GradientSet, lr: float,
             transform: GradTransform | None = None) -> Sequence[LayerParams]:
    """In-place update theta <- theta - lr * transform(g); returns params."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    grads.check_congruent(params)
    if transform is not None:
        grads = transform(grads)
        grads.check_congruent(params)
    for p, g in zip(params, grads.layers):
        p.weights -= lr * g.weights
        p.bias -= lr * g.bias
    return params
