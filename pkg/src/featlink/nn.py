"""Dense-network training engine.

Forward/backward passes, SGD with momentum and L2 weight decay, and the two
loss functions used by the transmission schemes. The topology is deliberately
fixed: every trainable component in this package (feature extractor, channel
encoder/decoder, classifier heads, digital feature encoder) is a stack of
dense layers, so hand-written backprop over that stack replaces a general
autodiff engine. All math runs in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import CheckpointError, ConfigurationError, NumericError, UsageError

DEFAULT_LEAKY_SLOPE = 0.2


class Activation(IntEnum):
    IDENTITY = 0
    RELU = 1
    LEAKY_RELU = 2


@dataclass
class DenseLayer:
    """One affine map plus element-wise nonlinearity.

    weights has shape [out, in]; bias has shape [out]. ``leaky_slope`` is only
    used by LEAKY_RELU.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY
    leaky_slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2:
            raise ConfigurationError(f"weights must be a matrix, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ConfigurationError(
                f"bias shape {self.bias.shape} does not match weight rows {self.weights.shape[0]}"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ConfigurationError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def activate(self, z: np.ndarray) -> np.ndarray:
        if self.activation == Activation.IDENTITY:
            return z
        if self.activation == Activation.RELU:
            return np.maximum(z, 0.0)
        return np.where(z > 0.0, z, self.leaky_slope * z)

    def activation_gradient(self, z: np.ndarray) -> np.ndarray:
        if self.activation == Activation.IDENTITY:
            return np.ones_like(z)
        if self.activation == Activation.RELU:
            return (z > 0.0).astype(np.float64)
        return np.where(z > 0.0, 1.0, self.leaky_slope)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation, self.leaky_slope)


@dataclass
class MlpModel:
    """Ordered stack of dense layers with chained dimensions."""

    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer dimensions do not chain: {a.out_dim} -> {b.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "MlpModel":
        return MlpModel([layer.copy() for layer in self.layers])

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        out, _ = forward(self, inputs)
        return out


def build_mlp(
    dims: Sequence[int],
    hidden_activation: Activation = Activation.RELU,
    output_activation: Activation = Activation.IDENTITY,
    rng: np.random.Generator | None = None,
    leaky_slope: float = DEFAULT_LEAKY_SLOPE,
) -> MlpModel:
    """Build an MLP with He-style uniform fan-in init (seeded via ``rng``).

    ``dims`` lists [in, hidden..., out]. Biases start at zero.
    """
    if len(dims) < 2:
        raise ConfigurationError("dims must list at least input and output size")
    if rng is None:
        rng = np.random.default_rng(0)
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        act = output_activation if last else hidden_activation
        limit = np.sqrt(6.0 / d_in)
        w = rng.uniform(-limit, limit, size=(d_out, d_in))
        layers.append(DenseLayer(w, np.zeros(d_out), act, leaky_slope))
    return MlpModel(layers)


@dataclass
class ForwardCache:
    """Intermediate values captured by forward() for the matching backward().

    ``inputs[i]`` is the batch fed to layer i; ``preacts[i]`` its pre-activation.
    """

    model: MlpModel
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    single: bool


def _as_batch(inputs) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ConfigurationError(f"inputs must be a vector or matrix, got ndim={x.ndim}")


def forward(model: MlpModel, inputs) -> tuple[np.ndarray, ForwardCache]:
    """Run the stack on a batch [n, in_dim] (or a single vector) and cache
    what backward() needs."""
    x, single = _as_batch(inputs)
    if x.shape[1] != model.in_dim:
        raise ConfigurationError(
            f"input has {x.shape[1]} columns, model expects {model.in_dim}"
        )
    layer_inputs, preacts = [], []
    h = x
    for layer in model.layers:
        layer_inputs.append(h)
        z = h @ layer.weights.T + layer.bias
        preacts.append(z)
        h = layer.activate(z)
    cache = ForwardCache(model, layer_inputs, preacts, single)
    return (h[0] if single else h), cache


def backward(
    model: MlpModel, cache: ForwardCache, output_gradient
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backprop an upstream gradient through the cached forward pass.

    Returns per-layer (dW, db) gradients plus the gradient w.r.t. the inputs,
    which lets callers chain several models (encoder -> channel -> decoder).
    """
    if cache.model is not model:
        raise UsageError("cache was produced by a different model")
    if len(cache.inputs) != len(model.layers):
        raise UsageError("cache does not match the model's layer count")
    g, single = _as_batch(output_gradient)
    if g.shape != cache.preacts[-1].shape:
        raise UsageError(
            f"output gradient shape {g.shape} does not match forward output "
            f"{cache.preacts[-1].shape}"
        )
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dz = g * layer.activation_gradient(cache.preacts[i])
        dw = dz.T @ cache.inputs[i]
        db = dz.sum(axis=0)
        grads[i] = (dw, db)
        g = dz @ layer.weights
    return grads, (g[0] if cache.single else g)


def zero_gradients(model: MlpModel) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers]


@dataclass
class SgdConfig:
    """SGD with momentum, L2 decay on weight matrices, and an lr schedule.

    ``schedule`` lists (epoch, new_learning_rate) with strictly increasing
    epochs; the new rate applies from that epoch on.
    """

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigurationError("schedule epochs must be strictly increasing")

    def learning_rate_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for start, new_lr in self.schedule:
            if epoch >= start:
                lr = new_lr
        return lr


def init_velocity(model: MlpModel) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers]


def sgd_step(
    model: MlpModel,
    gradients: list[tuple[np.ndarray, np.ndarray]],
    velocity: list[tuple[np.ndarray, np.ndarray]],
    config: SgdConfig,
    lr: float | None = None,
) -> tuple[MlpModel, list[tuple[np.ndarray, np.ndarray]]]:
    """One momentum-SGD update, in place.

    velocity <- momentum * velocity + gradient + weight_decay * param,
    param    <- param - lr * velocity.
    Decay applies to weight matrices only, never biases.
    """
    if len(gradients) != len(model.layers) or len(velocity) != len(model.layers):
        raise UsageError("gradients/velocity do not match the model's layers")
    step = config.learning_rate if lr is None else lr
    for layer, (gw, gb), (vw, vb) in zip(model.layers, gradients, velocity):
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise UsageError("gradient shapes do not match layer parameters")
        vw *= config.momentum
        vw += gw
        if config.weight_decay:
            vw += config.weight_decay * layer.weights
        layer.weights -= step * vw
        vb *= config.momentum
        vb += gb
        layer.bias -= step * vb
    return model, velocity


def sgd_update_arrays(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    velocity: list[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
    decay_mask: list[bool] | None = None,
) -> None:
    """Momentum-SGD over a flat list of parameter arrays, in place.

    Used for parameter groups that are not dense layers (the entropy model).
    """
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        v *= momentum
        v += g
        if weight_decay and (decay_mask is None or decay_mask[i]):
            v += weight_decay * p
        p -= lr * v


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (loss, gradient w.r.t. logits); the gradient is already divided
    by the batch size. Stable under logits up to +-~700 via max subtraction.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ConfigurationError("logits must be [n, C] with C >= 2")
    if not np.isfinite(z).all():
        raise NumericError("logits contain non-finite values")
    n, c = z.shape
    if y.shape != (n,) or y.min() < 0 or y.max() >= c:
        raise ConfigurationError("labels must be one index in [0, C) per row")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    loss = float(-log_probs[np.arange(n), y].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad


def l1_loss(predicted, target) -> tuple[float, np.ndarray]:
    """Mean absolute difference over all entries.

    Gradient is sign(pred - target) / count; the kink at zero uses sign 0.
    """
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigurationError(f"shape mismatch: {p.shape} vs {t.shape}")
    diff = p - t
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, grad


def batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """Yield shuffled minibatch index arrays covering [0, n)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# Checkpoint format: magic "FLNN", u16 version, u32 layer count, then per
# layer u32 in, u32 out, u8 activation id, weights row-major float64 LE,
# biases float64 LE. Version 1 fixes the leaky slope at 0.2.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FLNN"
CHECKPOINT_VERSION = 1


def model_to_bytes(model: MlpModel) -> bytes:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<HI", CHECKPOINT_VERSION, len(model.layers))
    for layer in model.layers:
        if layer.activation == Activation.LEAKY_RELU and layer.leaky_slope != DEFAULT_LEAKY_SLOPE:
            raise CheckpointError(
                f"checkpoint v{CHECKPOINT_VERSION} only stores leaky slope "
                f"{DEFAULT_LEAKY_SLOPE}, got {layer.leaky_slope}"
            )
        out += struct.pack("<IIB", layer.in_dim, layer.out_dim, int(layer.activation))
        out += np.ascontiguousarray(layer.weights, dtype="<f8").tobytes()
        out += np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
    return bytes(out)


def model_from_bytes(blob: bytes) -> MlpModel:
    view = memoryview(blob)
    offset = 0

    def take(count: int, what: str) -> memoryview:
        nonlocal offset
        if offset + count > len(view):
            raise CheckpointError(
                f"truncated checkpoint: need {count} bytes for {what} at offset "
                f"{offset}, have {len(view) - offset}"
            )
        chunk = view[offset : offset + count]
        offset += count
        return chunk

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic at offset 0, expected b'FLNN'")
    version, n_layers = struct.unpack("<HI", take(6, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    layers = []
    for i in range(n_layers):
        d_in, d_out, act = struct.unpack("<IIB", take(9, f"layer {i} header"))
        w = np.frombuffer(take(8 * d_in * d_out, f"layer {i} weights"), dtype="<f8")
        b = np.frombuffer(take(8 * d_out, f"layer {i} bias"), dtype="<f8")
        layers.append(DenseLayer(w.reshape(d_out, d_in).copy(), b.copy(), Activation(act)))
    if offset != len(view):
        raise CheckpointError(f"{len(view) - offset} trailing bytes after layer {n_layers - 1}")
    return MlpModel(layers)


def save_checkpoint(model: MlpModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
