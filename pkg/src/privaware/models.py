"""Fully-connected networks with manual backprop, trained by SGD or DP-SGD.

Parameters live in one flat vector. Layer ``l`` owns a weight block of shape
``(fan_in, units)`` stored row-major followed by its bias, in layer order.
Frozen layers (random weights training) keep their initial values bit-for-bit.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from .accountant import DpSgdSetting, dpsgd_epsilon
from .numerics import RngStream

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear", "softmax")
LOSSES = ("squared", "logistic", "categorical_xent")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Layer:
    units: int
    activation: str = "relu"
    dropout_after: float = 0.0
    trainable: bool = True

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("units must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 <= self.dropout_after < 1:
            raise ValueError("dropout_after must be in [0, 1)")


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    layers: tuple[Layer, ...]
    task: str = "classification"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dim < 1 or not self.layers:
            raise ValueError("need input_dim >= 1 and at least one layer")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        for layer in self.layers[:-1]:
            if layer.activation == "softmax":
                raise ValueError("softmax is only allowed on the last layer")
        last = self.layers[-1]
        if self.task == "regression" and last.units != 1:
            raise ValueError("regression needs a single output unit")
        if self.task == "classification" and last.units == 1 and last.activation != "sigmoid":
            raise ValueError("a single-unit classifier must use a sigmoid output")

    @property
    def n_classes(self) -> int:
        if self.task == "regression":
            return 0
        return max(2, self.layers[-1].units)

    def shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [l.units for l in self.layers]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "task": self.task, "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        return cls(d["input_dim"], tuple(Layer(**l) for l in d["layers"]), d.get("task", "classification"))


def mlp(input_dim: int, hidden: list[int], n_out: int, activation: str = "relu",
        out_activation: str | None = None, task: str = "classification", dropout: float = 0.0) -> Architecture:
    """Convenience constructor for a plain dense stack."""
    if out_activation is None:
        out_activation = "linear" if task == "regression" else ("sigmoid" if n_out == 1 else "softmax")
    layers = [Layer(h, activation, dropout) for h in hidden] + [Layer(n_out, out_activation)]
    return Architecture(input_dim, tuple(layers), task)


def param_count(arch: Architecture) -> tuple[int, int]:
    """(total, trainable) parameter counts."""
    total = trainable = 0
    for (fan_in, units), layer in zip(arch.shapes(), arch.layers):
        n = fan_in * units + units
        total += n
        if layer.trainable:
            trainable += n
    return total, trainable


def rwt_freeze(arch: Architecture, last_trainable: int) -> Architecture:
    """Freeze every layer except the last ``last_trainable`` ones."""
    n = len(arch.layers)
    if not 1 <= last_trainable <= n:
        raise ValueError(f"last_trainable must be in [1, {n}], got {last_trainable}")
    layers = tuple(replace(l, trainable=i >= n - last_trainable) for i, l in enumerate(arch.layers))
    return replace(arch, layers=layers)


@dataclass
class Model:
    """An architecture plus its flat parameter vector."""

    arch: Architecture
    theta: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self._slices = []
        offset = 0
        for fan_in, units in self.arch.shapes():
            w = slice(offset, offset + fan_in * units)
            offset += fan_in * units
            b = slice(offset, offset + units)
            offset += units
            self._slices.append((w, b))
        if self.theta.shape != (offset,):
            raise ValueError(f"theta has length {self.theta.size}, architecture needs {offset}")

    def weights(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        (fan_in, units), (w, b) = self.arch.shapes()[l], self._slices[l]
        return self.theta[w].reshape(fan_in, units), self.theta[b]

    @property
    def slices(self):
        return self._slices

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self.theta.size, dtype=bool)
        for layer, (w, b) in zip(self.arch.layers, self._slices):
            if layer.trainable:
                mask[w] = True
                mask[b] = True
        return mask

    def copy(self) -> Model:
        return Model(self.arch, self.theta.copy(), dict(self.meta))

    def save(self, path) -> None:
        doc = {
            "version": CHECKPOINT_VERSION,
            "architecture": self.arch.to_dict(),
            "theta": self.theta.tolist(),
            "meta": self.meta,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> Model:
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        return cls(Architecture.from_dict(doc["architecture"]), np.array(doc["theta"]), doc.get("meta", {}))


def init_model(arch: Architecture, rng: RngStream) -> Model:
    """Glorot-uniform weights, zero biases."""
    parts = []
    for fan_in, units in arch.shapes():
        limit = math.sqrt(6.0 / (fan_in + units))
        parts.append(rng.gen.uniform(-limit, limit, size=fan_in * units))
        parts.append(np.zeros(units))
    return Model(arch, np.concatenate(parts))


def zeros_model(arch: Architecture) -> Model:
    return Model(arch, np.zeros(param_count(arch)[0]))


# --- forward / backward -------------------------------------------------------

def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return expit(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "linear":
        return z
    if name == "softmax":
        return np.exp(z - logsumexp(z, axis=1, keepdims=True))
    raise ValueError(name)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    if name == "linear":
        return np.ones_like(z)
    raise ValueError(f"no elementwise derivative for {name}")


def _forward_cache(model: Model, X: np.ndarray, dropout_rng: RngStream | None = None):
    """Batched forward pass; returns per-layer (input, preactivation, output)."""
    cache = []
    a = X
    for l, layer in enumerate(model.arch.layers):
        W, b = model.weights(l)
        z = a @ W + b
        out = _act(layer.activation, z)
        dmask = None
        if dropout_rng is not None and layer.dropout_after > 0 and l < len(model.arch.layers) - 1:
            keep = 1.0 - layer.dropout_after
            dmask = (dropout_rng.random(out.shape) < keep) / keep
        cache.append((a, z, out, dmask))
        a = out if dmask is None else out * dmask
    return cache


def _check_loss(arch: Architecture, loss: str) -> None:
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    last = arch.layers[-1]
    if loss == "categorical_xent" and last.activation != "softmax":
        raise ValueError("categorical_xent needs a softmax output")
    if loss == "logistic" and not (last.activation == "sigmoid" and last.units == 1):
        raise ValueError("logistic loss needs a single sigmoid output")
    if loss == "squared" and last.activation == "softmax":
        raise ValueError("squared loss is not supported on a softmax output")


def default_loss(arch: Architecture) -> str:
    if arch.task == "regression":
        return "squared"
    return "logistic" if arch.layers[-1].units == 1 else "categorical_xent"


def _targets(arch: Architecture, y: np.ndarray, loss: str) -> np.ndarray:
    if loss == "categorical_xent":
        t = np.zeros((len(y), arch.layers[-1].units))
        t[np.arange(len(y)), np.asarray(y, dtype=np.int64)] = 1.0
        return t
    return np.asarray(y, dtype=np.float64).reshape(len(y), -1)


def _output_delta(arch: Architecture, z, out, target, loss: str) -> np.ndarray:
    """d(per-example loss)/d(last preactivation)."""
    if loss in ("categorical_xent", "logistic"):
        return out - target
    return 2.0 * (out - target) * _act_grad(arch.layers[-1].activation, z, out)


def per_example_losses(model: Model, X, y, loss: str | None = None) -> np.ndarray:
    loss = loss or default_loss(model.arch)
    _check_loss(model.arch, loss)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cache = _forward_cache(model, X)
    _, z, out, _ = cache[-1]
    t = _targets(model.arch, y, loss)
    if loss == "categorical_xent":
        return -np.sum(t * (z - logsumexp(z, axis=1, keepdims=True)), axis=1)
    if loss == "logistic":
        # -[t log s(z) + (1-t) log(1-s(z))] written in terms of z for stability
        zz = z[:, 0]
        return np.logaddexp(0.0, zz) - t[:, 0] * zz
    return np.sum((out - t) ** 2, axis=1)


def _backward(model: Model, cache, delta_out):
    """Return per-layer (inputs, deltas) so that dL_i/dW = a_i^T delta_i."""
    n = len(model.arch.layers)
    out = [None] * n
    delta = delta_out
    for l in range(n - 1, -1, -1):
        a_in = cache[l][0]
        out[l] = (a_in, delta)
        if l == 0:
            break
        W, _ = model.weights(l)
        back = delta @ W.T
        _, zp, outp, dmask = cache[l - 1]
        if dmask is not None:
            back = back * dmask
        delta = back * _act_grad(model.arch.layers[l - 1].activation, zp, outp)
    return out


def per_example_grads(model: Model, X, y, loss: str | None = None, dropout_rng: RngStream | None = None) -> np.ndarray:
    """Gradient of each example's loss w.r.t. the full flat theta, shape (B, P)."""
    loss = loss or default_loss(model.arch)
    _check_loss(model.arch, loss)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    cache = _forward_cache(model, X, dropout_rng)
    _, z, out, _ = cache[-1]
    delta = _output_delta(model.arch, z, out, _targets(model.arch, y, loss), loss)
    G = np.zeros((X.shape[0], model.theta.size))
    for (a_in, d), (w, b) in zip(_backward(model, cache, delta), model.slices):
        G[:, w] = np.einsum("bi,bj->bij", a_in, d).reshape(X.shape[0], -1)
        G[:, b] = d
    return G


def clip_per_example(G: np.ndarray, clip: float) -> np.ndarray:
    """Scale each row so its L2 norm is at most ``clip``."""
    norms = np.linalg.norm(G, axis=1)
    scale = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
    return G * scale[:, None]


def _summed_grad(model: Model, X, y, loss: str, mask_layers, clip: float | None,
                 dropout_rng: RngStream | None) -> tuple[np.ndarray, np.ndarray]:
    """Sum over the batch of (optionally clipped) per-example gradients.

    For a dense layer the per-example weight gradient is an outer product, so
    its norm is ||a_i|| * ||delta_i|| and the clipped sum is (s*a)^T delta.
    Returns (summed flat gradient, per-example norms).
    """
    cache = _forward_cache(model, X, dropout_rng)
    _, z, out, _ = cache[-1]
    delta = _output_delta(model.arch, z, out, _targets(model.arch, y, loss), loss)
    parts = _backward(model, cache, delta)
    sq = np.zeros(X.shape[0])
    for trainable, (a_in, d) in zip(mask_layers, parts):
        if trainable:
            sq += np.sum(a_in * a_in, axis=1) * np.sum(d * d, axis=1) + np.sum(d * d, axis=1)
    norms = np.sqrt(sq)
    if clip is None:
        scale = None
    else:
        scale = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
    g = np.zeros(model.theta.size)
    for trainable, (a_in, d), (w, b) in zip(mask_layers, parts, model.slices):
        if not trainable:
            continue
        if scale is not None:
            d = d * scale[:, None]
        g[w] = (a_in.T @ d).ravel()
        g[b] = d.sum(axis=0)
    return g, norms


# --- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch: int = 100
    epochs: int = 10
    loss: str | None = None
    clip_l2: float | None = None
    noise_multiplier: float | None = None
    l2_reg: float = 0.0
    delta: float = 1e-5
    seed: int = 0

    @property
    def dp(self) -> bool:
        return self.clip_l2 is not None and self.noise_multiplier is not None


EpochHook = Callable[[int, Model], None]


def _train(model: Model, X, y, config: TrainConfig, rng: RngStream, dp: bool,
           on_epoch: EpochHook | None = None, on_step: Callable | None = None) -> Model:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if X.shape[1] != model.arch.input_dim:
        raise ValueError(f"input has {X.shape[1]} features, architecture expects {model.arch.input_dim}")
    loss = config.loss or default_loss(model.arch)
    _check_loss(model.arch, loss)
    B = min(config.batch, n)
    n_batches = n // B  # final partial batch is dropped
    model = model.copy()
    mask_layers = [l.trainable for l in model.arch.layers]
    mask = model.trainable_mask()
    weight_mask = np.zeros_like(mask)
    for trainable, (w, _) in zip(mask_layers, model.slices):
        if trainable:
            weight_mask[w] = True
    # separate substreams so DP noise never perturbs batching or dropout
    shuffle_rng, dropout_rng, noise_rng = rng.child("shuffle"), rng.child("dropout"), rng.child("noise")
    clip = config.clip_l2 if dp else None
    noise_std = (config.noise_multiplier or 0.0) * (config.clip_l2 or 0.0) if dp else 0.0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for s in range(n_batches):
            idx = order[s * B:(s + 1) * B]
            g, norms = _summed_grad(model, X[idx], y[idx], loss, mask_layers, clip, dropout_rng)
            if dp:
                noise = noise_rng.normal(0.0, 1.0, size=g.size) * noise_std
                g = g + np.where(mask, noise, 0.0)
            g = g / B
            if config.l2_reg:
                g = g + 2.0 * config.l2_reg * np.where(weight_mask, model.theta, 0.0)
            model.theta[mask] -= config.learning_rate * g[mask]
            if on_step is not None:
                on_step(model, norms)
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
    return model


def sgd_train(model: Model, X, y, config: TrainConfig, rng: RngStream,
              on_epoch: EpochHook | None = None) -> Model:
    """Shuffled mini-batch SGD on the trainable layers."""
    return _train(model, X, y, config, rng, dp=False, on_epoch=on_epoch)


def dpsgd_train(model: Model, X, y, config: TrainConfig, rng: RngStream,
                on_epoch: EpochHook | None = None, on_step: Callable | None = None) -> tuple[Model, float]:
    """DP-SGD: clip each example's gradient to ``clip_l2``, add N(0, (z C)^2), average.

    Returns the trained model and the accountant's epsilon for
    (n, batch, epochs, z, delta). Epsilon is ``inf`` when z == 0.
    """
    if config.clip_l2 is None or config.noise_multiplier is None:
        raise ValueError("DP-SGD needs clip_l2 and noise_multiplier")
    if not config.clip_l2 > 0:
        raise ValueError(f"clip_l2 must be > 0, got {config.clip_l2}")
    if config.noise_multiplier < 0:
        raise ValueError(f"noise_multiplier must be >= 0, got {config.noise_multiplier}")
    trained = _train(model, X, y, config, rng, dp=True, on_epoch=on_epoch, on_step=on_step)
    n = len(X)
    if config.noise_multiplier == 0:
        eps = math.inf
    else:
        eps = dpsgd_epsilon(DpSgdSetting(n, min(config.batch, n), config.epochs,
                                         config.noise_multiplier, config.clip_l2, config.delta))
    trained.meta.update(epsilon=eps, delta=config.delta, seed=config.seed)
    return trained, eps


# --- inference ----------------------------------------------------------------

def predict(model: Model, X) -> np.ndarray:
    """Class probabilities (B, k) for classification, predictions (B,) for regression."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.arch.input_dim:
        raise ValueError(f"input has {X.shape[1]} features, architecture expects {model.arch.input_dim}")
    out = _forward_cache(model, X)[-1][2]
    if model.arch.task == "regression":
        return out[:, 0]
    if out.shape[1] == 1:
        return np.hstack([1.0 - out, out])
    return out


def forward(model: Model, x) -> np.ndarray | float:
    """Single-example prediction."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != model.arch.input_dim:
        raise ValueError(f"expected a vector of length {model.arch.input_dim}")
    out = predict(model, x[None, :])[0]
    return float(out) if model.arch.task == "regression" else out


def evaluate(model: Model, X, y) -> float:
    """Accuracy (lowest index wins ties) or mean absolute error."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    p = predict(model, X)
    y = np.asarray(y)
    if model.arch.task == "regression":
        return float(np.mean(np.abs(y - p)))
    return float(np.mean(np.argmax(p, axis=1) == y))
