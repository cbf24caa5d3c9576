"""Minimal dense feed-forward networks in numpy.

Everything the fusion models need and nothing more: dense layers with
leaky-ReLU / sigmoid / identity activations, class-weighted binary
cross-entropy, exact backpropagation, and an Adam training loop driven by
validation AUC with learning-rate halving and early stopping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from mmshap.evaluation import roc_auc

ACTIVATIONS = ("leaky_relu", "sigmoid", "identity")
PRED_CLAMP = 1e-7
IMPROVEMENT_EPS = 1e-6
MODEL_FORMAT = "mmshap.mlp"
MODEL_VERSION = 1


class NonFiniteError(ArithmeticError):
    """Raised when a forward or backward pass produces NaN or inf."""


def leaky_relu(x, slope: float = 0.01):
    """Return ``x`` where non-negative and ``slope * x`` elsewhere."""
    if slope <= 0:
        raise ValueError("leaky slope must be positive")
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 0, x, slope * x)
    return float(out) if out.ndim == 0 else out


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: np.ndarray, activation: str, slope: float) -> np.ndarray:
    if activation == "leaky_relu":
        return np.where(z >= 0, z, slope * z)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: str, slope: float) -> np.ndarray:
    if activation == "leaky_relu":
        return np.where(z >= 0, 1.0, slope)
    if activation == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


# ---------------------------------------------------------------------------
# Class weights and loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights ``(w_neg, w_pos)``."""

    negative: float
    positive: float

    def __post_init__(self):
        if not (self.negative > 0 and self.positive > 0):
            raise ValueError("class weights must be positive")

    def for_labels(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        return np.where(labels == 1, self.positive, self.negative)

    def as_tuple(self) -> tuple[float, float]:
        return (self.negative, self.positive)


def class_weights(n_total: int, counts_per_class: tuple[int, int]) -> ClassWeights:
    """Inverse-frequency weights ``n_total / (2 * n_c)`` for both classes.

    >>> class_weights(100, (50, 50))
    ClassWeights(negative=1.0, positive=1.0)
    """
    n_neg, n_pos = counts_per_class
    if n_neg <= 0 or n_pos <= 0:
        raise ValueError("degenerate class distribution")
    if n_neg + n_pos != n_total:
        raise ValueError(f"class counts {counts_per_class} do not sum to {n_total}")
    n_classes = 2
    return ClassWeights(n_total / (n_classes * n_neg), n_total / (n_classes * n_pos))


def class_weights_from_labels(labels) -> ClassWeights:
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    return class_weights(len(labels), (len(labels) - n_pos, n_pos))


def weighted_bce(pred, label, weights: ClassWeights):
    """Class-weighted binary cross-entropy.

    Works on scalars or aligned arrays. Predictions are clamped to
    ``[1e-7, 1 - 1e-7]`` before the logarithm; values outside ``[0, 1]`` are
    rejected.
    """
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if np.any(pred < 0) or np.any(pred > 1) or np.any(np.isnan(pred)):
        raise ValueError("predictions must lie in [0, 1]")
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    w = np.where(label == 1, weights.positive, weights.negative)
    loss = -w * (label * np.log(p) + (1.0 - label) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


# ---------------------------------------------------------------------------
# Layers and models
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "leaky_relu"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float, ndmin=2)
        self.bias = np.array(self.bias, dtype=float, ndmin=1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


class Trainable(Protocol):
    """What :func:`train` needs from a model."""

    def parameters(self) -> dict[str, np.ndarray]: ...

    def loss_and_grad(self, X, y, weights, l2, dropout=0.0, rng=None, frozen=frozenset()): ...

    def predict_proba(self, X) -> np.ndarray: ...

    def copy(self): ...


def param_group(name: str) -> str:
    """Freeze group of a parameter name (text before the first dot)."""
    return name.split(".", 1)[0]


class MLPModel:
    """A stack of dense layers evaluated in order.

    Parameters are exposed as ``"{i}.weights"`` / ``"{i}.bias"`` so each layer
    index is its own freeze group.
    """

    def __init__(self, layers: Iterable[DenseLayer], leaky_slope: float = 0.01):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("an MLPModel needs at least one layer")
        if leaky_slope <= 0:
            raise ValueError("leaky slope must be positive")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise ValueError(
                    f"layer {i} expects {self.layers[i].in_dim} inputs but layer {i - 1} "
                    f"produces {self.layers[i - 1].out_dim}"
                )
        self.leaky_slope = float(leaky_slope)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def __repr__(self):
        dims = [self.input_dim] + [layer.out_dim for layer in self.layers]
        acts = ",".join(layer.activation for layer in self.layers)
        return f"MLPModel(dims={dims}, activations=[{acts}])"

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x) -> np.ndarray:
        """Evaluate the network on one vector or a batch of row vectors."""
        a = np.asarray(x, dtype=float)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        if a.ndim != 2 or a.shape[1] != self.input_dim:
            raise ValueError(f"expected input of dimension {self.input_dim}, got shape {np.shape(x)}")
        for layer in self.layers:
            a = _activate(a @ layer.weights.T + layer.bias, layer.activation, self.leaky_slope)
        return a[0] if single else a

    def predict_proba(self, X) -> np.ndarray:
        out = self.forward(np.atleast_2d(X))
        if out.shape[1] != 1:
            raise ValueError("predict_proba needs a single-output model")
        return out[:, 0]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"{i}.weights"] = layer.weights
            params[f"{i}.bias"] = layer.bias
        return params

    def copy(self) -> "MLPModel":
        return MLPModel(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.leaky_slope,
        )

    # -- backprop ---------------------------------------------------------

    def forward_cache(self, X: np.ndarray, dropout: float = 0.0, rng=None, drop_output=False):
        """Forward pass that keeps what :meth:`backward` needs.

        Inverted dropout is applied after every layer except the last (and the
        last too when ``drop_output``).
        """
        cache = []
        a = X
        n_layers = len(self.layers)
        for i, layer in enumerate(self.layers):
            with np.errstate(over="ignore", invalid="ignore"):
                z = a @ layer.weights.T + layer.bias
            if not np.all(np.isfinite(z)):
                raise NonFiniteError(f"non-finite pre-activation at layer {i}")
            out = _activate(z, layer.activation, self.leaky_slope)
            mask = None
            if dropout > 0 and (i < n_layers - 1 or drop_output):
                mask = (rng.random(out.shape) >= dropout) / (1.0 - dropout)
            cache.append((a, z, out, mask))
            a = out if mask is None else out * mask
        return a, cache

    def backward(self, cache, delta_out: np.ndarray, prefix: str = "", out_is_logit_grad=False):
        """Backpropagate ``delta_out`` (gradient w.r.t. the network output).

        With ``out_is_logit_grad`` the incoming gradient is already taken with
        respect to the last layer's pre-activation. Returns the parameter
        gradients and the gradient with respect to the network input.
        """
        grads = {}
        delta = delta_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            a_prev, z, out, mask = cache[i]
            if mask is not None:
                delta = delta * mask
            if not (out_is_logit_grad and i == len(self.layers) - 1):
                delta = delta * _activation_grad(z, out, layer.activation, self.leaky_slope)
            if not np.all(np.isfinite(delta)):
                raise NonFiniteError(f"non-finite gradient at layer {i}")
            grads[f"{prefix}{i}.weights"] = delta.T @ a_prev
            grads[f"{prefix}{i}.bias"] = delta.sum(axis=0)
            delta = delta @ layer.weights
        return grads, delta

    def loss_and_grad(self, X, y, weights: ClassWeights, l2: float = 0.0, dropout: float = 0.0,
                      rng=None, frozen=frozenset()):
        """Mean weighted BCE plus ``l2 * sum(W**2)`` over weight matrices, and its gradient."""
        if self.layers[-1].activation != "sigmoid" or self.output_dim != 1:
            raise ValueError("loss requires a single sigmoid output")
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(y) == 0:
            raise ValueError("empty batch")
        p, cache = self.forward_cache(X, dropout, rng)
        p = p[:, 0]
        w = weights.for_labels(y)
        loss = float(np.mean(weighted_bce(p, y, weights)))
        # d(loss)/d(logit) of sigmoid+BCE, taken before clamping
        delta = (w * (p - y) / len(y))[:, None]
        grads, _ = self.backward(cache, delta, out_is_logit_grad=True)
        for i, layer in enumerate(self.layers):
            loss += l2 * float(np.sum(layer.weights**2))
            grads[f"{i}.weights"] = grads[f"{i}.weights"] + 2.0 * l2 * layer.weights
        return loss, grads

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "leaky_slope": float.hex(self.leaky_slope),
            "layers": [
                {
                    "in_dim": layer.in_dim,
                    "out_dim": layer.out_dim,
                    "activation": layer.activation,
                    "weights": [float.hex(float(v)) for v in layer.weights.ravel()],
                    "bias": [float.hex(float(v)) for v in layer.bias],
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MLPModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError(f"not an MLP document: format={doc.get('format')!r}")
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported MLP document version {doc.get('version')!r}")
        layers = []
        for spec in doc["layers"]:
            w = np.array([float.fromhex(v) for v in spec["weights"]], dtype=float)
            layers.append(
                DenseLayer(
                    w.reshape(spec["out_dim"], spec["in_dim"]),
                    np.array([float.fromhex(v) for v in spec["bias"]], dtype=float),
                    spec["activation"],
                )
            )
        return cls(layers, float.fromhex(doc["leaky_slope"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "MLPModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_mlp(dims: list[int], activations: list[str], seed=None, leaky_slope: float = 0.01) -> MLPModel:
    """Randomly initialised MLP with He-style uniform weights and zero biases.

    ``dims`` lists the input width followed by every layer width.
    """
    if len(dims) != len(activations) + 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        limit = math.sqrt(6.0 / fan_in)
        layers.append(DenseLayer(rng.uniform(-limit, limit, (fan_out, fan_in)), np.zeros(fan_out), act))
    return MLPModel(layers, leaky_slope)


def gradient(model, batch, weights: ClassWeights, l2: float = 0.0) -> dict[str, np.ndarray]:
    """Exact gradients of mean weighted BCE + L2 for a ``(X, y)`` batch, no dropout."""
    X, y = batch
    if len(y) == 0:
        raise ValueError("batch must be non-empty")
    return model.loss_and_grad(X, y, weights, l2)[1]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    lr_halving_patience: int = 5
    batch_size: int = 32
    dropout: float = 0.3
    l2_weight: float = 1e-3
    seed: int = 0
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ValueError("batch_size, max_epochs and patience must be non-negative counts")
        if self.leaky_slope <= 0:
            raise ValueError("leaky_slope must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    learning_rate: float
    improved: bool = False


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def val_aucs(self) -> list[float]:
        return [e.val_auc for e in self.epochs]

    @property
    def best_auc(self) -> float:
        return self.epochs[self.best_epoch].val_auc


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in self.m:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(model, train_set, val_set, config: TrainConfig, weights: ClassWeights,
          frozen: Iterable[str] = ()):
    """Fit ``model`` with mini-batch Adam, keeping the best-validation-AUC weights.

    The untrained model is scored first (epoch 0). After each epoch the
    validation AUC is recomputed; an epoch counts as an improvement only if it
    beats the best so far by more than 1e-6. The learning rate halves every
    ``lr_halving_patience`` consecutive non-improving epochs and training stops
    once ``patience`` of them accumulate. Parameters in ``frozen`` groups are
    never touched.

    Returns a trained copy and its :class:`History`; the input model is not
    modified.
    """
    X, y = (np.asarray(a, dtype=float) for a in train_set)
    Xv, yv = (np.asarray(a, dtype=float) for a in val_set)
    if len(y) == 0:
        raise ValueError("empty training set")
    frozen = frozenset(frozen)
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    params = model.parameters()
    trainable = {k: v for k, v in params.items() if param_group(k) not in frozen}
    adam = _Adam(trainable)
    lr = config.learning_rate

    history = History([EpochRecord(0, math.nan, roc_auc(model.predict_proba(Xv), yv), lr, True)])
    best = {k: v.copy() for k, v in trainable.items()}
    stale = 0
    n = len(y)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = model.loss_and_grad(
                X[idx], y[idx], weights, config.l2_weight, config.dropout, rng, frozen
            )
            adam.step(trainable, grads, lr)
            total += loss * len(idx)
        auc = roc_auc(model.predict_proba(Xv), yv)
        improved = auc > history.best_auc + IMPROVEMENT_EPS
        history.epochs.append(EpochRecord(epoch, total / n, auc, lr, improved))
        if improved:
            history.best_epoch = epoch
            best = {k: v.copy() for k, v in trainable.items()}
            stale = 0
            continue
        stale += 1
        if stale >= config.patience:
            break
        if config.lr_halving_patience > 0 and stale % config.lr_halving_patience == 0:
            lr /= 2.0
    for k, v in best.items():
        trainable[k][...] = v
    return model, history
