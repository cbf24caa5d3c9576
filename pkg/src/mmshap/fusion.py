"""Early-fusion multimodal classifier built from per-modality encoders.

Each modality goes through its own encoder; the encoder outputs are
concatenated in a fixed order and fed to a dense head ending in one sigmoid
unit. Encoders are pre-trained as unimodal classifiers and then frozen while
the head trains, after which selected encoders are fine-tuned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from mmshap.nn import (
    ClassWeights,
    DenseLayer,
    MLPModel,
    TrainConfig,
    build_mlp,
    class_weights_from_labels,
    train,
    weighted_bce,
)

MODALITY_ORDER = ("static", "hip", "chest", "vitals", "med")
FEATURE_DIMS = (16, 16, 16, 16, 17)
# raw encoder inputs: static columns, two image embeddings, vitals summary, medication flags
INPUT_DIMS = (76, 32, 32, 36, 17)
HEAD_HIDDEN = 64
IMAGE_MODALITIES = ("hip", "chest")
STAGE2_UNFROZEN = ("static", "vitals")
BUNDLE_FORMAT = "mmshap.bundle"


class MissingModalityError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityPartition:
    """Ordered modality names and the length each occupies in a concatenated vector."""

    names: tuple[str, ...] = MODALITY_ORDER
    lengths: tuple[int, ...] = FEATURE_DIMS

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lengths", tuple(int(n) for n in self.lengths))
        if len(self.names) != len(self.lengths) or not self.names:
            raise ValueError("need one length per modality")
        if len(set(self.names)) != len(self.names):
            raise ValueError("modality names must be unique")
        if any(n <= 0 for n in self.lengths):
            raise ValueError("modality lengths must be positive")

    @property
    def total(self) -> int:
        return sum(self.lengths)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.cumsum((0,) + self.lengths[:-1]))

    def slice(self, name: str) -> slice:
        i = self.names.index(name)
        start = self.offsets[i]
        return slice(start, start + self.lengths[i])

    def slices(self) -> dict[str, slice]:
        return {name: self.slice(name) for name in self.names}

    def subset(self, names) -> "ModalityPartition":
        keep = [n for n in self.names if n in set(names)]
        return ModalityPartition(tuple(keep), tuple(self.lengths[self.names.index(n)] for n in keep))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "lengths": list(self.lengths)}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModalityPartition":
        return cls(tuple(doc["names"]), tuple(doc["lengths"]))


def concat_features(per_modality: dict, partition: ModalityPartition) -> np.ndarray:
    """Concatenate per-modality vectors (or row batches) in partition order."""
    parts = []
    for name, length in zip(partition.names, partition.lengths):
        if name not in per_modality:
            raise MissingModalityError(f"modality {name!r} absent: model not robust against missing modalities")
        v = np.asarray(per_modality[name], dtype=float)
        if v.shape[-1] != length:
            raise ValueError(f"modality {name!r} has {v.shape[-1]} features, expected {length}")
        parts.append(v)
    return np.concatenate(parts, axis=-1)


def identity_encoder(dim: int) -> MLPModel:
    return MLPModel([DenseLayer(np.eye(dim), np.zeros(dim), "identity")])


class MultimodalModel:
    """Per-modality encoders feeding a shared dense head.

    Input rows are the raw modality vectors concatenated in ``partition``
    order (see :attr:`input_partition`). Encoders listed in ``passthrough``
    are fixed identity maps and never trained.
    """

    def __init__(self, encoders: dict[str, MLPModel], head: MLPModel,
                 partition: ModalityPartition = ModalityPartition(), passthrough=("med",)):
        self.partition = partition
        self.encoders = {name: encoders[name] for name in partition.names}
        self.head = head
        self.passthrough = tuple(p for p in passthrough if p in partition.names)
        for name, length in zip(partition.names, partition.lengths):
            if self.encoders[name].output_dim != length:
                raise ValueError(
                    f"encoder {name!r} outputs {self.encoders[name].output_dim} features, partition says {length}"
                )
        if head.input_dim != partition.total:
            raise ValueError(f"head expects {head.input_dim} inputs, partition covers {partition.total}")
        if head.output_dim != 1 or head.layers[-1].activation != "sigmoid":
            raise ValueError("head must end in a single sigmoid unit")
        self.input_partition = ModalityPartition(
            partition.names, tuple(self.encoders[n].input_dim for n in partition.names)
        )

    def __repr__(self):
        return f"MultimodalModel(modalities={list(self.partition.names)}, features={self.partition.total})"

    def split_inputs(self, X) -> dict[str, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_partition.total:
            raise ValueError(f"expected {self.input_partition.total} raw inputs, got {X.shape[1]}")
        return {name: X[:, sl] for name, sl in self.input_partition.slices().items()}

    def encode(self, X) -> np.ndarray:
        """Concatenated encoder outputs ``H`` for raw input rows."""
        single = np.ndim(X) == 1
        parts = self.split_inputs(X)
        H = concat_features({n: self.encoders[n].forward(parts[n]) for n in self.partition.names}, self.partition)
        return H[0] if single else H

    def predict_proba(self, X) -> np.ndarray:
        return self.head.predict_proba(self.encode(np.atleast_2d(X)))

    def logit(self, X) -> np.ndarray:
        """Pre-sigmoid output of the head."""
        H = self.encode(np.atleast_2d(X))
        body = MLPModel(self.head.layers[:-1], self.head.leaky_slope) if len(self.head.layers) > 1 else None
        a = body.forward(H) if body else H
        last = self.head.layers[-1]
        return (a @ last.weights.T + last.bias)[:, 0]

    def raw_inputs(self, per_modality: dict) -> np.ndarray:
        return concat_features(per_modality, self.input_partition)

    def trainable_groups(self) -> tuple[str, ...]:
        return tuple(n for n in self.partition.names if n not in self.passthrough) + ("head",)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for name in self.partition.names:
            if name in self.passthrough:
                continue
            for k, v in self.encoders[name].parameters().items():
                params[f"{name}.{k}"] = v
        for k, v in self.head.parameters().items():
            params[f"head.{k}"] = v
        return params

    def copy(self) -> "MultimodalModel":
        return MultimodalModel({n: e.copy() for n, e in self.encoders.items()}, self.head.copy(),
                               self.partition, self.passthrough)

    def loss_and_grad(self, X, y, weights: ClassWeights, l2: float = 0.0, dropout: float = 0.0,
                      rng=None, frozen=frozenset()):
        """Mean weighted BCE + L2 on every trainable weight matrix, with gradients.

        Dropout (when enabled) is applied inside encoders and to the
        concatenated feature vector. Frozen encoders are evaluated without a
        backward pass.
        """
        y = np.asarray(y, dtype=float)
        parts = self.split_inputs(X)
        frozen = set(frozen) | set(self.passthrough)
        caches, feats = {}, {}
        for name in self.partition.names:
            enc = self.encoders[name]
            if name in frozen:
                feats[name] = enc.forward(parts[name])
            else:
                feats[name], caches[name] = enc.forward_cache(parts[name], dropout, rng)
        H = concat_features(feats, self.partition)
        mask = None
        if dropout > 0:
            mask = (rng.random(H.shape) >= dropout) / (1.0 - dropout)
            H = H * mask
        p, head_cache = self.head.forward_cache(H, dropout, rng)
        p = p[:, 0]
        loss = float(np.mean(weighted_bce(p, y, weights)))
        delta = (weights.for_labels(y) * (p - y) / len(y))[:, None]
        grads = {}
        if "head" not in frozen or caches:
            g, dH = self.head.backward(head_cache, delta, prefix="head.", out_is_logit_grad=True)
            grads.update(g)
            if mask is not None:
                dH = dH * mask
            for name, cache in caches.items():
                g, _ = self.encoders[name].backward(cache, dH[:, self.partition.slice(name)], prefix=f"{name}.")
                grads.update(g)
        params = self.parameters()
        for key, value in params.items():
            if key.endswith(".weights"):
                loss += l2 * float(np.sum(value**2))
                if key in grads:
                    grads[key] = grads[key] + 2.0 * l2 * value
        return loss, grads

    # -- bundle I/O ---------------------------------------------------------

    def save(self, directory) -> None:
        """Write one model document per encoder, the head and the partition."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, enc in self.encoders.items():
            files[name] = f"encoder_{name}.json"
            enc.save(d / files[name])
        self.head.save(d / "head.json")
        (d / "partition.json").write_text(json.dumps(self.partition.to_dict(), indent=1) + "\n")
        manifest = {
            "format": BUNDLE_FORMAT,
            "version": 1,
            "encoders": files,
            "head": "head.json",
            "partition": "partition.json",
            "passthrough": list(self.passthrough),
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "MultimodalModel":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"{d} is not a model bundle")
        partition = ModalityPartition.from_dict(json.loads((d / manifest["partition"]).read_text()))
        encoders = {name: MLPModel.load(d / f) for name, f in manifest["encoders"].items()}
        return cls(encoders, MLPModel.load(d / manifest["head"]), partition, tuple(manifest["passthrough"]))


def predict(model: MultimodalModel, inputs) -> float:
    """Mortality probability for one case given ``{modality: raw vector}`` or a raw row."""
    if isinstance(inputs, dict):
        inputs = model.raw_inputs(inputs)
    return float(model.predict_proba(np.asarray(inputs, dtype=float))[0])


# ---------------------------------------------------------------------------
# Construction and training
# ---------------------------------------------------------------------------


def build_encoders(seed=0, leaky_slope: float = 0.01, names=MODALITY_ORDER,
                   input_dims=INPUT_DIMS, feature_dims=FEATURE_DIMS) -> dict[str, MLPModel]:
    """One dense leaky-ReLU layer per modality; medication is passed through unchanged."""
    seeds = np.random.SeedSequence(seed).spawn(len(names))
    encoders = {}
    for name, n_in, n_out, s in zip(names, input_dims, feature_dims, seeds):
        if name == "med":
            encoders[name] = identity_encoder(n_in)
        else:
            encoders[name] = build_mlp([n_in, n_out], ["leaky_relu"], np.random.default_rng(s), leaky_slope)
    return encoders


def build_head(n_in: int, seed=0, hidden: int = HEAD_HIDDEN, leaky_slope: float = 0.01) -> MLPModel:
    return build_mlp([n_in, hidden, 1], ["leaky_relu", "sigmoid"], seed, leaky_slope)


def build_model(encoders: dict[str, MLPModel], names=MODALITY_ORDER, seed=0, leaky_slope: float = 0.01):
    """Fuse the named encoders (copied) under a freshly initialised head."""
    partition = ModalityPartition(tuple(names), tuple(encoders[n].output_dim for n in names))
    head = build_head(partition.total, seed, leaky_slope=leaky_slope)
    return MultimodalModel({n: encoders[n].copy() for n in names}, head, partition)


def unimodal_wrap(encoder: MLPModel, seed=0) -> MLPModel:
    """Append a one-unit sigmoid classifier so the encoder can be trained on the label."""
    clf = build_mlp([encoder.output_dim, 1], ["sigmoid"], seed, encoder.leaky_slope)
    return MLPModel(encoder.copy().layers + clf.layers, encoder.leaky_slope)


def strip_classifier(wrapped: MLPModel) -> MLPModel:
    """Inverse of :func:`unimodal_wrap`: drop the classification layer."""
    if len(wrapped.layers) < 2:
        raise ValueError("nothing left after removing the classifier")
    return MLPModel([DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in wrapped.layers[:-1]],
                    wrapped.leaky_slope)


def pretrain_encoder(encoder: MLPModel, train_set, val_set, config: TrainConfig,
                     weights: ClassWeights | None = None):
    """Train a wrapped unimodal classifier; returns ``(encoder, classifier, history)``.

    The classification layer is discarded for transfer; the returned
    classifier is kept for unimodal evaluation.
    """
    weights = weights or class_weights_from_labels(train_set[1])
    wrapped = unimodal_wrap(encoder, config.seed)
    fitted, history = train(wrapped, train_set, val_set, config, weights)
    return strip_classifier(fitted), fitted, history


def staged_train(model: MultimodalModel, train_set, val_set, stage1_lr: float = 5e-2,
                 stage2_lr: float = 5e-3, config: TrainConfig = TrainConfig(),
                 weights: ClassWeights | None = None, stage2_epochs: int | None = None,
                 unfreeze=STAGE2_UNFROZEN):
    """Two-stage fusion training.

    Stage 1 trains the head with every encoder frozen. Stage 2 also unfreezes
    the encoders in ``unfreeze`` (image encoders stay frozen) at the lower
    learning rate. Returns the model and both histories.
    """
    weights = weights or class_weights_from_labels(train_set[1])
    encoders = [n for n in model.partition.names if n not in model.passthrough]
    cfg1 = replace(config, learning_rate=stage1_lr)
    stage1, hist1 = train(model, train_set, val_set, cfg1, weights, frozen=encoders)
    cfg2 = replace(
        config,
        learning_rate=stage2_lr,
        seed=config.seed + 1,
        max_epochs=config.max_epochs if stage2_epochs is None else stage2_epochs,
    )
    still_frozen = [n for n in encoders if n not in set(unfreeze)]
    stage2, hist2 = train(stage1, train_set, val_set, cfg2, weights, frozen=still_frozen)
    return stage2, (hist1, hist2)
