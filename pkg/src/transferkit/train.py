"""Cross-entropy training: full-network SGD and last-layer retraining on
cached bottleneck features from a frozen feature extractor.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .dataset import Dataset
from .errors import ContractError, DataError, NumericError, ShapeError, StaleCacheError, UsageError

log = logging.getLogger(__name__)

CLAMP = 1e-15
EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise UsageError("validation_fraction must be in (0, 1)")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_acc: float
    val_acc: float
    train_ce: float
    val_ce: float


EpochLog = list[EpochRecord]


# --------------------------------------------------------------------------
# loss and update


def cross_entropy(probs, target) -> float:
    """-sum_k t_k ln(max(p_k, 1e-15)) for one example."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"probs shape {p.shape} != target shape {t.shape}")
    return float(-np.sum(t * np.log(np.maximum(p, CLAMP))))


def sgd_step(params, grads, learning_rate: float):
    """theta <- theta - lr * g.

    ``params`` may be a ``Network`` (with ``grads`` from ``nn.backward``), a
    single array, or a sequence of arrays.
    """
    if isinstance(params, nn.Network):
        return nn.apply_update(params, grads, learning_rate)
    if isinstance(params, (list, tuple)):
        if len(params) != len(grads):
            raise ContractError("params and grads differ in length")
        return type(params)(sgd_step(p, g, learning_rate) for p, g in zip(params, grads))
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape:
        raise ContractError(f"grad shape {g.shape} does not match param shape {p.shape}")
    return p - learning_rate * g


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    return np.eye(k)[labels]


# --------------------------------------------------------------------------
# evaluation


def predict(net: nn.Network, inputs) -> np.ndarray:
    """Class probabilities for a batch, computed in fixed-size chunks."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"inputs {x.shape[1:]} do not match network input {net.input_shape}")
    out = [nn.run_layers(net.layers, x[i : i + EVAL_CHUNK]) for i in range(0, len(x), EVAL_CHUNK)]
    return np.concatenate(out)


def split_scores(probs, labels):
    """(accuracy, mean cross-entropy) of predicted probabilities."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise UsageError("cannot evaluate an empty split")
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    picked = probs[np.arange(len(labels)), labels]
    ce = float(np.mean(-np.log(np.maximum(picked, CLAMP))))
    return acc, ce


def evaluate_split(net: nn.Network, inputs, labels=None):
    """Accuracy and mean cross-entropy of ``net`` on a split.

    ``inputs`` is a ``Dataset`` (labels taken from it) or an array batch of
    network inputs, e.g. cached bottleneck vectors for a head-only network.
    """
    if isinstance(inputs, Dataset):
        labels = inputs.labels
        inputs = inputs.volumes()
    if labels is None or len(labels) == 0:
        raise UsageError("cannot evaluate an empty split")
    return split_scores(predict(net, inputs), labels)


# --------------------------------------------------------------------------
# training loop


def _as_arrays(split):
    if isinstance(split, Dataset):
        if not len(split):
            raise UsageError("split is empty")
        return split.volumes(), split.labels
    x, y = split
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise UsageError("split is empty")
    if len(x) != len(y):
        raise DataError("inputs and labels differ in length")
    return x, y


def _scores(net, featurize, n, labels):
    probs = np.concatenate(
        [nn.run_layers(net.layers, featurize(np.arange(i, min(i + EVAL_CHUNK, n)))) for i in range(0, n, EVAL_CHUNK)]
    )
    return split_scores(probs, labels)


def _fit(net, train_feats, y_train, val_feats, y_val, config: TrainConfig, progress=None):
    """Seeded mini-batch SGD over every parameter of ``net``.

    ``train_feats(idx)`` / ``val_feats(idx)`` return network inputs for the
    given example indices.
    """
    k = net.num_classes
    n = len(y_train)
    targets = one_hot(y_train, k)
    one_hot(y_val, k)
    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(config.seed ^ epoch)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            probs, cache = nn.forward_batch(net, train_feats(idx))
            net = nn.apply_update(net, nn.backward(net, cache, targets[idx]), config.learning_rate)
        tr_acc, tr_ce = _scores(net, train_feats, n, y_train)
        va_acc, va_ce = _scores(net, val_feats, len(y_val), y_val)
        if not all(np.isfinite(v) for v in (tr_ce, va_ce)):
            raise NumericError(f"loss diverged at epoch {epoch + 1}")
        rec = EpochRecord(epoch + 1, tr_acc, va_acc, tr_ce, va_ce)
        history.append(rec)
        if progress:
            progress(rec)
        log.info(
            "epoch %d train_acc=%.4f val_acc=%.4f train_ce=%.4f val_ce=%.4f",
            rec.epoch, rec.train_acc, rec.val_acc, rec.train_ce, rec.val_ce,
        )
    return net, history


def train_full(net: nn.Network, train_set, val_set, config: TrainConfig, progress=None):
    """Train every parameter of ``net``. Returns ``(trained_net, epoch_log)``.

    Splits are ``Dataset`` values or ``(inputs, labels)`` pairs.
    """
    xt, yt = _as_arrays(train_set)
    xv, yv = _as_arrays(val_set)
    for x in (xt, xv):
        if x.shape[1:] != net.input_shape:
            raise ShapeError(f"images {x.shape[1:]} do not match network input {net.input_shape}")
    return _fit(net, lambda i: xt[i], yt, lambda i: xv[i], yv, config, progress)


# --------------------------------------------------------------------------
# bottlenecks and head retraining


@dataclass(frozen=True, eq=False)
class BottleneckCache:
    """Frozen-prefix outputs, one row per image id, tagged with a prefix hash."""

    fingerprint: str
    ids: tuple
    features: np.ndarray

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64, copy=True)
        if f.ndim != 2 or len(f) != len(self.ids):
            raise DataError("bottleneck features must be an (n_images, length) array")
        f.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "features", f)

    def __len__(self):
        return len(self.ids)

    @property
    def vector_length(self) -> int:
        return self.features.shape[1]

    def check(self, net: nn.Network) -> None:
        fp = prefix_fingerprint(net)
        if fp != self.fingerprint:
            raise StaleCacheError(f"bottleneck cache fingerprint {self.fingerprint[:12]} != network prefix {fp[:12]}")

    def rows_for(self, ids: Sequence[str]) -> np.ndarray:
        pos = {i: n for n, i in enumerate(self.ids)}
        missing = [i for i in ids if i not in pos]
        if missing:
            raise DataError(f"{len(missing)} ids not in bottleneck cache, e.g. {missing[0]!r}")
        return self.features[[pos[i] for i in ids]]

    def to_text(self) -> str:
        """JSON header line, then one JSON row per image."""
        header = {"fingerprint": self.fingerprint, "vector_length": self.vector_length, "count": len(self)}
        lines = [json.dumps(header, sort_keys=True)]
        for i, row in zip(self.ids, self.features):
            lines.append(json.dumps({"id": i, "features": row.tolist()}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BottleneckCache":
        lines = text.splitlines()
        if not lines:
            raise DataError("empty bottleneck cache file")
        header = json.loads(lines[0])
        rows = [json.loads(l) for l in lines[1:] if l.strip()]
        if len(rows) != header["count"]:
            raise DataError(f"cache header says {header['count']} rows, found {len(rows)}")
        feats = np.array([r["features"] for r in rows], dtype=np.float64).reshape(len(rows), header["vector_length"])
        return cls(header["fingerprint"], tuple(r["id"] for r in rows), feats)


def prefix_fingerprint(net: nn.Network) -> str:
    return nn.fingerprint_layers(net.prefix())


def _prefix_features(prefix, volumes) -> np.ndarray:
    # one image at a time so every feature row is bitwise independent of batching
    return np.stack([nn.run_layers(prefix, v[None])[0] for v in volumes])


def extract_bottlenecks(net: nn.Network, dataset: Dataset) -> BottleneckCache:
    """Run the frozen prefix over every image once."""
    prefix = net.prefix()
    vols = dataset.volumes()
    if vols.shape[1:] != net.input_shape:
        raise ShapeError(f"images {vols.shape[1:]} do not match network input {net.input_shape}")
    return BottleneckCache(prefix_fingerprint(net), tuple(dataset.ids), _prefix_features(prefix, vols))


def holdout_indices(labels, fraction: float, seed: int):
    """Per-class seeded hold-out; returns ``(train_idx, val_idx)`` sorted."""
    labels = np.asarray(labels, dtype=np.int64)
    val = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            continue
        k = min(max(int(round(len(members) * fraction)), 1), len(members) - 1)
        rng = np.random.default_rng([seed, int(c), 1])
        val.extend(members[rng.permutation(len(members))[:k]])
    val = np.sort(np.array(val, dtype=np.int64))
    if len(val) == 0:
        raise UsageError("not enough examples per class to hold out a validation split")
    train = np.setdiff1d(np.arange(len(labels)), val)
    return train, val


def _head_net(in_units: int, class_count: int, seed: int) -> nn.Network:
    head = nn.dense_layer(np.random.default_rng(seed), in_units, class_count)
    return nn.Network((head, nn.Softmax()), (in_units,))


def _check_labels(labels, class_count):
    labels = np.asarray(labels, dtype=np.int64)
    if class_count < 1:
        raise UsageError("class_count must be >= 1")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise DataError(f"labels must lie in [0, {class_count})")
    return labels


def _split_featurizer(features: Callable, labels, config, validation):
    if validation is None:
        tr, va = holdout_indices(labels, config.validation_fraction, config.seed)
        return (lambda i: features(tr[i])), labels[tr], (lambda i: features(va[i])), labels[va]
    val_feats, val_labels = validation
    return features, labels, val_feats, np.asarray(val_labels, dtype=np.int64)


def retrain_head(cache: BottleneckCache, labels, class_count: int, config: TrainConfig, validation=None):
    """Fit a fresh Dense + Softmax head on cached bottleneck vectors.

    ``labels`` align with ``cache.ids``. ``validation`` is an optional
    ``(cache, labels)`` pair; without it ``config.validation_fraction`` of
    each class is held out. Returns ``(Dense, epoch_log)``.
    """
    if not len(cache):
        raise UsageError("bottleneck cache is empty")
    labels = _check_labels(labels, class_count)
    if len(labels) != len(cache):
        raise DataError("labels do not align with the bottleneck cache")
    feats = cache.features
    if validation is not None:
        vcache, vlabels = validation
        if vcache.fingerprint != cache.fingerprint:
            raise StaleCacheError("validation cache comes from a different prefix")
        validation = (lambda i: vcache.features[i], _check_labels(vlabels, class_count))
    tf, ty, vf, vy = _split_featurizer(lambda i: feats[i], labels, config, validation)
    net = _head_net(cache.vector_length, class_count, config.seed)
    net, history = _fit(net, tf, ty, vf, vy, config)
    return net.layers[0], history


def retrain_head_online(net: nn.Network, dataset: Dataset, class_count: int, config: TrainConfig, validation=None):
    """Same as ``retrain_head`` but runs the frozen prefix per batch instead of
    reading a cache. Exists to check that caching changes nothing."""
    prefix = net.prefix()
    vols = dataset.volumes()
    labels = _check_labels(dataset.labels, class_count)
    if validation is not None:
        vvols = validation.volumes()
        validation = (lambda i: _prefix_features(prefix, vvols[i]), _check_labels(validation.labels, class_count))
    tf, ty, vf, vy = _split_featurizer(lambda i: _prefix_features(prefix, vols[i]), labels, config, validation)
    head = _head_net(net.bottleneck_shape()[0], class_count, config.seed)
    head, history = _fit(head, tf, ty, vf, vy, config)
    return head.layers[0], history


def attach_head(net: nn.Network, head: nn.Dense, class_names=()) -> nn.Network:
    """Frozen prefix of ``net`` followed by ``head`` and a Softmax."""
    return nn.Network(net.prefix() + (head, nn.Softmax()), net.input_shape, tuple(class_names))
