"""Small CNN engine: volumes, layers, forward/backward passes, serialization.

Volumes are float64 arrays shaped ``(channels, height, width)``. Internally
every layer works on a leading batch axis, so ``(N, C, H, W)`` for spatial
layers and ``(N, D)`` after ``Flatten``.

Layers are immutable. Training produces new ``Network`` values instead of
mutating parameters in place.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError, UsageError

MODEL_FORMAT = "transferkit-model"
MODEL_VERSION = 1


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def volume(data) -> np.ndarray:
    """Validate and return ``data`` as a (C, H, W) float64 volume."""
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 1:
        raise ShapeError(f"volume must be 3-D with all dims >= 1, got shape {v.shape}")
    return v


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# layers


@dataclass(frozen=True, eq=False)
class Conv:
    """'Same' convolution (cross-correlation) with a bank of odd-sized filters.

    ``filters`` is indexed ``[out, in, u, v]`` with spatial size
    ``(2*h1 + 1, 2*h2 + 1)``; ``biases`` has one entry per output channel.
    """

    filters: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        f = _frozen(self.filters)
        b = _frozen(self.biases)
        if f.ndim != 4 or min(f.shape) < 1:
            raise ShapeError(f"conv filters must be 4-D, got shape {f.shape}")
        if f.shape[2] % 2 == 0 or f.shape[3] % 2 == 0:
            raise ShapeError(f"conv filter spatial dims must be odd, got {f.shape[2:]}")
        if b.shape != (f.shape[0],):
            raise ShapeError(f"conv biases must have shape ({f.shape[0]},), got {b.shape}")
        _check_finite(f, "conv filters")
        _check_finite(b, "conv biases")
        object.__setattr__(self, "filters", f)
        object.__setattr__(self, "biases", b)

    kind = "conv"

    @property
    def out_channels(self) -> int:
        return self.filters.shape[0]

    @property
    def in_channels(self) -> int:
        return self.filters.shape[1]

    @property
    def half_height(self) -> int:
        return self.filters.shape[2] // 2

    @property
    def half_width(self) -> int:
        return self.filters.shape[3] // 2

    def params(self):
        return (self.filters, self.biases)

    def with_params(self, filters, biases) -> "Conv":
        return Conv(filters, biases)

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"conv expects a 3-D volume, got shape {tuple(shape)}")
        if shape[0] != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {shape[0]}")
        return (self.out_channels, shape[1], shape[2])

    def _pad(self, x):
        h1, h2 = self.half_height, self.half_width
        return np.pad(x, ((0, 0), (0, 0), (h1, h1), (h2, h2)))

    def forward(self, x):
        kh, kw = self.filters.shape[2:]
        win = sliding_window_view(self._pad(x), (kh, kw), axis=(2, 3))
        # win: (N, C, H, W, kh, kw)
        y = np.tensordot(win, self.filters, axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + self.biases[None, :, None, None]
        return np.ascontiguousarray(y), None

    def backward(self, dy, x, aux):
        kh, kw = self.filters.shape[2:]
        win = sliding_window_view(self._pad(x), (kh, kw), axis=(2, 3))
        d_filters = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
        d_biases = dy.sum(axis=(0, 2, 3))
        # dx[y, x] = sum_o,u,v dy[y + h1 - u, x + h2 - v] * K[u, v]: a 'same'
        # correlation of dy with the flipped, channel-transposed filter bank
        dwin = sliding_window_view(self._pad(dy), (kh, kw), axis=(2, 3))
        flipped = self.filters[:, :, ::-1, ::-1]
        dx = np.tensordot(dwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), (d_filters, d_biases)


@dataclass(frozen=True)
class MaxPool:
    """Max pooling with window ``extent`` and step ``stride``; records argmax switches."""

    extent: int
    stride: int

    kind = "pool"

    def __post_init__(self):
        if int(self.extent) < 1 or int(self.stride) < 1:
            raise ShapeError(f"pool extent and stride must be >= 1, got F={self.extent}, S={self.stride}")

    def params(self):
        return ()

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"pool expects a 3-D volume, got shape {tuple(shape)}")
        c, h, w = shape
        f, s = self.extent, self.stride
        if f > h or f > w:
            raise ShapeError(f"pool extent {f} exceeds spatial dims {h}x{w}")
        return (c, (h - f) // s + 1, (w - f) // s + 1)

    def forward(self, x):
        f, s = self.extent, self.stride
        n, c, h, w = x.shape
        self.output_shape((c, h, w))
        win = sliding_window_view(x, (f, f), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(*win.shape[:4], f * f)
        switches = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, switches[..., None], axis=-1)[..., 0]
        return y, switches

    def backward(self, dy, x, switches):
        f, s = self.extent, self.stride
        n, c, ho, wo = dy.shape
        nn_, cc, ii, jj = np.indices((n, c, ho, wo), sparse=False)
        rows = ii * s + switches // f
        cols = jj * s + switches % f
        dx = np.zeros_like(x)
        np.add.at(dx, (nn_, cc, rows, cols), dy)
        return dx, ()


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def params(self):
        return ()

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return np.maximum(x, 0.0), None

    def backward(self, dy, x, aux):
        return dy * (x > 0), ()


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def params(self):
        return ()

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), None

    def backward(self, dy, x, aux):
        return dy.reshape(x.shape), ()


@dataclass(frozen=True, eq=False)
class Dense:
    """Fully-connected pre-activation ``z = W @ y + b``; ``weights`` is (out, in)."""

    weights: np.ndarray
    biases: np.ndarray

    kind = "dense"

    def __post_init__(self):
        w = _frozen(self.weights)
        b = _frozen(self.biases)
        if w.ndim != 2 or min(w.shape) < 1:
            raise ShapeError(f"dense weights must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"dense biases must have shape ({w.shape[0]},), got {b.shape}")
        _check_finite(w, "dense weights")
        _check_finite(b, "dense biases")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def out_units(self) -> int:
        return self.weights.shape[0]

    @property
    def in_units(self) -> int:
        return self.weights.shape[1]

    def params(self):
        return (self.weights, self.biases)

    def with_params(self, weights, biases) -> "Dense":
        return Dense(weights, biases)

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_units:
            raise ShapeError(f"dense expects a vector of length {self.in_units}, got shape {tuple(shape)}")
        return (self.out_units,)

    def forward(self, x):
        return x @ self.weights.T + self.biases, None

    def backward(self, dy, x, aux):
        return dy @ self.weights, (dy.T @ x, dy.sum(axis=0))


@dataclass(frozen=True)
class Softmax:
    kind = "softmax"

    def params(self):
        return ()

    def output_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError(f"softmax expects a vector, got shape {tuple(shape)}")
        return tuple(shape)

    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True), None


Layer = Conv | MaxPool | ReLU | Flatten | Dense | Softmax


# --------------------------------------------------------------------------
# single-volume operations


def conv_forward(input, params: Conv) -> np.ndarray:
    x = volume(input)
    params.output_shape(x.shape)
    _check_finite(x, "conv input")
    return params.forward(x[None])[0][0]


def pool_forward(input, spec: MaxPool):
    """Max-pool one volume. Returns ``(output, switches)``.

    ``switches[c, i, j]`` is the flat index ``u * F + v`` of the winning
    element inside window ``(i, j)``.
    """
    x = volume(input)
    spec.output_shape(x.shape)
    y, sw = spec.forward(x[None])
    return y[0], sw[0]


def dense_forward(input, params: Dense) -> np.ndarray:
    x = np.asarray(input, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"dense input must be a flat vector, got shape {x.shape}")
    params.output_shape(x.shape)
    return params.forward(x[None])[0][0]


def relu(input) -> np.ndarray:
    return np.maximum(np.asarray(input, dtype=np.float64), 0.0)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError("softmax needs a non-empty vector")
    _check_finite(z, "softmax logits")
    return Softmax().forward(z[None])[0][0]


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True, eq=False)
class Network:
    """Ordered layer stack ending in ``Softmax``.

    ``head_index`` is the position of the last ``Dense`` layer; everything
    before it is the frozen feature extractor during head retraining. A net
    made only of a ``Softmax`` has ``head_index`` None.
    """

    layers: tuple
    input_shape: tuple
    class_names: tuple = ()
    head_index: int | None = field(default=None)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not layers or not isinstance(layers[-1], Softmax):
            raise ShapeError("network must end with a Softmax layer")
        if sum(isinstance(l, Softmax) for l in layers) != 1:
            raise ShapeError("network must contain exactly one Softmax layer")
        shape = self.input_shape
        shapes = [shape]
        for i, layer in enumerate(layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
            shapes.append(shape)
        object.__setattr__(self, "shapes", tuple(shapes))
        dense = [i for i, l in enumerate(layers) if isinstance(l, Dense)]
        head = dense[-1] if dense else None
        if self.head_index is not None and self.head_index != head:
            raise ShapeError(f"head_index {self.head_index} does not point at the final Dense layer ({head})")
        object.__setattr__(self, "head_index", head)
        if self.class_names and len(self.class_names) != shape[0]:
            raise ShapeError(f"{len(self.class_names)} class names for {shape[0]} outputs")

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def replace_layers(self, layers, class_names=None) -> "Network":
        names = self.class_names if class_names is None else class_names
        return Network(tuple(layers), self.input_shape, names)

    def prefix(self) -> tuple:
        """Layers of the frozen feature extractor (before the head)."""
        if self.head_index is None:
            raise ContractError("network has no Dense head")
        return self.layers[: self.head_index]

    def bottleneck_shape(self) -> tuple:
        return self.shapes[self.head_index]


@dataclass(frozen=True, eq=False)
class ActivationCache:
    """Per-layer inputs and auxiliary state from one ``forward`` call."""

    network: Network
    inputs: tuple
    aux: tuple
    probs: np.ndarray


def _forward_batch(layers, x):
    inputs, aux = [], []
    for layer in layers:
        inputs.append(x)
        x, a = layer.forward(x)
        aux.append(a)
    return x, inputs, aux


def forward_batch(net: Network, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    _check_finite(x, "network input")
    probs, inputs, aux = _forward_batch(net.layers, x)
    return probs, ActivationCache(net, tuple(inputs), tuple(aux), probs)


def forward(net: Network, input):
    """Run one input through ``net``. Returns ``(probabilities, cache)``."""
    x = np.asarray(input, dtype=np.float64)
    probs, cache = forward_batch(net, x[None])
    return probs[0], cache


def run_layers(layers: Sequence, batch) -> np.ndarray:
    """Forward a batch through an arbitrary layer slice (no cache kept)."""
    x = np.asarray(batch, dtype=np.float64)
    for layer in layers:
        x, _ = layer.forward(x)
    return x


def backward(net: Network, cache: ActivationCache, target):
    """Gradients of the mean cross-entropy over the cached batch.

    ``target`` is a one-hot vector, or an (N, k) one-hot matrix for a
    batch. Returns a list aligned with ``net.layers``: a tuple of arrays
    matching ``layer.params()`` (empty for parameter-free layers).
    """
    if cache.network is not net:
        raise ContractError("activation cache was produced by a different network")
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t[None]
    if t.shape != cache.probs.shape:
        raise ContractError(f"target shape {t.shape} does not match output shape {cache.probs.shape}")
    n = t.shape[0]
    # softmax + cross-entropy: dL/dlogits = p - t
    dy = (cache.probs - t) / n
    grads = [()] * len(net.layers)
    for i in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[i]
        dy, g = layer.backward(dy, cache.inputs[i], cache.aux[i])
        grads[i] = g
    return grads


def logit_gradient(probs, target) -> np.ndarray:
    return np.asarray(probs, dtype=np.float64) - np.asarray(target, dtype=np.float64)


def apply_update(net: Network, grads, learning_rate: float) -> Network:
    if len(grads) != len(net.layers):
        raise ContractError("gradient list does not match network layers")
    layers = []
    for layer, g in zip(net.layers, grads):
        p = layer.params()
        if len(p) != len(g):
            raise ContractError(f"gradient arity mismatch for {layer.kind} layer")
        if p:
            for a, b in zip(p, g):
                if a.shape != np.shape(b):
                    raise ContractError(f"gradient shape {np.shape(b)} does not match parameter {a.shape}")
            layer = layer.with_params(*(a - learning_rate * b for a, b in zip(p, g)))
        layers.append(layer)
    return net.replace_layers(layers)


def _loss(net, x, target):
    p, _ = forward(net, x)
    return float(-np.sum(target * np.log(np.maximum(p, 1e-15))))


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


def numeric_gradients(net: Network, input, target, eps: float = 1e-5):
    """Central finite-difference gradients of the cross-entropy."""
    target = np.asarray(target, dtype=np.float64)
    out = []
    for li, layer in enumerate(net.layers):
        params = layer.params()
        gs = []
        for pi, p in enumerate(params):
            g = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                vals = []
                for sign in (1.0, -1.0):
                    q = [a.copy() for a in params]
                    q[pi][idx] += sign * eps
                    layers = list(net.layers)
                    layers[li] = layer.with_params(*q)
                    vals.append(_loss(net.replace_layers(layers), input, target))
                g[idx] = (vals[0] - vals[1]) / (2 * eps)
            gs.append(g)
        out.append(tuple(gs))
    return out


def grad_check(net: Network, input, target, eps: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences."""
    if not eps > 0:
        raise UsageError("eps must be positive")
    _, cache = forward(net, input)
    analytic = backward(net, cache, target)
    numeric = numeric_gradients(net, input, target, eps)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        for a, n in zip(ga, gn):
            if np.size(a):
                worst = max(worst, float(relative_error(a, n).max()))
    return worst


# --------------------------------------------------------------------------
# construction helpers


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def conv_layer(rng, in_channels, out_channels, half=1) -> Conv:
    k = 2 * half + 1
    w = glorot(rng, (out_channels, in_channels, k, k), in_channels * k * k, out_channels * k * k)
    return Conv(w, np.zeros(out_channels))


def dense_layer(rng, in_units, out_units) -> Dense:
    return Dense(glorot(rng, (out_units, in_units), in_units, out_units), np.zeros(out_units))


def small_cnn(input_shape, num_classes: int, channels=(8, 16), seed: int = 0, class_names=()) -> Network:
    """conv-relu-pool blocks, then flatten -> dense head -> softmax."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = []
    for out in channels:
        layers += [conv_layer(rng, c, out), ReLU(), MaxPool(2, 2)]
        c, h, w = out, (h - 2) // 2 + 1, (w - 2) // 2 + 1
    layers += [Flatten(), dense_layer(rng, c * h * w, num_classes), Softmax()]
    return Network(tuple(layers), tuple(input_shape), class_names)


def with_new_head(net: Network, num_classes: int, seed: int, class_names=()) -> Network:
    """Keep the feature extractor, replace the final Dense with a fresh one."""
    in_units = net.bottleneck_shape()[0]
    head = dense_layer(np.random.default_rng(seed), in_units, num_classes)
    return Network(net.prefix() + (head, Softmax()), net.input_shape, class_names)


# --------------------------------------------------------------------------
# fingerprints and serialization


def fingerprint_layers(layers: Sequence) -> str:
    """SHA-256 over layer kinds, shapes and raw parameter bytes."""
    h = hashlib.sha256()
    for layer in layers:
        h.update(layer.kind.encode())
        if isinstance(layer, MaxPool):
            h.update(f"{layer.extent},{layer.stride}".encode())
        for p in layer.params():
            h.update(repr(p.shape).encode())
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Conv):
        return {
            "type": "conv",
            "out_channels": layer.out_channels,
            "in_channels": layer.in_channels,
            "half_height": layer.half_height,
            "half_width": layer.half_width,
            "filters": layer.filters.ravel().tolist(),
            "biases": layer.biases.tolist(),
        }
    if isinstance(layer, MaxPool):
        return {"type": "pool", "kind": "max", "extent": layer.extent, "stride": layer.stride}
    if isinstance(layer, Dense):
        return {
            "type": "dense",
            "out_units": layer.out_units,
            "in_units": layer.in_units,
            "weights": layer.weights.ravel().tolist(),
            "biases": layer.biases.tolist(),
        }
    return {"type": layer.kind}


def _layer_from_dict(d: dict):
    t = d.get("type")
    if t == "conv":
        shape = (d["out_channels"], d["in_channels"], 2 * d["half_height"] + 1, 2 * d["half_width"] + 1)
        return Conv(np.array(d["filters"], dtype=np.float64).reshape(shape), d["biases"])
    if t == "pool":
        if d.get("kind", "max") != "max":
            raise ShapeError(f"unsupported pool kind {d['kind']!r}")
        return MaxPool(int(d["extent"]), int(d["stride"]))
    if t == "dense":
        shape = (d["out_units"], d["in_units"])
        return Dense(np.array(d["weights"], dtype=np.float64).reshape(shape), d["biases"])
    simple = {"relu": ReLU, "flatten": Flatten, "softmax": Softmax}
    if t not in simple:
        raise ShapeError(f"unknown layer type {t!r}")
    return simple[t]()


def network_to_json(net: Network) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "input_shape": list(net.input_shape),
        "head_index": net.head_index,
        "class_names": list(net.class_names),
        "layers": [
            dict(_layer_to_dict(l), output_shape=list(s)) for l, s in zip(net.layers, net.shapes[1:])
        ],
    }
    # repr-based float formatting is shortest round-trip, so load is bitwise exact
    return json.dumps(doc, indent=1) + "\n"


def network_from_json(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ShapeError(f"model file is not valid JSON: {e}") from None
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ShapeError(f"unsupported model format {doc.get('format')!r} v{doc.get('version')}")
    layers = tuple(_layer_from_dict(d) for d in doc["layers"])
    net = Network(layers, tuple(doc["input_shape"]), tuple(doc.get("class_names", ())), doc.get("head_index"))
    for i, (d, s) in enumerate(zip(doc["layers"], net.shapes[1:])):
        if "output_shape" in d and tuple(d["output_shape"]) != s:
            raise ShapeError(f"layer {i}: declared output shape {d['output_shape']} != computed {list(s)}")
    return net
