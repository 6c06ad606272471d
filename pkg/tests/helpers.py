"""Independent oracles and random instance builders shared by the tests."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from transferkit import nn


def conv_bruteforce(x, filters, biases):
    """Direct 'same' cross-correlation with explicit zero padding, pure loops."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = filters.shape
    h1, h2 = kh // 2, kw // 2
    out = np.zeros((c_out, h, w))
    for i in range(c_out):
        for r in range(h):
            for s in range(w):
                acc = biases[i]
                for j in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            rr, ss = r + u - h1, s + v - h2
                            if 0 <= rr < h and 0 <= ss < w:
                                acc += filters[i, j, u, v] * x[j, rr, ss]
                out[i, r, s] = acc
    return out


def pool_bruteforce(x, f, s):
    c, h, w = x.shape
    ho, wo = (h - f) // s + 1, (w - f) // s + 1
    out = np.empty((c, ho, wo))
    for k in range(c):
        for i in range(ho):
            for j in range(wo):
                out[k, i, j] = max(x[k, i * s + u, j * s + v] for u in range(f) for v in range(f))
    return out


ARCHS = ("dense", "conv", "conv_pool", "conv_relu_pool_conv", "pool_strided")


def random_instance(rng, arch):
    """A small random network, input and one-hot target for gradient checks.

    Weights are scaled by fan-in so logits stay O(1); a saturated softmax
    drives gradients below finite-difference round-off (~1e-11).
    """
    k = int(rng.integers(2, 5))
    if arch == "dense":
        d = int(rng.integers(2, 7))
        layers = [nn.dense_layer(rng, d, k), nn.Softmax()]
        shape = (d,)
    else:
        c = int(rng.integers(1, 3))
        h = int(rng.integers(4, 7))
        w = int(rng.integers(4, 7))
        shape = (c, h, w)
        o = int(rng.integers(1, 3))
        layers = [nn.Conv(rng.normal(size=(o, c, 3, 3)) / np.sqrt(9 * c), 0.1 * rng.normal(size=o))]
        cs = (o, h, w)
        if arch == "conv_relu_pool_conv":
            layers += [nn.ReLU(), nn.MaxPool(2, 2)]
            cs = layers[-1].output_shape(cs)
            layers.append(nn.Conv(rng.normal(size=(2, o, 1, 3)) / np.sqrt(3 * o), 0.1 * rng.normal(size=2)))
            cs = (2,) + cs[1:]
        elif arch == "conv_pool":
            layers.append(nn.MaxPool(2, 2))
            cs = layers[-1].output_shape(cs)
        elif arch == "pool_strided":
            layers.append(nn.MaxPool(3, 1))
            cs = layers[-1].output_shape(cs)
        n = int(np.prod(cs))
        layers += [nn.Flatten(), nn.Dense(rng.normal(size=(k, n)) / np.sqrt(n), 0.1 * rng.normal(size=k)), nn.Softmax()]
    net = nn.Network(tuple(layers), shape)
    # central differences are only valid away from max-pool ties and ReLU
    # zero crossings, so redraw the input until it is
    while True:
        x = rng.normal(size=shape)
        if kink_margin(net, x) >= KINK_MARGIN:
            break
    t = np.eye(k)[rng.integers(k)]
    return net, x, t


KINK_MARGIN = 1e-3


def kink_margin(net, x):
    """Smallest distance of any ReLU input from 0 or of any pool window's
    top-two values from each other."""
    _, cache = nn.forward(net, x)
    margin = np.inf
    for layer, inp in zip(net.layers, cache.inputs):
        if isinstance(layer, nn.ReLU):
            margin = min(margin, np.abs(inp).min())
        elif isinstance(layer, nn.MaxPool):
            f, s = layer.extent, layer.stride
            win = sliding_window_view(inp, (f, f), axis=(2, 3))[:, :, ::s, ::s]
            top2 = np.sort(win.reshape(*win.shape[:4], f * f), axis=-1)[..., -2:]
            if f * f > 1:
                margin = min(margin, (top2[..., 1] - top2[..., 0]).min())
    return margin


# (criterion, passed, detail) rows, printed by conftest at the end of the run
ACCEPTANCE_RESULTS = []
