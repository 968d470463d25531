"""Differentiable layers on float64 (h, w, c) feature maps.

Each layer is functional: ``forward(x) -> (y, cache)`` and
``backward(dy, cache) -> (dx, param_grads)``, with ``param_grads`` aligned
to ``layer.params``. No global state; caches make concurrent forwards on a
frozen net safe.
"""

from __future__ import annotations

import numpy as np

# When enabled, every layer asserts its output is finite (slow; used by tests
# and by training in diagnostic mode).
CHECK_FINITE = False


def _checked(y: np.ndarray) -> np.ndarray:
    if CHECK_FINITE:
        assert np.all(np.isfinite(y)), "non-finite layer output"
    return y


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, (oh, ow, kh, kw, c), (s0 * stride, s1 * stride, s0, s1, s2)
    )
    return patches.reshape(oh * ow, kh * kw * c), oh, ow


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int):
    h, w, c = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    dx = np.zeros((hp, wp, c))
    d = dcols.reshape(oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dx[i : i + oh * stride : stride, j : j + ow * stride : stride] += d[:, :, i, j]
    return dx[pad : pad + h, pad : pad + w]


class Conv2D:
    """kh x kw convolution, stride/pad configurable, He fan-in init."""

    def __init__(self, kh, kw, cin, cout, stride=1, pad=0, rng=None):
        self.kh, self.kw, self.cin, self.cout = kh, kw, cin, cout
        self.stride, self.pad = stride, pad
        rng = rng or np.random.default_rng(0)
        fan_in = kh * kw * cin
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (kh, kw, cin, cout))
        self.b = np.zeros(cout)

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        if x.shape[2] != self.cin:
            raise ValueError(f"expected {self.cin} input channels, got {x.shape[2]}")
        cols, oh, ow = _im2col(x, self.kh, self.kw, self.stride, self.pad)
        y = cols @ self.w.reshape(-1, self.cout) + self.b
        return _checked(y.reshape(oh, ow, self.cout)), (cols, x.shape)

    def backward(self, dy, cache):
        cols, x_shape = cache
        dym = dy.reshape(-1, self.cout)
        dw = (cols.T @ dym).reshape(self.w.shape)
        db = dym.sum(axis=0)
        dcols = dym @ self.w.reshape(-1, self.cout).T
        dx = _col2im(dcols, x_shape, self.kh, self.kw, self.stride, self.pad)
        return dx, [dw, db]


class ReLU:
    params: list = []

    def forward(self, x):
        return _checked(np.maximum(x, 0.0)), x > 0

    def backward(self, dy, cache):
        return dy * cache, []


class MaxPool2x2:
    """2x2 max pooling with stride 2; spatial dims must be even."""

    params: list = []

    def forward(self, x):
        h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max pool needs even spatial dims, got {(h, w)}")
        oh, ow = h // 2, w // 2
        windows = x.reshape(oh, 2, ow, 2, c).transpose(0, 2, 1, 3, 4).reshape(oh, ow, 4, c)
        idx = windows.argmax(axis=2)
        y = np.take_along_axis(windows, idx[:, :, None, :], axis=2)[:, :, 0, :]
        return _checked(y), (idx, x.shape)

    def backward(self, dy, cache):
        idx, (h, w, c) = cache
        oh, ow = h // 2, w // 2
        d = np.zeros((oh, ow, 4, c))
        np.put_along_axis(d, idx[:, :, None, :], dy[:, :, None, :], axis=2)
        dx = d.reshape(oh, ow, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
        return dx, []


class GlobalAvgPool:
    """Average over all spatial positions, keeping a 1x1 map."""

    params: list = []

    def forward(self, x):
        return _checked(x.mean(axis=(0, 1), keepdims=True)), x.shape

    def backward(self, dy, cache):
        h, w, _ = cache
        return np.broadcast_to(dy / (h * w), cache).copy(), []


class HybridReduce:
    """Grid-size reduction that concatenates a stride-2 3x3 convolution with
    a stride-2 2x2 max pool of the same input, preserving spatial detail the
    pooling branch alone would lose. Output: (h/2, w/2, conv_channels + cin)."""

    def __init__(self, cin, conv_channels, rng=None):
        self.conv = Conv2D(3, 3, cin, conv_channels, stride=2, pad=1, rng=rng)
        self.pool = MaxPool2x2()
        self.conv_channels = conv_channels

    @property
    def params(self):
        return self.conv.params

    def forward(self, x):
        h, w, _ = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"hybrid reduce needs even spatial dims, got {(h, w)}")
        a, ca = self.conv.forward(x)
        b, cb = self.pool.forward(x)
        return np.concatenate([a, b], axis=2), (ca, cb)

    def backward(self, dy, cache):
        ca, cb = cache
        d = self.conv_channels
        dxa, gconv = self.conv.backward(dy[:, :, :d], ca)
        dxb, _ = self.pool.backward(dy[:, :, d:], cb)
        return dxa + dxb, gconv


class Dense:
    """Fully connected layer on flat vectors."""

    def __init__(self, n_in, n_out, rng=None):
        rng = rng or np.random.default_rng(0)
        self.w = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in))
        self.b = np.zeros(n_out)

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        return _checked(self.w @ x + self.b), x

    def backward(self, dy, cache):
        return self.w.T @ dy, [np.outer(dy, cache), dy.copy()]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_cross_entropy(logits: np.ndarray, label: int):
    """Returns (loss, probabilities, gradient wrt logits)."""
    probs = softmax(logits)
    loss = -np.log(max(probs[label], 1e-12))
    grad = probs.copy()
    grad[label] -= 1.0
    return float(loss), probs, grad
