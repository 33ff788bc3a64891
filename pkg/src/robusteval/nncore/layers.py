"""Layers with explicit reverse-mode derivatives.

Every layer works on a batch. ``forward`` returns ``(output, cache)`` and
never stores per-call state on the layer, so one model can be evaluated from
several threads. ``backward`` maps the upstream gradient and cache to
``(input_gradient, parameter_gradients)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}

    def forward(self, x, mode="infer", rng=None):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def config(self):
        return {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode="infer", rng=None):
        return x.reshape(len(x), int(np.prod(x.shape[1:]))), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), {}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    kind = "dense"

    def __init__(self, W, b):
        super().__init__()
        self.params = {"W": np.asarray(W, dtype=np.float64), "b": np.asarray(b, dtype=np.float64)}

    def forward(self, x, mode="infer", rng=None):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, grad, cache):
        dW = cache.T @ grad
        return grad @ self.params["W"].T, {"W": dW, "b": grad.sum(axis=0)}

    def output_shape(self, shape):
        return (self.params["W"].shape[1],)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode="infer", rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad, cache):
        return grad * cache, {}


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        self.rate = float(rate)

    def forward(self, x, mode="infer", rng=None):
        if mode != "train" or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, grad, cache):
        return (grad if cache is None else grad * cache), {}

    def config(self):
        return {"rate": self.rate}


class Conv2D(Layer):
    """Valid (unpadded) stride-1 convolution on NHWC batches.

    Kernel ``W`` has shape ``(kh, kw, in_channels, out_channels)``.
    """

    kind = "conv2d"

    def __init__(self, W, b):
        super().__init__()
        self.params = {"W": np.asarray(W, dtype=np.float64), "b": np.asarray(b, dtype=np.float64)}

    def forward(self, x, mode="infer", rng=None):
        kh, kw = self.params["W"].shape[:2]
        # (n, oh, ow, cin, kh, kw)
        cols = sliding_window_view(x, (kh, kw), axis=(1, 2))
        out = np.einsum("nhwcij,ijco->nhwo", cols, self.params["W"], optimize=True)
        return out + self.params["b"], x

    def backward(self, grad, cache):
        W = self.params["W"]
        kh, kw = W.shape[:2]
        cols = sliding_window_view(cache, (kh, kw), axis=(1, 2))
        dW = np.einsum("nhwcij,nhwo->ijco", cols, grad, optimize=True)
        dx = np.zeros_like(cache)
        oh, ow = grad.shape[1:3]
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + oh, j:j + ow, :] += grad @ W[i, j].T
        return dx, {"W": dW, "b": grad.sum(axis=(0, 1, 2))}

    def output_shape(self, shape):
        kh, kw, _, cout = self.params["W"].shape
        return (shape[0] - kh + 1, shape[1] - kw + 1, cout)


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    kind = "maxpool2d"

    def __init__(self, size=2):
        super().__init__()
        self.size = int(size)

    def forward(self, x, mode="infer", rng=None):
        s = self.size
        n, h, w, c = x.shape
        oh, ow = h // s, w // s
        blocks = x[:, :oh * s, :ow * s, :].reshape(n, oh, s, ow, s, c)
        blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, s * s)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, grad, cache):
        shape, arg = cache
        s = self.size
        n, h, w, c = shape
        oh, ow = h // s, w // s
        flat = np.zeros((n, oh, ow, c, s * s))
        np.put_along_axis(flat, arg[..., None], grad[..., None], axis=-1)
        flat = flat.reshape(n, oh, ow, c, s, s).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(shape)
        dx[:, :oh * s, :ow * s, :] = flat.reshape(n, oh * s, ow * s, c)
        return dx, {}

    def output_shape(self, shape):
        return (shape[0] // self.size, shape[1] // self.size, shape[2])

    def config(self):
        return {"size": self.size}


LAYER_TYPES = {cls.kind: cls for cls in (Flatten, Dense, ReLU, Dropout, Conv2D, MaxPool2D)}
