"""Differentiable 1D layers with exact reverse-mode gradients.

Layers operate on (batch, channels, length) float arrays.  `forward` caches
whatever `backward` needs, so one layer instance belongs to exactly one graph
and must not run forward/backward concurrently.  All layers preserve the
dtype of their input; running a graph in float64 turns the whole stack into
a verification-grade computation for gradient checking.

Convolutions follow the deep-learning convention (cross-correlation, no
kernel flip).  Padding modes:

* ``valid``  - no padding, output shrinks,
* ``same``   - zero padding that preserves length at stride 1 (odd total
  padding puts the extra sample on the right),
* ``causal`` - left-only zero padding of dilation*(kernel-1), so output t
  never sees inputs after t.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng

PAD_MODES = ("valid", "same", "causal")

# im2col buffers are chunked along the batch axis to stay below this size
_COLS_BYTES_LIMIT = 128 * 1024 * 1024


class Layer:
    """Base node: named parameter tensors, matching grads, running buffers."""

    kind = "base"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.config: dict = {}

    def init_params(self, rng: Rng, dtype) -> None:
        """Allocate parameters; default layers have none."""

    def forward(self, inputs: list[np.ndarray], mode: str = "eval", rng: Rng | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gout: np.ndarray) -> list[np.ndarray]:
        """Gradients w.r.t. every forward input; also fills self.grads."""
        raise NotImplementedError

    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def astype(self, dtype) -> None:
        dtype = np.dtype(dtype)
        for d in (self.params, self.grads, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)

    def describe(self) -> str:
        cfg = ", ".join(f"{k}={v}" for k, v in self.config.items())
        return f"{self.kind}({cfg})"


def glorot_uniform(rng: Rng, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 padding: str = "valid", dilation: int = 1, stride: int = 1):
        super().__init__()
        if padding not in PAD_MODES:
            raise ValueError(f"unknown padding mode {padding!r}, expected one of {PAD_MODES}")
        if kernel_size < 1 or dilation < 1 or stride < 1:
            raise ValueError("kernel_size, dilation and stride must be >= 1")
        self.config = dict(in_channels=in_channels, out_channels=out_channels,
                           kernel_size=kernel_size, padding=padding,
                           dilation=dilation, stride=stride)

    def init_params(self, rng: Rng, dtype) -> None:
        c = self.config
        k, cin, cout = c["kernel_size"], c["in_channels"], c["out_channels"]
        self.params["w"] = glorot_uniform(rng, (cout, cin, k), cin * k, cout * k, dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)

    def _pad_amounts(self) -> tuple[int, int]:
        c = self.config
        total = c["dilation"] * (c["kernel_size"] - 1)
        if c["padding"] == "valid":
            return 0, 0
        if c["padding"] == "causal":
            return total, 0
        return total // 2, total - total // 2

    def output_length(self, length: int) -> int:
        c = self.config
        pl, pr = self._pad_amounts()
        eff = c["dilation"] * (c["kernel_size"] - 1) + 1
        return (length + pl + pr - eff) // c["stride"] + 1

    def _windows(self, xp: np.ndarray, lout: int) -> np.ndarray:
        """Strided view (batch, cin, lout, kernel) over the padded input."""
        c = self.config
        eff = c["dilation"] * (c["kernel_size"] - 1) + 1
        win = sliding_window_view(xp, eff, axis=2)
        return win[:, :, :: c["stride"], :: c["dilation"]][:, :, :lout]

    def forward(self, inputs, mode="eval", rng=None):
        (x,) = inputs
        c = self.config
        if x.shape[1] != c["in_channels"]:
            raise ValueError(f"conv1d expected {c['in_channels']} input channels, got {x.shape[1]}")
        pl, pr = self._pad_amounts()
        lout = self.output_length(x.shape[2])
        if lout <= 0:
            raise ValueError(f"conv1d output length {lout} <= 0 for input length {x.shape[2]}")
        xp = np.pad(x, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else x
        win = self._windows(xp, lout)
        b, cin = x.shape[0], c["in_channels"]
        k, cout = c["kernel_size"], c["out_channels"]
        w2 = self.params["w"].reshape(cout, cin * k)
        y = np.empty((b, lout, cout), dtype=x.dtype)
        for lo, hi in _batch_chunks(b, lout * cin * k * x.dtype.itemsize):
            cols = win[lo:hi].transpose(0, 2, 1, 3).reshape(-1, cin * k)
            y[lo:hi] = (cols @ w2.T).reshape(hi - lo, lout, cout)
        y = y.transpose(0, 2, 1) + self.params["b"][None, :, None]
        self._x = x
        return y

    def backward(self, gout):
        c = self.config
        x = self._x
        b, cin, length = x.shape
        k, cout, d, s = c["kernel_size"], c["out_channels"], c["dilation"], c["stride"]
        pl, pr = self._pad_amounts()
        lout = gout.shape[2]

        xp = np.pad(x, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else x
        win = self._windows(xp, lout)
        w2 = self.params["w"].reshape(cout, cin * k)

        dw2 = np.zeros_like(w2)
        gxp = np.zeros_like(xp)
        for lo, hi in _batch_chunks(b, lout * cin * k * x.dtype.itemsize):
            cols = win[lo:hi].transpose(0, 2, 1, 3).reshape(-1, cin * k)
            g2 = gout[lo:hi].transpose(0, 2, 1).reshape(-1, cout)
            dw2 += g2.T @ cols
            dcols = (g2 @ w2).reshape(hi - lo, lout, cin, k).transpose(0, 2, 1, 3)
            for kk in range(k):
                off = kk * d
                gxp[lo:hi, :, off:off + s * lout:s] += dcols[:, :, :, kk]

        self.grads["w"] = dw2.reshape(cout, cin, k)
        self.grads["b"] = gout.sum(axis=(0, 2))
        gx = gxp[:, :, pl:pl + length] if (pl or pr) else gxp
        self._x = None
        return [gx]


def _batch_chunks(batch: int, bytes_per_item: int):
    """Yield (lo, hi) batch slices keeping im2col buffers bounded."""
    step = max(1, _COLS_BYTES_LIMIT // max(1, bytes_per_item))
    for lo in range(0, batch, step):
        yield lo, min(batch, lo + step)


class BatchNorm1d(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.config = dict(channels=channels, momentum=momentum, eps=eps)

    def init_params(self, rng: Rng, dtype) -> None:
        ch = self.config["channels"]
        self.params["gamma"] = np.ones(ch, dtype=dtype)
        self.params["beta"] = np.zeros(ch, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(ch, dtype=dtype)
        self.buffers["running_var"] = np.ones(ch, dtype=dtype)

    def forward(self, inputs, mode="eval", rng=None):
        (x,) = inputs
        c = self.config
        if x.shape[1] != c["channels"]:
            raise ValueError(f"batchnorm expected {c['channels']} channels, got {x.shape[1]}")
        eps = x.dtype.type(c["eps"])
        if mode == "train":
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            m = c["momentum"]
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
        y = self.params["gamma"][None, :, None] * xhat + self.params["beta"][None, :, None]
        self._xhat, self._inv_std, self._mode = xhat, inv_std, mode
        return y

    def backward(self, gout):
        xhat, inv_std = self._xhat, self._inv_std
        self.grads["gamma"] = (gout * xhat).sum(axis=(0, 2))
        self.grads["beta"] = gout.sum(axis=(0, 2))
        dxhat = gout * self.params["gamma"][None, :, None]
        if self._mode != "train":
            gx = dxhat * inv_std[None, :, None]
        else:
            n = gout.shape[0] * gout.shape[2]
            sum_dxhat = dxhat.sum(axis=(0, 2), keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            gx = inv_std[None, :, None] / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        self._xhat = self._inv_std = None
        return [gx]


class Relu(Layer):
    kind = "relu"

    def forward(self, inputs, mode="eval", rng=None):
        (x,) = inputs
        y = np.maximum(x, 0)
        self._y = y
        return y

    def backward(self, gout):
        gx = gout * (self._y > 0)
        self._y = None
        return [gx]


class Tanh(Layer):
    kind = "tanh"

    def forward(self, inputs, mode="eval", rng=None):
        (x,) = inputs
        y = np.tanh(x)
        self._y = y
        return y

    def backward(self, gout):
        gx = gout * (1.0 - self._y * self._y)
        self._y = None
        return [gx]


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, inputs, mode="eval", rng=None):
        (x,) = inputs
        y = _sigmoid(x)
        self._y = y
        return y

    def backward(self, gout):
        gx = gout * self._y * (1.0 - self._y)
        self._y = None
        return [gx]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Pool1d(Layer):
    """Non-overlapping max/avg pooling; the trailing remainder is dropped."""

    def __init__(self, op: str, size: int):
        super().__init__()
        if op not in ("max", "avg"):
            raise ValueError(f"unknown pool op {op!r}")
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self.kind = "maxpool" if op == "max" else "avgpool"
        self.config = dict(op=op, size=size)

    def output_length(self, length: int) -> int:
        return length // self.config["size"]

    def forward(self, inputs, mode="eval", rng=None):
        (x,) = inputs
        size = self.config["size"]
        b, c, length = x.shape
        lout = length // size
        xt = x[:, :, :lout * size].reshape(b, c, lout, size)
        if self.config["op"] == "max":
            self._argmax = xt.argmax(axis=3)
            y = np.take_along_axis(xt, self._argmax[..., None], axis=3)[..., 0]
        else:
            y = xt.mean(axis=3)
        self._in_length = length
        return y

    def backward(self, gout):
        size = self.config["size"]
        b, c, lout = gout.shape
        gx = np.zeros((b, c, self._in_length), dtype=gout.dtype)
        if self.config["op"] == "max":
            gxt = gx[:, :, :lout * size].reshape(b, c, lout, size)
            np.put_along_axis(gxt, self._argmax[..., None], gout[..., None], axis=3)
            self._argmax = None
        else:
            gx[:, :, :lout * size] = np.repeat(gout / size, size, axis=2)
        return [gx]


def maxpool(size: int) -> Pool1d:
    return Pool1d("max", size)


def avgpool(size: int) -> Pool1d:
    return Pool1d("avg", size)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, activation: str = "none"):
        super().__init__()
        if activation not in ("none", "tanh", "relu"):
            raise ValueError(f"unknown dense activation {activation!r}")
        self.config = dict(in_features=in_features, out_features=out_features,
                           activation=activation)

    def init_params(self, rng: Rng, dtype) -> None:
        fin, fout = self.config["in_features"], self.config["out_features"]
        self.params["w"] = glorot_uniform(rng, (fout, fin), fin, fout, dtype)
        self.params["b"] = np.zeros(fout, dtype=dtype)

    def forward(self, inputs, mode="eval", rng=None):
        (x,) = inputs
        if x.ndim != 2 or x.shape[1] != self.config["in_features"]:
            raise ValueError(f"dense expected (batch, {self.config['in_features']}), got {x.shape}")
        a = x @ self.params["w"].T + self.params["b"]
        act = self.config["activation"]
        if act == "tanh":
            y = np.tanh(a)
        elif act == "relu":
            y = np.maximum(a, 0)
        else:
            y = a
        self._x, self._y = x, y
        return y

    def backward(self, gout):
        act = self.config["activation"]
        if act == "tanh":
            da = gout * (1.0 - self._y * self._y)
        elif act == "relu":
            da = gout * (self._y > 0)
        else:
            da = gout
        self.grads["w"] = da.T @ self._x
        self.grads["b"] = da.sum(axis=0)
        gx = da @ self.params["w"]
        self._x = self._y = None
        return [gx]


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval is identity."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.config = dict(rate=rate)

    def forward(self, inputs, mode="eval", rng=None):
        (x,) = inputs
        rate = self.config["rate"]
        if mode != "train" or rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = rng.uniform(size=x.shape) >= rate
        self._mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
        return x * self._mask

    def backward(self, gout):
        if self._mask is None:
            return [gout]
        gx = gout * self._mask
        self._mask = None
        return [gx]


class Add(Layer):
    """Elementwise sum of n inputs times a fixed scale (scale=1/n is a mean join)."""

    kind = "add"

    def __init__(self, scale: float = 1.0):
        super().__init__()
        self.config = dict(scale=scale)

    def forward(self, inputs, mode="eval", rng=None):
        shapes = {a.shape for a in inputs}
        if len(shapes) != 1:
            raise ValueError(f"add requires equal shapes, got {sorted(shapes)}")
        y = inputs[0].copy()
        for a in inputs[1:]:
            y += a
        scale = self.config["scale"]
        if scale != 1.0:
            y *= y.dtype.type(scale)
        self._n = len(inputs)
        return y

    def backward(self, gout):
        scale = self.config["scale"]
        g = gout if scale == 1.0 else gout * gout.dtype.type(scale)
        return [g] * self._n


class Multiply(Layer):
    kind = "multiply"

    def forward(self, inputs, mode="eval", rng=None):
        a, b = inputs
        if a.shape != b.shape:
            raise ValueError(f"multiply requires equal shapes, got {a.shape} and {b.shape}")
        self._a, self._b = a, b
        return a * b

    def backward(self, gout):
        ga, gb = gout * self._b, gout * self._a
        self._a = self._b = None
        return [ga, gb]


class Gated(Layer):
    """tanh(filter_in) * sigmoid(gate_in), the gated activation unit."""

    kind = "gated"

    def forward(self, inputs, mode="eval", rng=None):
        f, g = inputs
        if f.shape != g.shape:
            raise ValueError(f"gated unit requires equal shapes, got {f.shape} and {g.shape}")
        tf = np.tanh(f)
        sg = _sigmoid(g)
        self._tf, self._sg = tf, sg
        return tf * sg

    def backward(self, gout):
        tf, sg = self._tf, self._sg
        gf = gout * sg * (1.0 - tf * tf)
        gg = gout * tf * sg * (1.0 - sg)
        self._tf = self._sg = None
        return [gf, gg]


class Softmax(Layer):
    """Row softmax over the class axis of (batch, classes) logits."""

    kind = "softmax"

    def forward(self, inputs, mode="eval", rng=None):
        (z,) = inputs
        zs = z - z.max(axis=1, keepdims=True)
        e = np.exp(zs)
        y = e / e.sum(axis=1, keepdims=True)
        self._y = y
        return y

    def backward(self, gout):
        y = self._y
        gz = y * (gout - (gout * y).sum(axis=1, keepdims=True))
        self._y = None
        return [gz]


class Flatten(Layer):
    kind = "flatten"

    def forward(self, inputs, mode="eval", rng=None):
        (x,) = inputs
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gout):
        return [gout.reshape(self._shape)]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer labels under row-softmax logits.

    Log-sum-exp stabilized; returns (loss, probs).  The gradient of the loss
    w.r.t. the logits is (probs - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2D (batch, classes), got shape {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    m = logits.max(axis=1, keepdims=True)
    zs = logits - m
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logprobs = zs - lse
    probs = np.exp(logprobs)
    n = logits.shape[0]
    loss = float(-logprobs[np.arange(n), labels.astype(np.int64)].mean())
    return loss, probs
