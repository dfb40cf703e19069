"""Dense float64 layers with hand-written forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
NCHW order. Every layer works on a batch; the module-level :func:`forward`
and :func:`backward` helpers also accept a single ``[C, H, W]`` sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input shape is incompatible with a layer's hyperparameters."""


class TrainingDiverged(FloatingPointError):
    pass


def init_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Uniform on +-gain/sqrt(fan_in); gain sqrt(6) keeps ReLU activations at unit scale."""
    bound = gain * math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _as_f64(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or 0 in x.shape:
        raise ShapeError(f"empty tensor with shape {x.shape}")
    return x


def _rows_matmul(w: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # A one-row product goes through gemv, whose summation order differs from
    # gemm; duplicating the row keeps results bitwise equal across row subsets.
    if w.shape[0] == 1:
        return (np.concatenate([w, w]) @ cols)[:1]
    return w @ cols


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x):
        """Return ``(y, cache)`` for a batched input."""
        raise NotImplementedError

    def backward(self, cache, dy):
        """Return ``(dx, grads)`` where ``grads`` mirrors ``self.params``."""
        raise NotImplementedError

    def output_shape(self, shape: tuple) -> tuple:
        """Per-sample output shape for a per-sample input shape."""
        return tuple(shape)

    def config(self) -> dict:
        return {}

    def parameters(self) -> dict[str, np.ndarray]:
        return self.params

    def _check_grad(self, dy, y_shape):
        if tuple(dy.shape) != tuple(y_shape):
            raise ShapeError(
                f"{self.kind}: grad_out shape {tuple(dy.shape)} does not match "
                f"output shape {tuple(y_shape)}"
            )

    def __repr__(self):
        return f"{type(self).__name__}({self.config()})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, weight, bias, stride=1, padding=0):
        super().__init__()
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ShapeError(f"conv2d weight must be [C_out, C_in, k, k], got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({weight.shape[0]},)")
        self.params = {"weight": weight, "bias": bias}
        self.stride = int(stride)
        self.padding = int(padding)

    @classmethod
    def init(cls, rng, c_in, c_out, kernel, stride=1, padding=0):
        fan_in = c_in * kernel * kernel
        w = init_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, gain=math.sqrt(6.0))
        return cls(w, np.zeros(c_out), stride, padding)

    @property
    def in_channels(self):
        return self.params["weight"].shape[1]

    @property
    def out_channels(self):
        return self.params["weight"].shape[0]

    @property
    def kernel(self):
        return self.params["weight"].shape[2]

    def config(self):
        return {"stride": self.stride, "padding": self.padding}

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv2d expects {self.in_channels} input channels, got shape {tuple(shape)}"
            )
        k, s, p = self.kernel, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d k={k} s={s} p={p} cannot cover input {tuple(shape)}")
        return (self.out_channels, ho, wo)

    def _im2col(self, x):
        n, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        _, ho, wo = self.output_shape((c, h, w))
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
        # (N, C, Ho, Wo, k, k) -> (C*k*k, N*Ho*Wo)
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
        return cols, xp.shape, (ho, wo)

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects [N, C, H, W], got {x.shape}")
        cols, padded_shape, (ho, wo) = self._im2col(x)
        w = self.params["weight"]
        out = _rows_matmul(w.reshape(w.shape[0], -1), cols)
        out += self.params["bias"][:, None]
        y = out.reshape(w.shape[0], x.shape[0], ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(y), (x.shape, padded_shape, cols, (ho, wo))

    def backward(self, cache, dy):
        x_shape, padded_shape, cols, (ho, wo) = cache
        n = x_shape[0]
        w = self.params["weight"]
        co, ci, k, _ = w.shape
        self._check_grad(dy, (n, co, ho, wo))
        d2 = dy.transpose(1, 0, 2, 3).reshape(co, -1)
        grads = {
            "weight": (d2 @ cols.T).reshape(w.shape),
            "bias": d2.sum(axis=1),
        }
        dcols = (w.reshape(co, -1).T @ d2).reshape(ci, k, k, n, ho, wo)
        dxp = np.zeros(padded_shape)
        s = self.stride
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                    dcols[:, i, j].transpose(1, 0, 2, 3)
                )
        p = self.padding
        dx = dxp[:, :, p : padded_shape[2] - p, p : padded_shape[3] - p] if p else dxp
        return np.ascontiguousarray(dx), grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        x = _as_f64(x)
        return np.maximum(x, 0.0), x

    def backward(self, x, dy):
        self._check_grad(dy, x.shape)
        return dy * (x > 0), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = sigmoid(_as_f64(x))
        return y, y

    def backward(self, y, dy):
        self._check_grad(dy, y.shape)
        return dy * y * (1.0 - y), {}


def sigmoid(x):
    # Split by sign so exp never overflows.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _GlobalPool(Layer):
    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"{self.kind} expects [C, H, W], got {tuple(shape)}")
        return (shape[0], 1, 1)

    def _check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"{self.kind} expects [N, C, H, W], got {x.shape}")


class GlobalAvgPool(_GlobalPool):
    kind = "global_avg_pool"

    def forward(self, x):
        x = _as_f64(x)
        self._check_input(x)
        return x.mean(axis=(2, 3), keepdims=True), x.shape

    def backward(self, x_shape, dy):
        self._check_grad(dy, x_shape[:2] + (1, 1))
        hw = x_shape[2] * x_shape[3]
        return np.broadcast_to(dy / hw, x_shape).copy(), {}


class GlobalMaxPool(_GlobalPool):
    kind = "global_max_pool"

    def forward(self, x):
        x = _as_f64(x)
        self._check_input(x)
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        arg = flat.argmax(axis=2)
        y = np.take_along_axis(flat, arg[:, :, None], axis=2).reshape(n, c, 1, 1)
        return y, (x.shape, arg)

    def backward(self, cache, dy):
        x_shape, arg = cache
        n, c, h, w = x_shape
        self._check_grad(dy, (n, c, 1, 1))
        dx = np.zeros((n, c, h * w))
        np.put_along_axis(dx, arg[:, :, None], dy.reshape(n, c, 1), axis=2)
        return dx.reshape(x_shape), {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, weight, bias):
        super().__init__()
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense weight {weight.shape} / bias {bias.shape} mismatch")
        self.params = {"weight": weight, "bias": bias}

    @classmethod
    def init(cls, rng, n_in, n_out):
        return cls(init_uniform(rng, (n_out, n_in), n_in), init_uniform(rng, (n_out,), n_in))

    def output_shape(self, shape):
        if math.prod(shape) != self.params["weight"].shape[1]:
            raise ShapeError(
                f"dense expects {self.params['weight'].shape[1]} inputs, got shape {tuple(shape)}"
            )
        return (self.params["weight"].shape[0],)

    def forward(self, x):
        x = _as_f64(x)
        self.output_shape(x.shape[1:])
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.params["weight"].T + self.params["bias"], (x.shape, flat)

    def backward(self, cache, dy):
        x_shape, flat = cache
        self._check_grad(dy, (x_shape[0], self.params["weight"].shape[0]))
        grads = {"weight": dy.T @ flat, "bias": dy.sum(axis=0)}
        return (dy @ self.params["weight"]).reshape(x_shape), grads


class Normalize(Layer):
    """Per-sample standardization across the channel axis (population std)."""

    kind = "normalize"

    def __init__(self, eps=1e-5):
        super().__init__()
        if not eps > 0:
            raise ValueError("normalize eps must be > 0")
        self.eps = float(eps)

    def config(self):
        return {"eps": self.eps}

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim < 2 or x.shape[1] < 2:
            raise ShapeError(f"normalize needs at least 2 channels, got shape {x.shape}")
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return xhat, (xhat, inv)

    def backward(self, cache, dy):
        xhat, inv = cache
        self._check_grad(dy, xhat.shape)
        dx = inv * (
            dy - dy.mean(axis=1, keepdims=True) - xhat * (dy * xhat).mean(axis=1, keepdims=True)
        )
        return dx, {}


class Concat(Layer):
    """Place several channel groups into fixed positions of one tensor.

    ``positions[k]`` lists the output channel of every channel of input
    part ``k``; together the lists must cover ``0..channels-1`` once.
    """

    kind = "concat"

    def __init__(self, positions):
        super().__init__()
        self.positions = [np.asarray(p, dtype=np.int64) for p in positions]
        allpos = np.concatenate(self.positions)
        self.channels = len(allpos)
        if not np.array_equal(np.sort(allpos), np.arange(self.channels)):
            raise ShapeError(f"concat positions do not form a permutation: {allpos.tolist()}")

    def config(self):
        return {"positions": [p.tolist() for p in self.positions]}

    def output_shape(self, shapes):
        rest = shapes[0][1:]
        for part, pos in zip(shapes, self.positions):
            if part[0] != len(pos) or tuple(part[1:]) != tuple(rest):
                raise ShapeError(f"concat part shape {tuple(part)} does not fit {len(pos)} channels")
        return (self.channels,) + tuple(rest)

    def forward(self, parts):
        parts = [_as_f64(p) for p in parts]
        if len(parts) != len(self.positions):
            raise ShapeError(f"concat expects {len(self.positions)} inputs, got {len(parts)}")
        self.output_shape([p.shape[1:] for p in parts])
        n = parts[0].shape[0]
        y = np.empty((n, self.channels) + parts[0].shape[2:])
        for part, pos in zip(parts, self.positions):
            y[:, pos] = part
        return y, y.shape

    def backward(self, y_shape, dy):
        self._check_grad(dy, y_shape)
        return tuple(dy[:, pos] for pos in self.positions), {}


class _Composite(Layer):
    """Layer made of named sub-layers; parameters are exposed with prefixes."""

    children: tuple = ()

    def sublayers(self) -> dict[str, Layer]:
        return {name: getattr(self, name) for name in self.children if getattr(self, name) is not None}

    def parameters(self):
        out = {}
        for name, layer in self.sublayers().items():
            for pname, arr in layer.parameters().items():
                out[f"{name}.{pname}"] = arr
        return out

    @property
    def params(self):
        return self.parameters()

    @params.setter
    def params(self, value):
        if value:
            raise AttributeError("composite layers take parameters through sub-layers")


class ResidualBlock(_Composite):
    """relu(conv2(relu(conv1(x))) + skip(x)).

    The skip path is either a 1x1 projection conv or an identity that routes
    input channel ``skip_in[i]`` to output channel ``skip_out[i]``; the index
    form lets pruned blocks keep a channel-sliced identity path.
    """

    kind = "residual_block"
    children = ("conv1", "conv2", "proj")

    def __init__(self, conv1: Conv2d, conv2: Conv2d, proj: Conv2d | None = None,
                 skip_in=None, skip_out=None):
        super().__init__()
        self.conv1, self.conv2, self.proj = conv1, conv2, proj
        if proj is None:
            if conv1.stride != 1:
                raise ShapeError("identity skip requires stride 1; use a projection")
            if skip_in is None:
                n = min(conv1.in_channels, conv2.out_channels)
                skip_in = skip_out = np.arange(n)
            self.skip_in = np.asarray(skip_in, dtype=np.int64)
            self.skip_out = np.asarray(skip_out, dtype=np.int64)
        else:
            self.skip_in = self.skip_out = None
        self._relu = ReLU()

    @classmethod
    def init(cls, rng, c_in, c_out, stride):
        conv1 = Conv2d.init(rng, c_in, c_out, 3, stride, 1)
        conv2 = Conv2d.init(rng, c_out, c_out, 3, 1, 1)
        proj = Conv2d.init(rng, c_in, c_out, 1, stride, 0) if (stride != 1 or c_in != c_out) else None
        return cls(conv1, conv2, proj)

    @property
    def in_channels(self):
        return self.conv1.in_channels

    @property
    def out_channels(self):
        return self.conv2.out_channels

    def config(self):
        cfg = {
            "conv1": self.conv1.config(),
            "conv2": self.conv2.config(),
            "proj": None if self.proj is None else self.proj.config(),
        }
        if self.proj is None:
            cfg["skip_in"] = self.skip_in.tolist()
            cfg["skip_out"] = self.skip_out.tolist()
        return cfg

    def output_shape(self, shape):
        return self.conv2.output_shape(self.conv1.output_shape(shape))

    def forward(self, x):
        x = _as_f64(x)
        h1, c1 = self.conv1.forward(x)
        a1, r1 = self._relu.forward(h1)
        h2, c2 = self.conv2.forward(a1)
        if self.proj is not None:
            s, cp = self.proj.forward(x)
            out = h2 + s
        else:
            cp = None
            out = h2.copy()
            out[:, self.skip_out] += x[:, self.skip_in]
        y, r2 = self._relu.forward(out)
        return y, (x.shape, c1, r1, c2, cp, r2)

    def backward(self, cache, dy):
        x_shape, c1, r1, c2, cp, r2 = cache
        self._check_grad(dy, r2.shape)
        dout, _ = self._relu.backward(r2, dy)
        da1, g2 = self.conv2.backward(c2, dout)
        dh1, _ = self._relu.backward(r1, da1)
        dx, g1 = self.conv1.backward(c1, dh1)
        grads = {f"conv1.{k}": v for k, v in g1.items()}
        grads.update({f"conv2.{k}": v for k, v in g2.items()})
        if self.proj is not None:
            dxs, gp = self.proj.backward(cp, dout)
            dx = dx + dxs
            grads.update({f"proj.{k}": v for k, v in gp.items()})
        else:
            dx[:, self.skip_in] += dout[:, self.skip_out]
        return dx, grads


class ChannelAttention(_Composite):
    """Channel attention from normalized global avg- and max-pool statistics.

    ``Q = sigmoid(norm(avgpool(x)) + norm(maxpool(x)))`` and the layer output
    is ``x * Q`` broadcast over the spatial axes. It has no parameters.
    """

    kind = "channel_attention"

    def __init__(self, eps=1e-5):
        super().__init__()
        self.eps = float(eps)
        self._avg, self._max = GlobalAvgPool(), GlobalMaxPool()
        self._norm_a, self._norm_m = Normalize(eps), Normalize(eps)
        self._sig = Sigmoid()

    def config(self):
        return {"eps": self.eps}

    def output_shape(self, shape):
        if shape[0] < 2:
            raise ShapeError(f"channel attention needs at least 2 channels, got {tuple(shape)}")
        return tuple(shape)

    def attention(self, x):
        """Return ``(q, cache)`` with ``q`` of shape ``[N, C]``."""
        a, ca = self._avg.forward(x)
        m, cm = self._max.forward(x)
        ah, cna = self._norm_a.forward(a)
        mh, cnm = self._norm_m.forward(m)
        q, cs = self._sig.forward(ah + mh)
        return q[:, :, 0, 0], (ca, cm, cna, cnm, cs)

    def attention_backward(self, cache, dq):
        ca, cm, cna, cnm, cs = cache
        ds, _ = self._sig.backward(cs, dq[:, :, None, None])
        da, _ = self._norm_a.backward(cna, ds)
        dm, _ = self._norm_m.backward(cnm, ds)
        return self._avg.backward(ca, da)[0] + self._max.backward(cm, dm)[0]

    def attention_map(self, x):
        return self.attention(x)[0]

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim != 4:
            raise ShapeError(f"channel attention expects [N, C, H, W], got {x.shape}")
        self.output_shape(x.shape[1:])
        q, cache = self.attention(x)
        return x * q[:, :, None, None], (x, q, cache)

    def backward(self, cache, dy):
        x, q, qcache = cache
        self._check_grad(dy, x.shape)
        dx = dy * q[:, :, None, None]
        dq = (dy * x).sum(axis=(2, 3))
        return dx + self.attention_backward(qcache, dq), {}


class FeatureRecovery(_Composite):
    """Rebuild pruned channels from all received channels.

    A 3x3 conv maps the ``C'`` received channels to the ``C - C'`` pruned
    ones, followed by ReLU; received channels pass through unchanged and
    both groups are written back to their original channel positions.
    """

    kind = "feature_recovery"
    children = ("conv",)

    def __init__(self, conv: Conv2d, retained, channels: int):
        super().__init__()
        retained = np.asarray(sorted(int(i) for i in retained), dtype=np.int64)
        pruned = np.setdiff1d(np.arange(channels), retained)
        if conv.in_channels != len(retained) or conv.out_channels != len(pruned):
            raise ShapeError(
                f"feature recovery conv {conv.params['weight'].shape} does not map "
                f"{len(retained)} -> {len(pruned)} channels"
            )
        self.conv = conv
        self.retained, self.pruned, self.channels = retained, pruned, int(channels)
        self._relu = ReLU()
        self._concat = Concat([pruned, retained])

    @classmethod
    def init(cls, rng, retained, channels, scale=1.0):
        n_ret = len(retained)
        conv = Conv2d.init(rng, n_ret, channels - n_ret, 3, 1, 1)
        conv.params["weight"] *= scale
        conv.params["bias"] *= scale
        return cls(conv, retained, channels)

    def config(self):
        return {"conv": self.conv.config(), "retained": self.retained.tolist(),
                "channels": self.channels}

    def output_shape(self, shape):
        self.conv.output_shape(shape)
        return (self.channels,) + tuple(shape[1:])

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim != 4 or x.shape[1] != len(self.retained):
            raise ShapeError(
                f"feature recovery expects [N, {len(self.retained)}, H, W], got {x.shape}"
            )
        h, cc = self.conv.forward(x)
        r, cr = self._relu.forward(h)
        y, ccat = self._concat.forward([r, x])
        return y, (cc, cr, ccat)

    def backward(self, cache, dy):
        cc, cr, ccat = cache
        (dr, dx_pass), _ = self._concat.backward(ccat, dy)
        dh, _ = self._relu.backward(cr, dr)
        dx, g = self.conv.backward(cc, dh)
        return dx + dx_pass, {f"conv.{k}": v for k, v in g.items()}


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls
    for cls in (Conv2d, ReLU, Sigmoid, GlobalAvgPool, GlobalMaxPool, Dense, Normalize,
                Concat, ResidualBlock, ChannelAttention, FeatureRecovery)
}


# ---- sequential execution -------------------------------------------------


def run_forward(layers, x):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def run_backward(layers, caches, dy):
    """Backpropagate through ``layers``; returns ``(dx, grads per layer)``."""
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        dy, grads[i] = layers[i].backward(caches[i], dy)
    return dy, grads


# ---- functional entry points ----------------------------------------------

_SPATIAL = (Conv2d, GlobalAvgPool, GlobalMaxPool, ResidualBlock, ChannelAttention,
            FeatureRecovery)


def _batched(layer, x):
    return isinstance(layer, _SPATIAL) and np.ndim(x) == 3


def forward(layer: Layer, x) -> np.ndarray:
    """Evaluate one layer. ``[C, H, W]`` inputs are treated as a batch of one."""
    if _batched(layer, x):
        return layer.forward(np.asarray(x, dtype=np.float64)[None])[0][0]
    return layer.forward(x)[0]


def backward(layer: Layer, x, grad_out):
    """Return ``(grad_in, grad_params)`` with ``grad_params`` in parameter order."""
    single = _batched(layer, x)
    if single:
        x = np.asarray(x, dtype=np.float64)[None]
        grad_out = np.asarray(grad_out, dtype=np.float64)[None]
    y, cache = layer.forward(x)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != y.shape:
        raise ShapeError(
            f"{layer.kind}: grad_out shape {grad_out.shape} != output shape {y.shape}"
        )
    dx, grads = layer.backward(cache, grad_out)
    if single:
        dx = dx[0]
    return dx, [grads[name] for name in layer.parameters()]


# ---- optimisation ---------------------------------------------------------


def sgd_step(params, grads, learning_rate):
    """Plain SGD, ``p - lr * g``; returns new arrays and leaves inputs untouched."""
    if not learning_rate > 0:
        raise ValueError("learning_rate must be > 0")
    names = params.keys() if isinstance(params, dict) else range(len(params))
    out = {} if isinstance(params, dict) else [None] * len(params)
    for name in names:
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"parameter {name!r}: shape {p.shape} vs gradient {g.shape}")
        new = p - learning_rate * g
        if not np.all(np.isfinite(new)):
            raise TrainingDiverged(f"non-finite update for parameter {name!r}")
        out[name] = new
    return out


class SGD:
    """Momentum SGD updating parameter arrays in place."""

    def __init__(self, learning_rate, momentum=0.9):
        if not learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.learning_rate * v


# ---- gradient checking ----------------------------------------------------


@dataclass
class GradReport:
    errors: dict[str, float]
    tolerance: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(model, x, tolerance=1e-4, step=1e-5, seed=0, check_input=True) -> GradReport:
    """Compare analytic gradients with central finite differences.

    ``model`` is a :class:`Layer`, a list of layers, or any object with a
    ``layers`` attribute. The scalar objective is ``sum(output * R)`` for a
    fixed seeded random ``R``. Every parameter element is perturbed.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be > 0")
    if isinstance(model, Layer):
        layers = [model]
    elif hasattr(model, "layers"):
        layers = list(model.layers)
    else:
        layers = list(model)
    x = np.array(x, dtype=np.float64)

    y, caches = run_forward(layers, x)
    r = np.random.default_rng(seed).standard_normal(y.shape)

    def objective():
        return float(np.sum(run_forward(layers, x)[0] * r))

    dx, grads = run_backward(layers, caches, r)
    report = GradReport(errors={}, tolerance=tolerance)

    def check(path, arr, analytic):
        analytic = np.asarray(analytic)
        if not np.all(np.isfinite(analytic)):
            report.failures.append(path)
            report.errors[path] = math.inf
            return
        if not arr.flags.c_contiguous:
            raise ValueError(f"{path}: grad_check perturbs arrays in place and needs C order")
        numeric = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        if not np.all(np.isfinite(numeric)):
            report.failures.append(path)
            report.errors[path] = math.inf
            return
        report.errors[path] = float(relative_error(analytic, numeric).max())

    for i, (layer, g) in enumerate(zip(layers, grads)):
        for name, arr in layer.parameters().items():
            check(f"layers.{i}.{name}", arr, g[name])
    if check_input:
        check("input", x, dx)
    return report
