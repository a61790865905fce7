"""Small differentiable networks: forward pass, loss, gradient and exact HVP.

Every layer implements four passes over a batch:

* ``forward``   y = f(x; w)
* ``backward``  pull back an output cotangent to (input, params)
* ``rforward``  tangent of the forward pass along (dx, dw)
* ``rbackward`` tangent of the backward pass along the same direction

The last two are forward-mode differentiation of the reverse pass, which gives
Hessian-vector products without finite differences.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LayoutError, NumericError, UnsupportedMetricError
from .params import LayerLayout, ParamVector

# Examples per reduction chunk; chunks are summed strictly in order.
CHUNK = 512


@dataclass(frozen=True, eq=False)
class DatasetSlice:
    inputs: np.ndarray
    labels: np.ndarray
    id: str = field(default="")

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.labels)
        if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
            raise LayoutError(f"inputs ({x.shape[0]}) and labels ({y.shape[0]}) must be equal and nonzero")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "id", content_hash(x, y))

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, idx) -> "DatasetSlice":
        return DatasetSlice(self.inputs[idx], self.labels[idx])


def content_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(f"{a.dtype.str}{a.shape}".encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- activations

def _relu(x):
    return np.maximum(x, 0.0), (x > 0).astype(np.float64), None


def _tanh(x):
    t = np.tanh(x)
    d1 = 1.0 - t * t
    return t, d1, -2.0 * t * d1


def _softplus(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return np.logaddexp(0.0, x), s, s * (1.0 - s)


def _sigmoid(x):
    s = 1.0 / (1.0 + np.exp(-x))
    d1 = s * (1.0 - s)
    return s, d1, d1 * (1.0 - 2.0 * s)


def _identity(x):
    return x, np.ones_like(x), None


ACTIVATIONS = {
    "relu": _relu,
    "tanh": _tanh,
    "softplus": _softplus,
    "sigmoid": _sigmoid,
    "identity": _identity,
}


# --------------------------------------------------------------------- layers

class Layer:
    name: str | None = None
    n_params = 0

    def init(self, rng) -> np.ndarray:
        return np.zeros(0)

    def rbackward(self, p, v, cache, rcache, gy, rgy):
        raise NotImplementedError


class Activation(Layer):
    def __init__(self, kind, in_shape):
        if kind not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {kind!r}")
        self.kind = kind
        self.in_shape = self.out_shape = in_shape

    def forward(self, p, x):
        y, d1, d2 = ACTIVATIONS[self.kind](x)
        return y, (d1, d2)

    def backward(self, p, cache, gy):
        return gy * cache[0], None

    def rforward(self, p, v, cache, rx):
        return cache[0] * rx, rx

    def rbackward(self, p, v, cache, rx, gy, rgy):
        d1, d2 = cache
        rgx = rgy * d1
        if d2 is not None and rx is not None:
            rgx = rgx + gy * d2 * rx
        return rgx, None


class Dense(Layer):
    def __init__(self, name, in_shape, units, bias=True):
        if len(in_shape) != 1:
            raise ConfigError(f"dense layer {name!r} needs flat input, got shape {in_shape}")
        self.name = name
        self.fan_in = in_shape[0]
        self.units = int(units)
        self.bias = bias
        self.in_shape, self.out_shape = in_shape, (self.units,)
        self.n_w = self.units * self.fan_in
        self.n_params = self.n_w + (self.units if bias else 0)

    def init(self, rng):
        bound = 1.0 / np.sqrt(self.fan_in)
        return rng.uniform(-bound, bound, size=self.n_params)

    def _split(self, p):
        W = p[: self.n_w].reshape(self.units, self.fan_in)
        b = p[self.n_w :] if self.bias else None
        return W, b

    def forward(self, p, x):
        W, b = self._split(p)
        y = x @ W.T
        if b is not None:
            y = y + b
        return y, x

    def backward(self, p, x, gy):
        W, _ = self._split(p)
        gW = gy.T @ x
        parts = [gW.reshape(-1)]
        if self.bias:
            parts.append(gy.sum(axis=0))
        return gy @ W, np.concatenate(parts)

    def rforward(self, p, v, x, rx):
        W, _ = self._split(p)
        V, vb = self._split(v)
        ry = x @ V.T
        if rx is not None:
            ry = ry + rx @ W.T
        if vb is not None:
            ry = ry + vb
        return ry, rx

    def rbackward(self, p, v, x, rx, gy, rgy):
        W, _ = self._split(p)
        V, _ = self._split(v)
        rgW = rgy.T @ x
        if rx is not None:
            rgW = rgW + gy.T @ rx
        parts = [rgW.reshape(-1)]
        if self.bias:
            parts.append(rgy.sum(axis=0))
        return rgy @ W + gy @ V, np.concatenate(parts)


def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, oh, ow, k, k)
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, oh * ow)
    return np.ascontiguousarray(cols)


def _col2im(cols, shape, k, stride, pad):
    n, c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh, ow = (hp - k) // stride + 1, (wp - k) // stride + 1
    cols = cols.reshape(n, c, k, k, oh, ow)
    out = np.zeros((n, c, hp, wp))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


class Conv2d(Layer):
    def __init__(self, name, in_shape, channels, kernel, stride=1, padding=0, bias=True):
        if len(in_shape) != 3:
            raise ConfigError(f"conv layer {name!r} needs (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        self.name = name
        self.c_in, self.c_out, self.k = c, int(channels), int(kernel)
        self.stride, self.pad, self.bias = int(stride), int(padding), bias
        oh = (h + 2 * self.pad - self.k) // self.stride + 1
        ow = (w + 2 * self.pad - self.k) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ConfigError(f"conv layer {name!r}: kernel larger than input")
        self.in_shape, self.out_shape = in_shape, (self.c_out, oh, ow)
        self.fan_in = c * self.k * self.k
        self.n_w = self.c_out * self.fan_in
        self.n_params = self.n_w + (self.c_out if bias else 0)

    def init(self, rng):
        bound = 1.0 / np.sqrt(self.fan_in)
        return rng.uniform(-bound, bound, size=self.n_params)

    def _split(self, p):
        W = p[: self.n_w].reshape(self.c_out, self.fan_in)
        return W, (p[self.n_w :] if self.bias else None)

    def _out(self, y, b):
        if b is not None:
            y = y + b[None, :, None]
        return y.reshape((y.shape[0],) + self.out_shape)

    def forward(self, p, x):
        W, b = self._split(p)
        cols = _im2col(x, self.k, self.stride, self.pad)
        y = np.einsum("ok,nkl->nol", W, cols)
        return self._out(y, b), (x.shape, cols)

    def backward(self, p, cache, gy):
        shape, cols = cache
        W, _ = self._split(p)
        g = gy.reshape(gy.shape[0], self.c_out, -1)
        gW = np.einsum("nol,nkl->ok", g, cols)
        parts = [gW.reshape(-1)]
        if self.bias:
            parts.append(g.sum(axis=(0, 2)))
        gx = _col2im(np.einsum("ok,nol->nkl", W, g), shape, self.k, self.stride, self.pad)
        return gx, np.concatenate(parts)

    def rforward(self, p, v, cache, rx):
        shape, cols = cache
        W, _ = self._split(p)
        V, vb = self._split(v)
        ry = np.einsum("ok,nkl->nol", V, cols)
        rcols = None
        if rx is not None:
            rcols = _im2col(rx, self.k, self.stride, self.pad)
            ry = ry + np.einsum("ok,nkl->nol", W, rcols)
        return self._out(ry, vb), rcols

    def rbackward(self, p, v, cache, rcols, gy, rgy):
        shape, cols = cache
        W, _ = self._split(p)
        V, _ = self._split(v)
        g = gy.reshape(gy.shape[0], self.c_out, -1)
        rg = rgy.reshape(rgy.shape[0], self.c_out, -1)
        rgW = np.einsum("nol,nkl->ok", rg, cols)
        if rcols is not None:
            rgW = rgW + np.einsum("nol,nkl->ok", g, rcols)
        parts = [rgW.reshape(-1)]
        if self.bias:
            parts.append(rg.sum(axis=(0, 2)))
        rgcols = np.einsum("ok,nol->nkl", W, rg) + np.einsum("ok,nol->nkl", V, g)
        return _col2im(rgcols, shape, self.k, self.stride, self.pad), np.concatenate(parts)


class Flatten(Layer):
    def __init__(self, in_shape):
        self.in_shape = in_shape
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), None

    def backward(self, p, cache, gy):
        return gy.reshape((gy.shape[0],) + self.in_shape), None

    def rforward(self, p, v, cache, rx):
        return (None if rx is None else rx.reshape(rx.shape[0], -1)), None

    def rbackward(self, p, v, cache, rc, gy, rgy):
        return rgy.reshape((rgy.shape[0],) + self.in_shape), None


class AvgPool2d(Layer):
    def __init__(self, in_shape, size):
        c, h, w = in_shape
        self.size = int(size)
        if h % self.size or w % self.size:
            raise ConfigError(f"avgpool size {size} does not divide input {in_shape}")
        self.in_shape = in_shape
        self.out_shape = (c, h // self.size, w // self.size)

    def _pool(self, x):
        n, c, h, w = x.shape
        s = self.size
        return x.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))

    def _unpool(self, g):
        s = self.size
        return np.repeat(np.repeat(g, s, axis=2), s, axis=3) / (s * s)

    def forward(self, p, x):
        return self._pool(x), None

    def backward(self, p, cache, gy):
        return self._unpool(gy), None

    def rforward(self, p, v, cache, rx):
        return (None if rx is None else self._pool(rx)), None

    def rbackward(self, p, v, cache, rc, gy, rgy):
        return self._unpool(rgy), None


# ---------------------------------------------------------------------- heads

def _ce_terms(z, y):
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    s = ez.sum(axis=1, keepdims=True)
    per = (np.log(s[:, 0]) + zmax[:, 0]) - z[np.arange(z.shape[0]), y]
    return per, ez / s


LOSSES = ("cross_entropy", "mse")


# -------------------------------------------------------------------- network

class Network:
    """Sequential network built from a JSON-able layer list.

    ``layers`` entries look like ``{"type": "dense", "units": 64}``,
    ``{"type": "relu"}``, ``{"type": "conv", "channels": 4, "kernel": 3}``,
    ``{"type": "flatten"}`` or ``{"type": "avgpool", "size": 2}``. Parametric
    layers get names ``fc1, fc2, ...`` / ``conv1, ...`` unless given ``name``.
    """

    def __init__(self, input_shape, layers, loss="cross_entropy"):
        if loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {loss!r}")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.loss_kind = loss
        self.spec = [dict(l) for l in layers]
        self.layers: list[Layer] = []
        shape = self.input_shape
        counts = {"dense": 0, "conv": 0}
        for entry in self.spec:
            kind = entry.get("type")
            if kind in ("dense", "conv"):
                counts[kind] += 1
                default = ("fc" if kind == "dense" else "conv") + str(counts[kind])
                name = str(entry.get("name", default))
                bias = bool(entry.get("bias", True))
                if kind == "dense":
                    layer = Dense(name, shape, entry["units"], bias)
                else:
                    layer = Conv2d(name, shape, entry["channels"], entry["kernel"],
                                   entry.get("stride", 1), entry.get("padding", 0), bias)
            elif kind in ACTIVATIONS:
                layer = Activation(kind, shape)
            elif kind == "flatten":
                layer = Flatten(shape)
            elif kind == "avgpool":
                layer = AvgPool2d(shape, entry["size"])
            elif kind in ("batchnorm", "dropout"):
                raise ConfigError(f"{kind} layers are not supported")
            else:
                raise ConfigError(f"unknown layer type {kind!r}")
            self.layers.append(layer)
            shape = layer.out_shape
        if len(shape) != 1:
            raise ConfigError(f"network output must be flat, got shape {shape}")
        self.output_dim = shape[0]
        param_layers = [l for l in self.layers if l.n_params]
        self.layout = LayerLayout.from_sizes((l.name, l.n_params) for l in param_layers)
        self._slices = {}
        for l in param_layers:
            seg = self.layout[l.name]
            self._slices[id(l)] = slice(seg.start, seg.stop)

    @classmethod
    def mlp(cls, in_dim, hidden, out_dim, activation="relu", loss="cross_entropy"):
        layers = []
        for h in hidden:
            layers += [{"type": "dense", "units": h}, {"type": activation}]
        layers.append({"type": "dense", "units": out_dim})
        return cls((in_dim,), layers, loss)

    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": self.spec, "loss": self.loss_kind}

    @classmethod
    def from_description(cls, d: dict) -> "Network":
        return cls(d["input_shape"], d["layers"], d.get("loss", "cross_entropy"))

    def init_params(self, seed: int) -> ParamVector:
        rng = np.random.Generator(np.random.PCG64(seed))
        parts = [l.init(rng) for l in self.layers if l.n_params]
        return ParamVector(np.concatenate(parts) if parts else np.zeros(0), self.layout)

    # -- internals

    def _params(self, theta):
        if not isinstance(theta, ParamVector):
            raise LayoutError(f"expected ParamVector, got {type(theta).__name__}")
        if theta.layout != self.layout:
            raise LayoutError("parameter layout does not match network")
        return theta.values

    def _p(self, layer, vec):
        s = self._slices.get(id(layer))
        return None if s is None else vec[s]

    def _check_data(self, data):
        if tuple(data.inputs.shape[1:]) != self.input_shape:
            raise LayoutError(f"input shape {data.inputs.shape[1:]} does not match {self.input_shape}")
        if self.loss_kind == "mse" and (data.labels.ndim != 2 or data.labels.shape[1] != self.output_dim):
            raise LayoutError(f"mse labels need shape (n, {self.output_dim})")

    def _chunks(self, n):
        for a in range(0, n, CHUNK):
            yield a, min(a + CHUNK, n)

    def forward(self, theta: ParamVector, x: np.ndarray) -> np.ndarray:
        vec = self._params(theta)
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h, _ = layer.forward(self._p(layer, vec), h)
        return h

    def _forward(self, vec, x):
        caches = []
        h = x
        with np.errstate(over="ignore", invalid="ignore"):
            for layer in self.layers:
                h, c = layer.forward(self._p(layer, vec), h)
                caches.append(c)
        return h, caches

    def _per_example(self, z, y, offset):
        bad = ~np.all(np.isfinite(z), axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0]) + offset
            raise NumericError(f"non-finite network output at example {i}", index=i)
        if self.loss_kind == "cross_entropy":
            per, probs = _ce_terms(z, y)
            return per, probs
        r = z - y
        with np.errstate(over="ignore"):
            return 0.5 * np.sum(r * r, axis=1), r

    def _output_grad(self, z, y, aux, scale):
        if self.loss_kind == "cross_entropy":
            g = aux.copy()
            g[np.arange(z.shape[0]), y] -= 1.0
            return g * scale
        return aux * scale

    def _output_rgrad(self, aux, rz, scale):
        if self.loss_kind == "cross_entropy":
            p = aux
            return (p * rz - p * np.sum(p * rz, axis=1, keepdims=True)) * scale
        return rz * scale

    def _backward(self, vec, caches, g, n_params):
        grad = np.zeros(n_params)
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            g, gp = layer.backward(self._p(layer, vec), c, g)
            if gp is not None:
                grad[self._slices[id(layer)]] = gp
        return grad

    # -- public API

    def loss(self, theta: ParamVector, data: DatasetSlice) -> float:
        vec = self._params(theta)
        self._check_data(data)
        total = 0.0
        for a, b in self._chunks(len(data)):
            z, _ = self._forward(vec, data.inputs[a:b])
            per, _ = self._per_example(z, data.labels[a:b], a)
            for v in per:
                total += float(v)
        out = total / len(data)
        if not np.isfinite(out):
            raise NumericError("non-finite loss")
        return out

    def error_rate(self, theta: ParamVector, data: DatasetSlice) -> float:
        if self.loss_kind != "cross_entropy":
            raise UnsupportedMetricError("error rate needs a classification loss")
        vec = self._params(theta)
        self._check_data(data)
        wrong = 0
        for a, b in self._chunks(len(data)):
            z, _ = self._forward(vec, data.inputs[a:b])
            self._per_example(z, data.labels[a:b], a)
            wrong += int(np.count_nonzero(np.argmax(z, axis=1) != data.labels[a:b]))
        return wrong / len(data)

    def loss_and_gradient(self, theta: ParamVector, data: DatasetSlice) -> tuple[float, ParamVector]:
        vec = self._params(theta)
        self._check_data(data)
        n = len(data)
        total = 0.0
        grad = np.zeros(vec.shape[0])
        for a, b in self._chunks(n):
            z, caches = self._forward(vec, data.inputs[a:b])
            y = data.labels[a:b]
            per, aux = self._per_example(z, y, a)
            for v in per:
                total += float(v)
            # overflow here is caught by the finiteness check below
            with np.errstate(over="ignore", invalid="ignore"):
                grad += self._backward(vec, caches, self._output_grad(z, y, aux, 1.0 / n), vec.shape[0])
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            raise NumericError("non-finite loss or gradient")
        return total / n, theta.like(grad)

    def gradient(self, theta: ParamVector, data: DatasetSlice) -> ParamVector:
        return self.loss_and_gradient(theta, data)[1]

    def hvp(self, theta: ParamVector, v: ParamVector, data: DatasetSlice) -> ParamVector:
        vec = self._params(theta)
        dvec = self._params(v)
        self._check_data(data)
        n = len(data)
        out = np.zeros(vec.shape[0])
        for a, b in self._chunks(n):
            x, y = data.inputs[a:b], data.labels[a:b]
            z, caches = self._forward(vec, x)
            _, aux = self._per_example(z, y, a)
            # tangent of the forward pass; input tangent is zero
            rx = None
            rcaches = []
            for layer, c in zip(self.layers, caches):
                p = self._p(layer, vec)
                if layer.n_params:
                    rx, rc = layer.rforward(p, self._p(layer, dvec), c, rx)
                else:
                    rx, rc = (None, None) if rx is None else layer.rforward(p, None, c, rx)
                rcaches.append(rc)
            g = self._output_grad(z, y, aux, 1.0 / n)
            rg = self._output_rgrad(aux, rx, 1.0 / n)
            for layer, c, rc in zip(reversed(self.layers), reversed(caches), reversed(rcaches)):
                p = self._p(layer, vec)
                dp = self._p(layer, dvec)
                g_next, _ = layer.backward(p, c, g)
                rg, rgp = layer.rbackward(p, dp, c, rc, g, rg)
                if rgp is not None:
                    out[self._slices[id(layer)]] += rgp
                g = g_next
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite Hessian-vector product")
        return theta.like(out)


# Functional aliases mirroring the module-level API.

def loss(net, theta, data) -> float:
    return net.loss(theta, data)


def error_rate(net, theta, data) -> float:
    return net.error_rate(theta, data)


def gradient(net, theta, data) -> ParamVector:
    return net.gradient(theta, data)


def hvp(net, theta, v, data) -> ParamVector:
    return net.hvp(theta, v, data)


def quadratic_form(net, theta, u, v, data) -> float:
    """u^T H(theta) v from a single Hessian-vector product."""
    return u.dot(net.hvp(theta, v, data))
