"""A small layer-graph network with hand-written reverse-mode gradients.

Layers are frozen dataclasses that know how to run forward and backward on a
batch. ``Network`` owns the ordered layer list, the parameter and buffer
dictionaries (keyed ``"<layer index>.<name>"``), and the train/eval flag.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .tensor import ParameterError, ShapeError, col2im, conv_out_size, im2col, kernel_to_matrix

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class StateError(RuntimeError):
    pass


# ---------------------------------------------------------------- layer specs


@dataclass(frozen=True)
class Conv2d:
    c_in: int
    c_out: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0
    bias: bool = False

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.c_in:
            raise ShapeError(f"Conv2d expects ({self.c_in}, H, W) input, got {shape}")
        _, h, w = shape
        return (
            self.c_out,
            conv_out_size(h, self.kh, self.stride, self.pad),
            conv_out_size(w, self.kw, self.stride, self.pad),
        )

    def param_shapes(self, shape):
        out = {"weight": (self.c_out, self.c_in, self.kh, self.kw)}
        if self.bias:
            out["bias"] = (self.c_out,)
        return out

    def init_params(self, shape, rng):
        fan_in = self.c_in * self.kh * self.kw
        bound = np.sqrt(6.0 / fan_in)
        p = {"weight": rng.uniform(-bound, bound, (self.c_out, self.c_in, self.kh, self.kw))}
        if self.bias:
            p["bias"] = np.zeros(self.c_out)
        return p

    def forward(self, p, buffers, x, training):
        n = x.shape[0]
        _, ho, wo = self.out_shape(x.shape[1:])
        cols = im2col(x, self.kh, self.kw, self.stride, self.pad)
        y = kernel_to_matrix(p["weight"]) @ cols
        if self.bias:
            y += p["bias"][:, None]
        y = np.ascontiguousarray(y.reshape(self.c_out, n, ho, wo).transpose(1, 0, 2, 3))
        return y, (x.shape, cols)

    def backward(self, p, cache, dy):
        x_shape, cols = cache
        dym = dy.transpose(1, 0, 2, 3).reshape(self.c_out, -1)
        grads = {"weight": (dym @ cols.T).reshape(p["weight"].shape)}
        if self.bias:
            grads["bias"] = dym.sum(axis=1)
        dcols = kernel_to_matrix(p["weight"]).T @ dym
        dx = col2im(dcols, x_shape, self.kh, self.kw, self.stride, self.pad)
        return dx, grads


@dataclass(frozen=True)
class Linear:
    n_in: int
    n_out: int
    bias: bool = True

    def out_shape(self, shape):
        if tuple(shape) != (self.n_in,):
            raise ShapeError(f"Linear expects ({self.n_in},) input, got {shape}")
        return (self.n_out,)

    def param_shapes(self, shape):
        out = {"weight": (self.n_out, self.n_in)}
        if self.bias:
            out["bias"] = (self.n_out,)
        return out

    def init_params(self, shape, rng):
        bound = np.sqrt(6.0 / self.n_in)
        p = {"weight": rng.uniform(-bound, bound, (self.n_out, self.n_in))}
        if self.bias:
            p["bias"] = np.zeros(self.n_out)
        return p

    def forward(self, p, buffers, x, training):
        y = x @ p["weight"].T
        if self.bias:
            y = y + p["bias"]
        return y, x

    def backward(self, p, x, dy):
        grads = {"weight": dy.T @ x}
        if self.bias:
            grads["bias"] = dy.sum(axis=0)
        return dy @ p["weight"], grads


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError(f"BatchNorm({self.channels}) after a {shape[0]}-channel layer")
        return tuple(shape)

    def param_shapes(self, shape):
        return {"weight": (self.channels,), "bias": (self.channels,)}

    def init_params(self, shape, rng):
        return {"weight": np.ones(self.channels), "bias": np.zeros(self.channels)}

    def init_buffers(self):
        return {"running_mean": np.zeros(self.channels), "running_var": np.ones(self.channels)}

    def _view(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, p, buffers, x, training):
        axes = (0,) + tuple(range(2, x.ndim))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // self.channels
            m = self.momentum
            buffers["running_mean"] = (1 - m) * buffers["running_mean"] + m * mean
            unbiased = var * count / max(count - 1, 1)
            buffers["running_var"] = (1 - m) * buffers["running_var"] + m * unbiased
        else:
            mean, var = buffers["running_mean"], buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._view(mean, x.ndim)) * self._view(inv_std, x.ndim)
        y = xhat * self._view(p["weight"], x.ndim) + self._view(p["bias"], x.ndim)
        return y, (xhat, inv_std)

    def backward(self, p, cache, dy):
        xhat, inv_std = cache
        axes = (0,) + tuple(range(2, dy.ndim))
        count = dy.size // self.channels
        grads = {"weight": (dy * xhat).sum(axis=axes), "bias": dy.sum(axis=axes)}
        dxhat = dy * self._view(p["weight"], dy.ndim)
        s1 = self._view(dxhat.sum(axis=axes), dy.ndim)
        s2 = self._view((dxhat * xhat).sum(axis=axes), dy.ndim)
        dx = self._view(inv_std, dy.ndim) / count * (count * dxhat - s1 - xhat * s2)
        return dx, grads

    def sigma(self, buffers) -> np.ndarray:
        """Per-channel output standard deviation from running statistics."""
        return np.sqrt(buffers["running_var"] + self.eps)


@dataclass(frozen=True)
class ReLU:
    def out_shape(self, shape):
        return tuple(shape)

    def forward(self, p, buffers, x, training):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy):
        return dy * mask, {}


@dataclass(frozen=True)
class AvgPool:
    """Non-overlapping average pooling; H and W must be multiples of ``window``."""

    window: int

    def out_shape(self, shape):
        c, h, w = shape
        k = self.window
        if h % k or w % k:
            raise ShapeError(f"AvgPool({k}) needs spatial dims divisible by {k}, got {h}x{w}")
        return (c, h // k, w // k)

    def forward(self, p, buffers, x, training):
        n, c, h, w = x.shape
        k = self.window
        y = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return y, x.shape

    def backward(self, p, x_shape, dy):
        k = self.window
        dx = np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)
        return dx, {}


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, p, buffers, x, training):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, x_shape, dy):
        return dy.reshape(x_shape), {}


@dataclass(frozen=True)
class ResidualAdd:
    """Adds activation ``source`` (0 = network input, k = output of layer k-1)
    to the running activation.

    Shortcut "A" subsamples spatially and zero-pads channels; shortcut "B"
    uses a strided 1x1 convolution (no bias) when shapes differ.
    """

    source: int
    shortcut: str = "A"

    def _geometry(self, src_shape, shape):
        if len(src_shape) != len(shape):
            raise ShapeError(f"residual source {src_shape} incompatible with {shape}")
        if len(shape) == 1:
            if src_shape != shape:
                raise ShapeError(f"residual source {src_shape} incompatible with {shape}")
            return 1
        if src_shape[1] % shape[1] or src_shape[2] % shape[2]:
            raise ShapeError(f"residual source {src_shape} cannot be strided onto {shape}")
        stride = src_shape[1] // shape[1]
        if src_shape[2] // shape[2] != stride or src_shape[0] > shape[0]:
            raise ShapeError(f"residual source {src_shape} cannot be mapped onto {shape}")
        return stride

    def needs_projection(self, src_shape, shape):
        return self.shortcut == "B" and tuple(src_shape) != tuple(shape)

    def out_shape(self, shape, src_shape):
        if self.shortcut not in ("A", "B"):
            raise ParameterError(f"unknown shortcut type {self.shortcut!r}")
        self._geometry(src_shape, shape)
        return tuple(shape)

    def param_shapes(self, shape, src_shape):
        if self.needs_projection(src_shape, shape):
            return {"weight": (shape[0], src_shape[0], 1, 1)}
        return {}

    def init_params(self, shape, src_shape, rng):
        if self.needs_projection(src_shape, shape):
            bound = np.sqrt(6.0 / src_shape[0])
            return {"weight": rng.uniform(-bound, bound, (shape[0], src_shape[0], 1, 1))}
        return {}

    def forward(self, p, x, src):
        shape = x.shape[1:]
        stride = self._geometry(src.shape[1:], shape)
        if "weight" in p:
            conv = Conv2d(src.shape[1], shape[0], 1, 1, stride=stride)
            short, cache = conv.forward(p, None, src, True)
            return x + short, (stride, conv, cache)
        if stride > 1:
            src = src[:, :, ::stride, ::stride]
        extra = shape[0] - src.shape[1] if src.ndim == 4 else 0
        if extra:
            lo = extra // 2
            src = np.pad(src, ((0, 0), (lo, extra - lo), (0, 0), (0, 0)))
        return x + src, (stride, None, extra)

    def backward(self, p, cache, dy, src_shape):
        stride, conv, extra = cache
        if conv is not None:
            dsrc, grads = conv.backward(p, extra, dy)
            return dy, dsrc, grads
        dsrc = dy
        if extra:
            lo = extra // 2
            dsrc = dsrc[:, lo : dy.shape[1] - (extra - lo)]
        if stride > 1:
            full = np.zeros((dy.shape[0],) + tuple(src_shape))
            full[:, :, ::stride, ::stride] = dsrc
            dsrc = full
        return dy, dsrc, {}


LAYER_TYPES = {cls.__name__: cls for cls in (Conv2d, Linear, BatchNorm, ReLU, AvgPool, Flatten, ResidualAdd)}


def layer_to_dict(layer) -> dict:
    return {"type": type(layer).__name__, **asdict(layer)}


def layer_from_dict(d: dict):
    d = dict(d)
    cls = LAYER_TYPES[d.pop("type")]
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- network


@dataclass
class Tape:
    caches: list
    version: int
    training: bool
    batch: int
    consumed: bool = field(default=False)


class Network:
    def __init__(self, layers, input_shape, seed=0, params=None, buffers=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shape = self.shapes[-1]
            if isinstance(layer, ResidualAdd):
                if not 0 <= layer.source <= i:
                    raise ShapeError(f"layer {i}: residual source {layer.source} out of range")
                self.shapes.append(layer.out_shape(shape, self.shapes[layer.source]))
            else:
                self.shapes.append(layer.out_shape(shape))
        if len(self.shapes[-1]) != 1:
            raise ShapeError(f"network must end in a flat logit vector, got {self.shapes[-1]}")

        rng = np.random.default_rng(seed)
        self.params = {}
        self.buffers = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                init = layer.init_params(self.shapes[i], self.shapes[layer.source], rng)
            elif hasattr(layer, "init_params"):
                init = layer.init_params(self.shapes[i], rng)
            else:
                init = {}
            for k, v in init.items():
                self.params[f"{i}.{k}"] = v
            if isinstance(layer, BatchNorm):
                for k, v in layer.init_buffers().items():
                    self.buffers[f"{i}.{k}"] = v
        if params is not None:
            self._load(self.params, params, "parameter")
        if buffers is not None:
            self._load(self.buffers, buffers, "buffer")
        self.training = True
        self.version = 0

    @staticmethod
    def _load(target, source, what):
        if set(source) != set(target):
            raise ShapeError(f"{what} names differ: {sorted(set(source) ^ set(target))}")
        for k, v in source.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != target[k].shape:
                raise ShapeError(f"{what} {k}: shape {v.shape} != {target[k].shape}")
            target[k] = v.copy()

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def layer_params(self, i) -> dict:
        prefix = f"{i}."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def layer_buffers(self, i) -> dict:
        prefix = f"{i}."
        return {k[len(prefix) :]: v for k, v in self.buffers.items() if k.startswith(prefix)}

    def mark_updated(self):
        """Invalidate tapes recorded before an in-place parameter change."""
        self.version += 1

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} != network input {self.input_shape}")
        acts = [x]
        caches = []
        for i, layer in enumerate(self.layers):
            p = self.layer_params(i)
            if isinstance(layer, ResidualAdd):
                y, cache = layer.forward(p, x, acts[layer.source])
            else:
                buf = self.layer_buffers(i)
                y, cache = layer.forward(p, buf, x, self.training)
                if self.training and buf:
                    for k, v in buf.items():
                        self.buffers[f"{i}.{k}"] = v
            caches.append(cache)
            acts.append(y)
            x = y
        tape = Tape(caches=caches, version=self.version, training=self.training, batch=x.shape[0])
        return x, tape

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, tape: Tape, dlogits) -> dict:
        if not tape.training:
            raise StateError("backward needs a tape recorded in training mode")
        if tape.version != self.version or tape.consumed:
            raise StateError("tape is stale: parameters changed since it was recorded")
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != (tape.batch,) + self.shapes[-1]:
            raise ShapeError(f"logit gradient shape {dlogits.shape} does not match the tape")
        tape.consumed = True
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        pending = {}  # extra gradient flowing into activation index from shortcuts
        dy = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            if i + 1 in pending:
                dy = dy + pending.pop(i + 1)
            layer = self.layers[i]
            p = self.layer_params(i)
            if isinstance(layer, ResidualAdd):
                dy, dsrc, g = layer.backward(p, tape.caches[i], dy, self.shapes[layer.source])
                if layer.source == i:
                    dy = dy + dsrc
                else:
                    pending[layer.source] = pending.get(layer.source, 0) + dsrc
            else:
                dy, g = layer.backward(p, tape.caches[i], dy)
            for k, v in g.items():
                grads[f"{i}.{k}"] += v
        return grads

    def predict(self, x, batch_size=512) -> np.ndarray:
        """Eval-mode logits, batched; leaves the mode flag untouched."""
        was = self.training
        self.training = False
        try:
            out = [self.forward(x[s : s + batch_size])[0] for s in range(0, len(x), batch_size)]
        finally:
            self.training = was
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def accuracy(self, x, y, batch_size=512) -> float:
        if len(x) == 0:
            return 0.0
        return float(np.mean(self.predict(x, batch_size).argmax(axis=1) == y))

    def compressible(self) -> list[int]:
        """Indices of conv/linear layers whose weights get low-rank treatment."""
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Conv2d, Linear))]

    def following_bn(self, i) -> int | None:
        j = i + 1
        if j < len(self.layers) and isinstance(self.layers[j], BatchNorm):
            return j
        return None

    def weight_matrix(self, i) -> np.ndarray:
        w = self.params[f"{i}.weight"]
        return kernel_to_matrix(w) if w.ndim == 4 else w

    def set_weight_matrix(self, i, mat):
        w = self.params[f"{i}.weight"]
        self.params[f"{i}.weight"] = np.asarray(mat, dtype=np.float64).reshape(w.shape).copy()
        self.mark_updated()

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# ---------------------------------------------------------------- loss, optimizer


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def sgd_step(params, grads, velocity, lr, momentum=0.0, weight_decay=0.0, no_decay=()):
    """Classical momentum SGD with weight decay folded into the gradient.

    ``velocity`` is updated in place (missing entries start at zero);
    parameters named in ``no_decay`` skip weight decay.
    """
    for k, p in params.items():
        g = grads[k]
        if weight_decay and k not in no_decay:
            g = g + weight_decay * p
        v = velocity.get(k)
        v = g.copy() if v is None else momentum * v + g
        velocity[k] = v
        params[k] = p - lr * v
    return params


def bn_param_names(net: Network) -> set[str]:
    return {
        f"{i}.{k}"
        for i, layer in enumerate(net.layers)
        if isinstance(layer, BatchNorm)
        for k in ("weight", "bias")
    }


# ---------------------------------------------------------------- model builders


def desk_cnn(input_shape=(1, 12, 12), classes=10, widths=(16, 32), bias=False) -> list:
    """conv-BN-ReLU-pool blocks followed by a linear head."""
    layers = []
    c, h, w = input_shape
    for width in widths:
        layers += [Conv2d(c, width, 3, 3, pad=1, bias=bias), BatchNorm(width), ReLU(), AvgPool(2)]
        c, h, w = width, h // 2, w // 2
    layers += [Flatten(), Linear(c * h * w, classes)]
    return layers


def mlp(n_in, hidden=(64,), classes=10, batchnorm=True) -> list:
    layers = []
    width = n_in
    for hdim in hidden:
        layers.append(Linear(width, hdim, bias=not batchnorm))
        if batchnorm:
            layers.append(BatchNorm(hdim))
        layers.append(ReLU())
        width = hdim
    layers.append(Linear(width, classes))
    return layers


def small_resnet(input_shape=(1, 12, 12), classes=10, widths=(8, 16), shortcut="A") -> list:
    """Stem conv plus one residual block per width; stages after the first downsample."""
    c = input_shape[0]
    layers = [Conv2d(c, widths[0], 3, 3, pad=1), BatchNorm(widths[0]), ReLU()]
    c = widths[0]
    for k, width in enumerate(widths):
        stride = 1 if k == 0 else 2
        src = len(layers)
        layers += [
            Conv2d(c, width, 3, 3, stride=stride, pad=1),
            BatchNorm(width),
            ReLU(),
            Conv2d(width, width, 3, 3, pad=1),
            BatchNorm(width),
            ResidualAdd(src, shortcut),
            ReLU(),
        ]
        c = width
    h = input_shape[1]
    for _ in widths[1:]:
        h = (h + 1) // 2
    layers += [AvgPool(h), Flatten(), Linear(c, classes)]
    return layers


BUILDERS = {"desk_cnn": desk_cnn, "mlp": mlp, "small_resnet": small_resnet}
