"""Small dense-tensor reverse-mode engine.

Networks are plain stacks of layers.  Each layer caches what it needs during
``forward`` and consumes that cache in ``backward``, accumulating parameter
gradients into its :class:`Tensor` objects and returning the gradient with
respect to its input.  Activations travel as float64 numpy arrays with a
leading batch axis; images use the channels-first layout ``(N, C, H, W)``.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "flatten", "dropout", "softmax")


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense array with an optional gradient buffer of the same size."""

    __slots__ = ("values", "grad")

    def __init__(self, values, grad=None):
        self.values = np.ascontiguousarray(values, dtype=DTYPE)
        if grad is not None:
            grad = np.ascontiguousarray(grad, dtype=DTYPE)
            if grad.shape != self.values.shape:
                raise ShapeError(f"grad shape {grad.shape} != values shape {self.values.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad.fill(0.0)

    def copy(self) -> "Tensor":
        return Tensor(self.values.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, has_grad={self.grad is not None})"


ParamSet = "OrderedDict[str, Tensor]"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int | None = None
    channels: int | None = None
    kernel: int = 3
    rate: float = 0.5

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.units is None or self.units <= 0):
            raise ValueError("dense layer needs a positive 'units'")
        if self.kind == "conv2d":
            if self.channels is None or self.channels <= 0:
                raise ValueError("conv2d layer needs a positive 'channels'")
            if self.kernel <= 0:
                raise ValueError("conv2d kernel must be positive")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(DTYPE)


# --------------------------------------------------------------------- layers


class Layer:
    kind = ""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._cache = None

    def forward(self, x: np.ndarray, training: bool, rng: np.random.Generator | None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a prior forward")
        cache, self._cache = self._cache, None
        return cache


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, units: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.units = units
        self.params["W"] = Tensor(glorot_uniform(rng, (units, in_features), in_features, units))
        self.params["b"] = Tensor(np.zeros(units))

    def forward(self, x, training, rng):
        self._cache = x
        return x @ self.params["W"].values.T + self.params["b"].values

    def backward(self, grad):
        x = self._take_cache()
        W, b = self.params["W"], self.params["b"]
        if W.grad is None:
            W.zero_grad()
        if b.grad is None:
            b.zero_grad()
        W.grad += grad.T @ x
        b.grad += grad.sum(axis=0)
        return grad @ W.values


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # (N, C, H, W) -> (N, Ho, Wo, C*k*k), valid padding, stride 1
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    s = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, shape=(n, ho, wo, c, k, k), strides=(s[0], s[2], s[3], s[1], s[2], s[3]), writeable=False
    )
    return patches.reshape(n, ho, wo, c * k * k)


class Conv2d(Layer):
    """Valid-padding, stride-1 convolution (cross-correlation)."""

    kind = "conv2d"

    def __init__(self, in_shape: tuple[int, int, int], channels: int, kernel: int, rng):
        super().__init__()
        c, h, w = in_shape
        if kernel > h or kernel > w:
            raise ShapeError(f"conv2d kernel {kernel} exceeds input spatial size {h}x{w}")
        self.in_shape = in_shape
        self.kernel = kernel
        self.out_channels = channels
        fan_in = c * kernel * kernel
        fan_out = channels * kernel * kernel
        self.params["W"] = Tensor(glorot_uniform(rng, (channels, c, kernel, kernel), fan_in, fan_out))
        self.params["b"] = Tensor(np.zeros(channels))

    @property
    def out_shape(self):
        c, h, w = self.in_shape
        return (self.out_channels, h - self.kernel + 1, w - self.kernel + 1)

    def forward(self, x, training, rng):
        x = np.ascontiguousarray(x)
        cols = _im2col(x, self.kernel)
        self._cache = (x.shape, cols)
        Wm = self.params["W"].values.reshape(self.out_channels, -1)
        out = cols @ Wm.T + self.params["b"].values  # (N, Ho, Wo, Co)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        x_shape, cols = self._take_cache()
        W, b = self.params["W"], self.params["b"]
        if W.grad is None:
            W.zero_grad()
        if b.grad is None:
            b.zero_grad()
        k = self.kernel
        n, c, h, w = x_shape
        g = grad.transpose(0, 2, 3, 1)  # (N, Ho, Wo, Co)
        co = self.out_channels
        g2 = g.reshape(-1, co)
        W.grad += (g2.T @ cols.reshape(-1, c * k * k)).reshape(W.shape)
        b.grad += g2.sum(axis=0)
        dcols = (g2 @ W.values.reshape(co, -1)).reshape(n, h - k + 1, w - k + 1, c, k, k)
        dx = np.zeros(x_shape, dtype=DTYPE)
        ho, wo = h - k + 1, w - k + 1
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training, rng):
        self._cache = x > 0
        return np.maximum(x, 0.0)  # propagates NaN so divergence stays visible

    def backward(self, grad):
        return np.where(self._take_cache(), grad, 0.0)


class MaxPool2x2(Layer):
    """2x2 max pool, stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2x2"

    def forward(self, x, training, rng):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        xs = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
        xs = xs.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        # first maximal element wins ties
        idx = xs.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(xs, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        x_shape, idx = self._take_cache()
        n, c, h, w = x_shape
        h2, w2 = h // 2, w // 2
        onehot = (np.arange(4) == idx[..., None]) * grad[..., None]
        blocks = onehot.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        dx = np.zeros(x_shape, dtype=DTYPE)
        dx[:, :, : 2 * h2, : 2 * w2] = blocks
        return dx


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training, rng):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


class Dropout(Layer):
    """Inverted dropout: surviving units are scaled by 1/(1-rate) while training."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x, training, rng):
        if not training or self.rate == 0.0:
            self._cache = 1.0
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = rng.random(x.shape) >= self.rate
        scale = keep / (1.0 - self.rate)
        self._cache = scale
        return x * scale

    def backward(self, grad):
        scale = self._take_cache()
        return grad * scale


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training, rng):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, grad):
        p = self._take_cache()
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


# -------------------------------------------------------------------- network


class Network:
    """A sequential stack of layers built from a list of :class:`LayerSpec`."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int], rng: np.random.Generator):
        self.specs = tuple(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers: list[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            layer, shape = _build_layer(i, spec, shape, rng)
            self.layers.append(layer)
        self.output_shape = shape
        self._ran_forward = False

    def params(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, t in layer.params.items():
                out[f"{i}.{layer.kind}.{name}"] = t
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.params().values())

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.asarray(x.values if isinstance(x, Tensor) else x, dtype=DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"layer 0 ({self.specs[0].kind if self.specs else 'input'}) expects per-sample shape "
                f"{self.input_shape}, got {x.shape[1:]}"
            )
        for layer in self.layers:
            x = layer.forward(x, training, rng)
        self._ran_forward = True
        return x

    def backward(self, output_grad) -> np.ndarray:
        if not self._ran_forward:
            raise RuntimeError("backward called without a prior forward")
        g = np.asarray(output_grad.values if isinstance(output_grad, Tensor) else output_grad, dtype=DTYPE)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._ran_forward = False
        return g

    def zero_grad(self) -> None:
        for t in self.params().values():
            t.zero_grad()

    def flat_params(self) -> np.ndarray:
        """Flat dump of all parameter values in ``params()`` order."""
        ps = list(self.params().values())
        return np.concatenate([t.values.ravel() for t in ps]) if ps else np.zeros(0)

    def load_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != self.num_params():
            raise ShapeError(f"expected {self.num_params()} values, got {flat.size}")
        pos = 0
        for t in self.params().values():
            t.values[...] = flat[pos : pos + t.size].reshape(t.shape)
            pos += t.size


def _build_layer(i: int, spec: LayerSpec, shape: tuple, rng) -> tuple[Layer, tuple]:
    kind = spec.kind
    where = f"layer {i} ({kind})"
    if kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"{where} expects a flat input, got shape {shape}")
        return Dense(shape[0], spec.units, rng), (spec.units,)
    if kind == "conv2d":
        if len(shape) != 3:
            raise ShapeError(f"{where} expects a (C, H, W) input, got shape {shape}")
        try:
            layer = Conv2d(shape, spec.channels, spec.kernel, rng)
        except ShapeError as e:
            raise ShapeError(f"{where}: {e}") from None
        return layer, layer.out_shape
    if kind == "maxpool2x2":
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ShapeError(f"{where} expects a (C, H, W) input with H, W >= 2, got {shape}")
        return MaxPool2x2(), (shape[0], shape[1] // 2, shape[2] // 2)
    if kind == "flatten":
        return Flatten(), (int(np.prod(shape)),)
    if kind == "relu":
        return ReLU(), shape
    if kind == "dropout":
        return Dropout(spec.rate), shape
    if kind == "softmax":
        if len(shape) != 1:
            raise ShapeError(f"{where} expects a flat input, got shape {shape}")
        return Softmax(), shape
    raise ValueError(f"{where}: unknown kind")


# ------------------------------------------------------------- loss & optim


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, support=None) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against integer labels.

    Accepts a single logit vector with a scalar label, or a batch ``(N, C)`` with
    ``N`` labels; in the batched case loss and gradient are averaged over ``N``.
    ``support`` (0/1, same shape as ``logits``) restricts each softmax to the
    flagged entries; the label must lie inside the support and the gradient is
    exactly zero outside it.  Returns ``(loss, d loss / d logits)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range for {c} classes")
    rows = np.arange(n)
    if support is None:
        z = logits - logits.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(z).sum(axis=1))
        grad = np.exp(z - logsumexp[:, None])
    else:
        support = np.asarray(support, dtype=DTYPE).reshape(n, c)
        if np.any(support[rows, labels] == 0):
            raise ValueError("label outside the softmax support")
        z = logits - np.where(support > 0, logits, -np.inf).max(axis=1, keepdims=True)
        logsumexp = np.log((np.exp(z) * support).sum(axis=1))
        grad = np.exp(z - logsumexp[:, None]) * support
    logp = z[rows, labels] - logsumexp
    grad[rows, labels] -= 1.0
    loss = float(-logp.mean())
    grad /= n
    return loss, (grad[0] if single else grad)


def sgd_step(params, mu: float) -> None:
    """``p <- p - mu * grad(p)`` for every parameter, then zero the grads."""
    if not mu > 0:
        raise ValueError(f"learning rate must be positive, got {mu}")
    items = list(params.values()) if isinstance(params, dict) else list(params)
    for t in items:
        if t.grad is None:
            raise ValueError("sgd_step: parameter without a gradient buffer")
    for t in items:
        t.values -= mu * t.grad
        t.grad.fill(0.0)


def lr_schedule(step: int, total_steps: int, mu0: float) -> float:
    """Annealed rate ``mu0 / (1 + 10 p)^0.75`` with ``p = step / total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not mu0 > 0:
        raise ValueError("mu0 must be positive")
    p = step / total_steps
    return mu0 / (1.0 + 10.0 * p) ** 0.75


# ------------------------------------------------------------ gradient check


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    n = np.asarray(n, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
    return np.abs(a - n) / denom


def projection_loss(net: Network, x: np.ndarray, seed: int = 0) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """A fixed random linear functional of the network output, ``sum(R * out)``."""
    out_shape = (x.shape[0],) + tuple(net.output_shape)
    R = np.random.default_rng(seed).standard_normal(out_shape)

    def loss(out):
        return float((R * out).sum()), R

    return loss


def analytic_gradients(net: Network, x, loss_fn) -> list[np.ndarray]:
    for t in net.params().values():
        t.zero_grad()
    out = net.forward(x, training=False)
    _, g = loss_fn(out)
    net.backward(g)
    grads = [t.grad.copy() for t in net.params().values()]
    net.zero_grad()
    return grads


def numerical_gradients(net: Network, x, loss_fn, epsilon: float) -> list[np.ndarray]:
    grads = []
    for t in net.params().values():
        g = np.zeros_like(t.values)
        flat = t.values.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = loss_fn(net.forward(x, training=False))[0]
            flat[i] = orig - epsilon
            fm = loss_fn(net.forward(x, training=False))[0]
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * epsilon)
        grads.append(g)
    net._ran_forward = False
    return grads


def max_relative_error(analytic: Iterable[np.ndarray], numeric: Iterable[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(relative_error(a, n).max()))
    return worst


def grad_check(net: Network, x, epsilon: float = 1e-4, loss_fn=None) -> float:
    """Max relative error between backprop and central-difference gradients.

    The default loss is a fixed random projection of the output, which keeps
    the objective piecewise linear in each parameter for ReLU networks.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    x = np.asarray(x.values if isinstance(x, Tensor) else x, dtype=DTYPE)
    if loss_fn is None:
        loss_fn = projection_loss(net, x)
    a = analytic_gradients(net, x, loss_fn)
    n = numerical_gradients(net, x, loss_fn, epsilon)
    return max_relative_error(a, n)


def random_network(rng: np.random.Generator, max_layers: int = 4, max_params: int = 2000, kink_margin: float = 1e-2):
    """Draw a small random network (dense, or conv front-end + dense) and an input batch."""
    while True:
        if rng.random() < 0.5:
            c = int(rng.integers(1, 3))
            hw = int(rng.integers(5, 8))
            in_shape = (c, hw, hw)
            specs = [LayerSpec("conv2d", channels=int(rng.integers(1, 4)), kernel=int(rng.integers(2, 4))), LayerSpec("relu")]
            if rng.random() < 0.5:
                specs.append(LayerSpec("maxpool2x2"))
            specs += [LayerSpec("flatten"), LayerSpec("dense", units=int(rng.integers(2, 6)))]
        else:
            in_shape = (int(rng.integers(2, 10)),)
            n_dense = int(rng.integers(1, max_layers + 1))
            specs = []
            for k in range(n_dense):
                specs.append(LayerSpec("dense", units=int(rng.integers(2, 12))))
                if k < n_dense - 1:
                    specs.append(LayerSpec("relu"))
        n_weighted = sum(s.kind in ("dense", "conv2d") for s in specs)
        if n_weighted > max_layers:
            continue
        net = Network(specs, in_shape, rng)
        if net.num_params() <= max_params:
            # zero biases put fully dead inputs exactly on a ReLU kink
            for name, t in net.params().items():
                if name.endswith(".b"):
                    t.values[...] = rng.uniform(-0.5, 0.5, size=t.shape)
            x = rng.standard_normal((int(rng.integers(1, 4)),) + in_shape)
            if kink_distance(net, x) > kink_margin:
                return net, x


def kink_distance(net: Network, x) -> float:
    """Smallest distance of any ReLU input or max-pool runner-up to its kink.

    Central differences straddling a kink measure a one-sided slope, so gradient
    checks are only meaningful when this exceeds the perturbation's effect.
    """
    h = np.asarray(x, dtype=DTYPE)
    dist = np.inf
    for layer in net.layers:
        if isinstance(layer, ReLU) and h.size:
            dist = min(dist, float(np.abs(h).min()))
        elif isinstance(layer, MaxPool2x2) and h.size:
            n, c, hh, ww = h.shape
            h2, w2 = hh // 2, ww // 2
            xs = h[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
            xs = np.sort(xs.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4), axis=-1)
            gap = xs[..., -1] - xs[..., -2]
            # ties among dead ReLU outputs stay tied under small perturbations
            live = ~((gap == 0) & (xs[..., -1] == 0))
            if live.any():
                dist = min(dist, float(gap[live].min()))
        h = layer.forward(h, False, None)
    net._ran_forward = False
    for layer in net.layers:
        layer._cache = None
    return dist
