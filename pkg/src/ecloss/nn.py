"""A small deterministic CNN with hand-written reverse mode and an SGD trainer.

Tensors are float64 numpy arrays in ``(batch, channel, height, width)``
layout.  All parameters live in one flat vector; layers read views of it.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .errors import DivergenceError, DomainError, ParseError
from .loss import LossConfig, ecloss_and_gradient, mutual_information, total_loss, update_beta
from .rng import stream

__all__ = [
    "Conv",
    "ReLU",
    "MaxPool",
    "Flatten",
    "Dense",
    "NetworkSpec",
    "reference_spec",
    "init_params",
    "forward",
    "softmax_cross_entropy",
    "StepResult",
    "loss_and_grad",
    "backward",
    "TrainerState",
    "train",
    "predict",
    "accuracy",
    "save_checkpoint",
    "load_checkpoint",
    "LOG_FIELDS",
]

DEBUG = os.environ.get("ECLOSS_DEBUG", "") not in ("", "0")


@dataclass(frozen=True)
class Conv:
    k: int
    cin: int
    cout: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int


def _layer_str(layer):
    if isinstance(layer, Conv):
        return f"conv={layer.k},{layer.cin},{layer.cout},{layer.stride},{layer.pad}"
    if isinstance(layer, MaxPool):
        return f"maxpool={layer.k},{layer.stride}"
    if isinstance(layer, Dense):
        return f"dense={layer.n_in},{layer.n_out}"
    return type(layer).__name__.lower()


_LAYER_TYPES = {"conv": Conv, "maxpool": MaxPool, "dense": Dense, "relu": ReLU, "flatten": Flatten}


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sequence plus the index of the conv layer whose ReLU output is constrained.

    The layer right after the target conv must be a :class:`ReLU`.
    """

    layers: tuple
    input_shape: tuple
    target_layer_index: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        t = self.target_layer_index
        if not (0 <= t < len(self.layers) - 1) or not isinstance(self.layers[t], Conv):
            raise DomainError(f"target_layer_index {t} is not a conv layer")
        if not isinstance(self.layers[t + 1], ReLU):
            raise DomainError("target conv layer must be followed by relu")
        self.shapes()  # validates the chain

    def shapes(self):
        """Per-sample output shape of every layer."""
        shape = self.input_shape
        out = []
        for n, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                c, h, w = _expect(shape, 3, n)
                if c != layer.cin:
                    raise DomainError(f"layer {n}: expects {layer.cin} channels, gets {c}")
                ho = K.conv_out_size(h, layer.k, layer.stride, layer.pad)
                wo = K.conv_out_size(w, layer.k, layer.stride, layer.pad)
                if ho < 1 or wo < 1:
                    raise DomainError(f"layer {n}: empty output")
                shape = (layer.cout, ho, wo)
            elif isinstance(layer, MaxPool):
                c, h, w = _expect(shape, 3, n)
                shape = (c, (h - layer.k) // layer.stride + 1, (w - layer.k) // layer.stride + 1)
                if shape[1] < 1 or shape[2] < 1:
                    raise DomainError(f"layer {n}: empty output")
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                (d,) = _expect(shape, 1, n)
                if d != layer.n_in:
                    raise DomainError(f"layer {n}: expects {layer.n_in} inputs, gets {d}")
                shape = (layer.n_out,)
            elif not isinstance(layer, ReLU):
                raise DomainError(f"layer {n}: unknown layer {layer!r}")
            out.append(shape)
        if len(shape) != 1:
            raise DomainError("network must end in a dense layer")
        return out

    @property
    def target_shape(self):
        return self.shapes()[self.target_layer_index]

    @property
    def n_classes(self):
        return self.shapes()[-1][0]

    def param_layout(self):
        """``[(layer_index, weight_slice, weight_shape, bias_slice), ...]``."""
        layout, pos = [], 0
        for n, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                wshape = (layer.cout, layer.cin * layer.k * layer.k)
                nb = layer.cout
            elif isinstance(layer, Dense):
                wshape = (layer.n_out, layer.n_in)
                nb = layer.n_out
            else:
                continue
            nw = wshape[0] * wshape[1]
            layout.append((n, slice(pos, pos + nw), wshape, slice(pos + nw, pos + nw + nb)))
            pos += nw + nb
        return layout

    @property
    def n_params(self):
        layout = self.param_layout()
        return layout[-1][3].stop if layout else 0

    def describe(self):
        c, h, w = self.input_shape
        parts = [f"input={c}x{h}x{w}", *map(_layer_str, self.layers), f"target={self.target_layer_index}"]
        return " ".join(parts)

    @classmethod
    def parse(cls, text):
        tokens = text.split()
        if len(tokens) < 3 or not tokens[0].startswith("input=") or not tokens[-1].startswith("target="):
            raise DomainError(f"malformed network description {text!r}")
        try:
            input_shape = tuple(int(v) for v in tokens[0][6:].split("x"))
            target = int(tokens[-1][7:])
            layers = []
            for tok in tokens[1:-1]:
                name, _, args = tok.partition("=")
                layer_type = _LAYER_TYPES[name]
                layers.append(layer_type(*(int(a) for a in args.split(","))) if args else layer_type())
        except (KeyError, TypeError, ValueError) as exc:
            raise DomainError(f"malformed network description {text!r}: {exc}") from None
        return cls(tuple(layers), input_shape, target)


def _expect(shape, ndim, n):
    if len(shape) != ndim:
        raise DomainError(f"layer {n}: expects {ndim}-D input, gets shape {shape}")
    return shape


def reference_spec(channels=16, n_classes=10, image_size=56):
    """Three 3x3 conv blocks, two 2x pools, a dense head.

    A ``56x56`` input gives a ``14x14`` target map.
    """
    s = image_size // 4
    layers = (
        Conv(3, 1, 8, 1, 1), ReLU(), MaxPool(2, 2),
        Conv(3, 8, 16, 1, 1), ReLU(), MaxPool(2, 2),
        Conv(3, 16, channels, 1, 1), ReLU(),
        Flatten(), Dense(channels * s * s, n_classes),
    )
    return NetworkSpec(layers, (1, image_size, image_size), target_layer_index=6)


def init_params(spec: NetworkSpec, seed: int = 0) -> np.ndarray:
    """Glorot-uniform weights from a named seed stream, zero biases."""
    rng = stream(seed, "init")
    params = np.zeros(spec.n_params)
    for n, wsl, wshape, _ in spec.param_layout():
        layer = spec.layers[n]
        if isinstance(layer, Conv):
            fan_in, fan_out = layer.cin * layer.k ** 2, layer.cout * layer.k ** 2
        else:
            fan_in, fan_out = layer.n_in, layer.n_out
        a = math.sqrt(6.0 / (fan_in + fan_out))
        params[wsl] = rng.uniform(-a, a, size=wshape[0] * wshape[1])
    return params


def _weights(spec, params):
    out = {}
    for n, wsl, wshape, bsl in spec.param_layout():
        out[n] = (params[wsl].reshape(wshape), params[bsl])
    return out


def _check_images(spec, images):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise DomainError(f"images of shape {x.shape} do not match network input {spec.input_shape}")
    return x


def _run(spec, params, images):
    """Forward pass keeping what the backward pass needs."""
    if np.shape(params) != (spec.n_params,):
        raise DomainError(f"expected {spec.n_params} parameters, got {np.shape(params)}")
    x = _check_images(spec, images)
    weights = _weights(spec, params)
    caches = []
    for n, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            w, b = weights[n]
            cols = K.im2col(x, layer.k, layer.stride, layer.pad)
            ho = K.conv_out_size(x.shape[2], layer.k, layer.stride, layer.pad)
            wo = K.conv_out_size(x.shape[3], layer.k, layer.stride, layer.pad)
            caches.append((cols, x.shape))
            x = (np.matmul(w, cols) + b[:, None]).reshape(x.shape[0], layer.cout, ho, wo)
        elif isinstance(layer, ReLU):
            caches.append(x > 0)
            x = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool):
            x_shape = x.shape
            x, arg = K.maxpool_forward(x, layer.k, layer.stride)
            caches.append((arg, x_shape))
        elif isinstance(layer, Flatten):
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            w, b = weights[n]
            caches.append(x)
            x = x @ w.T + b
        if DEBUG and not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite output at layer {n} ({_layer_str(layer)})")
        if n == spec.target_layer_index + 1:
            features = x
    return x, features, caches, weights


def forward(spec: NetworkSpec, params, images):
    """Return ``(logits, target_features)``; features are post-ReLU."""
    logits, features, _, _ = _run(spec, params, images)
    return logits, features


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / b``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    b, n = z.shape
    if y.shape != (b,) or np.any(y < 0) or np.any(y >= n):
        raise DomainError(f"labels must be {b} integers in [0, {n})")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -math.fsum(logp[np.arange(b), y].tolist()) / b
    grad = np.exp(logp)
    grad[np.arange(b), y] -= 1.0
    return loss, grad / b


class StepResult(NamedTuple):
    total: float
    cls_loss: float
    mi: float
    grad: np.ndarray


def loss_and_grad(spec, params, images, labels, tset, config: LossConfig) -> StepResult:
    """Total loss ``alpha*CE - beta*MI`` and its gradient w.r.t. all parameters.

    The MI gradient enters at the target layer's post-ReLU output; with
    ``beta == 0`` it is not added at all, so the run is bitwise identical to
    pure cross-entropy training.
    """
    logits, features, caches, weights = _run(spec, params, images)
    cls_loss, dz = softmax_cross_entropy(logits, labels)
    if config.beta > 0:
        neg_mi, dfeat = ecloss_and_gradient(features, tset)
        mi = -neg_mi
    else:
        mi = mutual_information(features, tset).mi
        dfeat = None
    grad = np.zeros(spec.n_params)
    layout = {n: (wsl, bsl) for n, wsl, _, bsl in spec.param_layout()}
    g = config.alpha * dz
    for n in range(len(spec.layers) - 1, -1, -1):
        layer, cache = spec.layers[n], caches[n]
        if n == spec.target_layer_index + 1 and dfeat is not None:
            g = g + config.beta * dfeat
        if isinstance(layer, Dense):
            w, _ = weights[n]
            wsl, bsl = layout[n]
            grad[wsl] = (g.T @ cache).ravel()
            grad[bsl] = g.sum(axis=0)
            g = g @ w
        elif isinstance(layer, Flatten):
            g = g.reshape(cache)
        elif isinstance(layer, ReLU):
            g = g * cache
        elif isinstance(layer, MaxPool):
            arg, x_shape = cache
            g = K.maxpool_backward(g, arg, x_shape)
        elif isinstance(layer, Conv):
            w, _ = weights[n]
            wsl, bsl = layout[n]
            cols, x_shape = cache
            gflat = g.reshape(g.shape[0], g.shape[1], -1)
            grad[wsl] = np.tensordot(gflat, cols, axes=([0, 2], [0, 2])).ravel()
            grad[bsl] = gflat.sum(axis=(0, 2))
            if n > 0:
                g = K.col2im(np.matmul(w.T, gflat), x_shape, layer.k, layer.stride, layer.pad)
    return StepResult(total_loss(cls_loss, mi, config), cls_loss, mi, grad)


def backward(spec, params, images, labels, tset, config: LossConfig):
    """``(total_loss, parameter_gradient)``."""
    r = loss_and_grad(spec, params, images, labels, tset, config)
    return r.total, r.grad


def predict(spec, params, images, batch_size=256):
    out = []
    for s in range(0, len(images), batch_size):
        logits, _ = forward(spec, params, images[s:s + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def accuracy(spec, params, images, labels):
    return float(np.mean(predict(spec, params, images) == np.asarray(labels)))


# -- training ----------------------------------------------------------------

LOG_FIELDS = ("step", "cls_loss", "mi", "total_loss", "beta")


@dataclass
class TrainerState:
    parameters: np.ndarray
    learning_rate: float = 0.03
    batch_size: int = 64
    step: int = 0
    rng_seed: int = 0
    loss_config: LossConfig = field(default_factory=LossConfig)
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")


def train(spec, dataset, state: TrainerState, epochs: int, tset, callback=None):
    """Plain SGD over ``dataset = (images, labels)`` for ``epochs`` epochs.

    Each epoch visits the samples in an order drawn from the named stream
    ``(rng_seed, "shuffle", epoch)``.  Returns the new state and the log as a
    list of ``(step, cls_loss, mi, total_loss, beta)`` tuples.  ``callback``,
    if given, is called as ``callback(epoch, state)`` after every epoch.
    """
    images, labels = dataset
    images = _check_images(spec, images)
    labels = np.asarray(labels)
    if len(images) == 0 or len(images) != len(labels):
        raise DomainError("dataset must be non-empty with one label per image")
    if epochs < 0:
        raise DomainError("epochs must be >= 0")
    params = np.array(state.parameters, dtype=np.float64)
    config = state.loss_config
    step = state.step
    history = list(state.history)
    log = []
    batches_per_epoch = -(-len(images) // state.batch_size)
    start_epoch = step // batches_per_epoch
    for epoch in range(start_epoch, start_epoch + epochs):
        order = stream(state.rng_seed, "shuffle", epoch).permutation(len(images))
        for s in range(0, len(order), state.batch_size):
            idx = order[s:s + state.batch_size]
            r = loss_and_grad(spec, params, images[idx], labels[idx], tset, config)
            if not (math.isfinite(r.total) and np.all(np.isfinite(r.grad))):
                raise DivergenceError(step, r.total)
            log.append((step, r.cls_loss, r.mi, r.total, config.beta))
            params -= state.learning_rate * r.grad
            step += 1
            history.append(r.total)
            if config.beta_schedule == "auto" and step % config.beta_window == 0:
                config = update_beta(config, history)
                history = history[-config.beta_window:]
        if callback is not None:
            callback(epoch, replace(state, parameters=params.copy(), step=step, loss_config=config))
    new_state = replace(state, parameters=params, step=step, loss_config=config, history=history)
    return new_state, log


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, spec: NetworkSpec, params):
    """``ECNN1`` header, network description, count, then one value per line."""
    params = np.asarray(params, dtype=np.float64)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("ECNN1\n")
        fh.write(spec.describe() + "\n")
        fh.write(f"{params.size}\n")
        fh.write("".join("%.16e\n" % v for v in params.tolist()))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    lines = data.split(b"\n")
    if lines[0] != b"ECNN1":
        raise ParseError("missing ECNN1 header", 0)
    offset = len(lines[0]) + 1
    try:
        spec = NetworkSpec.parse(lines[1].decode("ascii"))
    except (IndexError, DomainError, UnicodeDecodeError) as exc:
        raise ParseError(f"bad network description: {exc}", offset) from None
    offset += len(lines[1]) + 1
    try:
        count = int(lines[2])
    except (IndexError, ValueError):
        raise ParseError("bad parameter count", offset) from None
    offset += len(lines[2]) + 1
    body = [ln for ln in lines[3:] if ln]
    if count != spec.n_params:
        raise ParseError(f"parameter count {count} does not match network ({spec.n_params})", offset)
    if len(body) != count:
        raise ParseError(f"truncated: expected {count} values, found {len(body)}", len(data))
    try:
        params = np.array([float(v) for v in body])
    except ValueError:
        raise ParseError("non-numeric parameter value", offset) from None
    return spec, params
