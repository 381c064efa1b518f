"""Float-domain models over the same fixed layer set, with exact backprop.

Gradients are hand-derived reverse-mode for the four layer kinds (linear,
5x5/s1/p2 convolution, ReLU, 2x2 average pool) plus softmax cross-entropy.
The same machinery drives victim training, constrained substitute training,
and the input-gradient ascent used for adversarial crafting. An implicit
flatten is applied when a spatial activation meets a linear layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


class FLinear:
    def __init__(self, weight):
        self.weight = np.asarray(weight)
        if self.weight.ndim != 2:
            raise ValidationError("FLinear weight must be 2-D")


class FConv2d:
    def __init__(self, weight):
        self.weight = np.asarray(weight)
        if self.weight.ndim != 4 or self.weight.shape[2:] != (5, 5):
            raise ValidationError("FConv2d weight must be (c_out, c_in, 5, 5)")


class FReLU:
    pass


class FAvgPool2x2:
    pass


@dataclass
class FloatModel:
    input_shape: tuple
    layers: list

    @property
    def weighted_indices(self) -> tuple:
        return tuple(i for i, l in enumerate(self.layers) if isinstance(l, (FLinear, FConv2d)))

    @property
    def num_labels(self) -> int:
        last = self.layers[self.weighted_indices[-1]]
        return last.weight.shape[0]

    def weights(self) -> dict:
        return {i: self.layers[i].weight for i in self.weighted_indices}

    def copy(self) -> "FloatModel":
        layers = []
        for l in self.layers:
            if isinstance(l, (FLinear, FConv2d)):
                layers.append(type(l)(l.weight.copy()))
            else:
                layers.append(type(l)())
        return FloatModel(self.input_shape, layers)

    def check_finite(self) -> None:
        for i, w in self.weights().items():
            if not np.all(np.isfinite(w)):
                raise ValidationError(f"non-finite weights in layer {i}")


def _conv_fwd(x, w):
    n, c, h, wd = x.shape
    xpad = np.zeros((n, c, h + 4, wd + 4), dtype=x.dtype)
    xpad[:, :, 2 : h + 2, 2 : wd + 2] = x
    out = np.zeros((n, w.shape[0], h, wd), dtype=x.dtype)
    for ky in range(5):
        for kx in range(5):
            view = xpad[:, :, ky : ky + h, kx : kx + wd]
            out += np.tensordot(view, w[:, :, ky, kx], axes=([1], [1])).transpose(0, 3, 1, 2)
    return out


def _conv_bwd(x, w, gout):
    n, c, h, wd = x.shape
    xpad = np.zeros((n, c, h + 4, wd + 4), dtype=x.dtype)
    xpad[:, :, 2 : h + 2, 2 : wd + 2] = x
    dw = np.zeros_like(w)
    dxpad = np.zeros_like(xpad)
    for ky in range(5):
        for kx in range(5):
            view = xpad[:, :, ky : ky + h, kx : kx + wd]
            dw[:, :, ky, kx] = np.tensordot(gout, view, axes=([0, 2, 3], [0, 2, 3]))
            dxpad[:, :, ky : ky + h, kx : kx + wd] += np.tensordot(
                gout, w[:, :, ky, kx], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
    return dw, dxpad[:, :, 2 : h + 2, 2 : wd + 2]


def forward_logits(model: FloatModel, x: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Logits for a batch; pass cache=[] to keep what backward() needs."""
    act = x
    for layer in model.layers:
        preflat = None
        if isinstance(layer, FLinear) and act.ndim > 2:
            preflat = act.shape
            act = act.reshape(act.shape[0], -1)
        if cache is not None:
            cache.append((act, preflat))
        if isinstance(layer, FLinear):
            act = act @ layer.weight.T
        elif isinstance(layer, FConv2d):
            act = _conv_fwd(act, layer.weight)
        elif isinstance(layer, FReLU):
            act = np.maximum(act, 0)
        elif isinstance(layer, FAvgPool2x2):
            act = (
                act[..., 0::2, 0::2] + act[..., 0::2, 1::2]
                + act[..., 1::2, 0::2] + act[..., 1::2, 1::2]
            ) / 4.0
        else:
            raise ValidationError(f"unknown float layer {type(layer).__name__}")
    return act


def backward(model: FloatModel, cache: list, dlogits: np.ndarray):
    """Reverse pass; returns ({layer_index: dW}, dx)."""
    grads = {}
    g = dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        x, preflat = cache[i]
        if isinstance(layer, FLinear):
            grads[i] = g.T @ x
            g = g @ layer.weight
        elif isinstance(layer, FConv2d):
            dw, g = _conv_bwd(x, layer.weight, g)
            grads[i] = dw
        elif isinstance(layer, FReLU):
            g = g * (x > 0)
        elif isinstance(layer, FAvgPool2x2):
            g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0
        if preflat is not None:
            g = g.reshape(preflat)
    return grads, g


def ce_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    eps = np.finfo(p.dtype).tiny
    loss = -float(np.mean(np.log(p[np.arange(n), labels] + eps)))
    dlogits = p
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def grad(model: FloatModel, x: np.ndarray, labels):
    """Exact CE gradients w.r.t. every weight tensor and the input."""
    single = x.ndim == len(model.input_shape)
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(labels))
    cache = []
    logits = forward_logits(model, xb, cache)
    _, dlogits = ce_loss(logits, yb)
    grads, dx = backward(model, cache, dlogits)
    return grads, (dx[0] if single else dx)


def he_init(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def float_mlp(rng: np.random.Generator, dims=(784, 128, 64, 10), dtype=np.float64) -> FloatModel:
    """Fully-connected ReLU net, no bias; default is the 128-64-10 reference."""
    layers = []
    for i in range(len(dims) - 1):
        layers.append(FLinear(he_init(rng, (dims[i + 1], dims[i]), dtype)))
        if i < len(dims) - 2:
            layers.append(FReLU())
    return FloatModel((dims[0],), layers)


def float_cnn(rng: np.random.Generator, in_shape=(3, 32, 32), channels=(32, 32, 64),
              n_classes=10, dtype=np.float64) -> FloatModel:
    """Conv(5x5)+ReLU+AvgPool stack with a linear head, no bias."""
    layers = []
    c_prev, h, w = in_shape
    for c in channels:
        layers.append(FConv2d(he_init(rng, (c, c_prev, 5, 5), dtype)))
        layers.append(FReLU())
        layers.append(FAvgPool2x2())
        c_prev, h, w = c, h // 2, w // 2
    layers.append(FLinear(he_init(rng, (n_classes, c_prev * h * w), dtype)))
    return FloatModel(in_shape, layers)
