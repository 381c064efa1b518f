"""Bit-exact integer inference for the fixed MLP / small-CNN layer set.

Integer MACs are accumulated in float64, which is exact for int8 dot products
of the sizes used here (max 1600 * 127 * 127 << 2**53) and lets the engine use
BLAS instead of numpy's slow integer matmul. Accumulators are then requantized
with int64 shift semantics, so results are identical to a pure int32 backend.

Prediction scores follow the embedded-runtime convention: the softmax of the
dequantized logits is mapped to integers via floor(127 * p), so scores live in
[0, 127] and a single 127 appears only for a (numerically) certain prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ValidationError
from .qtensor import QTensor, requantize_shift

SCORE_MAX = 127


@dataclass(frozen=True)
class Linear:
    """Fully-connected layer, no bias. weight shape (n_out, n_in)."""

    weight: QTensor
    in_dec: int
    out_dec: int


@dataclass(frozen=True)
class Conv2d:
    """5x5 convolution, stride 1, padding 2, no bias. weight (c_out, c_in, 5, 5)."""

    weight: QTensor
    in_dec: int
    out_dec: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AvgPool2x2:
    pass


@dataclass(frozen=True)
class SoftmaxScore:
    """Terminal layer mapping int8 logits (at exponent in_dec) to scores."""

    in_dec: int


Layer = Union[Linear, Conv2d, ReLU, AvgPool2x2, SoftmaxScore]


def shift_amount(in_dec: int, w_dec: int, out_dec: int) -> int:
    """Right-shift renormalizing an (in_dec, w_dec) product to out_dec."""
    return (7 - in_dec) + (7 - w_dec) - (7 - out_dec)


@dataclass(frozen=True)
class PredictionVector:
    """K scores in [0, 127]; argmax ties resolve to the lowest index."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores)
        if s.dtype != np.int8 or s.ndim != 1:
            raise ValidationError("scores must be a 1-D int8 array")
        if s.size < 2:
            raise ValidationError("need at least two labels")
        if np.any(s < 0):
            raise ValidationError("scores must be non-negative")
        s = np.ascontiguousarray(s)
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def label(self) -> int:
        return int(np.argmax(self.scores))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PredictionVector):
            return NotImplemented
        return np.array_equal(self.scores, other.scores)

    def __hash__(self):
        return hash(self.scores.tobytes())


@dataclass(frozen=True)
class QuantModel:
    """Ordered layer list; immutable after construction, safe to share."""

    input_shape: tuple
    input_dec: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes, _ = _trace_shapes(self)
        object.__setattr__(self, "_boundary_shapes", tuple(shapes))

    @property
    def boundary_shapes(self) -> tuple:
        """Shape after each layer; index i is the output of layers[i]."""
        return self._boundary_shapes

    @property
    def num_labels(self) -> int:
        return self._boundary_shapes[-1][0]

    @property
    def weighted_indices(self) -> tuple:
        return tuple(i for i, l in enumerate(self.layers) if isinstance(l, (Linear, Conv2d)))

    def param_count(self) -> int:
        return sum(self.layers[i].weight.size for i in self.weighted_indices)

    def replace_weight(self, layer_index: int, values: np.ndarray) -> "QuantModel":
        """New model with one layer's weight values swapped (same dec)."""
        import dataclasses

        layer = self.layers[layer_index]
        if not isinstance(layer, (Linear, Conv2d)):
            raise ValidationError(f"layer {layer_index} has no weights")
        new_w = QTensor(values.astype(np.int8), layer.weight.dec)
        if new_w.shape != layer.weight.shape:
            raise ValidationError("replacement weight shape mismatch")
        new_layer = dataclasses.replace(layer, weight=new_w)
        layers = list(self.layers)
        layers[layer_index] = new_layer
        return QuantModel(self.input_shape, self.input_dec, tuple(layers))


def _trace_shapes(model: QuantModel):
    """Validate layer chaining; returns (per-layer output shapes, final dec)."""
    shape = model.input_shape
    dec = model.input_dec
    shapes = []
    if not model.layers:
        raise ValidationError("model has no layers")
    for i, layer in enumerate(model.layers):
        terminal = i == len(model.layers) - 1
        if isinstance(layer, SoftmaxScore) and not terminal:
            raise ValidationError("SoftmaxScore must be the terminal layer")
        if isinstance(layer, Linear):
            w = layer.weight
            if w.values.ndim != 2:
                raise ValidationError(f"layer {i}: Linear weight must be 2-D")
            flat = int(np.prod(shape))  # spatial inputs are flattened row-major
            if flat != w.shape[1]:
                raise ValidationError(
                    f"layer {i}: Linear expects {w.shape[1]} inputs, got {shape}"
                )
            if layer.in_dec != dec:
                raise ValidationError(f"layer {i}: in_dec {layer.in_dec} != incoming {dec}")
            if shift_amount(layer.in_dec, w.dec, layer.out_dec) < 0:
                raise ValidationError(f"layer {i}: negative requantization shift")
            shape, dec = (w.shape[0],), layer.out_dec
        elif isinstance(layer, Conv2d):
            w = layer.weight
            if w.values.ndim != 4 or w.shape[2:] != (5, 5):
                raise ValidationError(f"layer {i}: Conv2d weight must be (c_out, c_in, 5, 5)")
            if len(shape) != 3 or shape[0] != w.shape[1]:
                raise ValidationError(
                    f"layer {i}: Conv2d expects ({w.shape[1]}, H, W) input, got {shape}"
                )
            if layer.in_dec != dec:
                raise ValidationError(f"layer {i}: in_dec {layer.in_dec} != incoming {dec}")
            if shift_amount(layer.in_dec, w.dec, layer.out_dec) < 0:
                raise ValidationError(f"layer {i}: negative requantization shift")
            shape, dec = (w.shape[0], shape[1], shape[2]), layer.out_dec
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, AvgPool2x2):
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ValidationError(f"layer {i}: AvgPool2x2 needs even (C, H, W), got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif isinstance(layer, SoftmaxScore):
            if len(shape) != 1 or shape[0] < 2:
                raise ValidationError(f"layer {i}: SoftmaxScore needs a logit vector, got {shape}")
            if layer.in_dec != dec:
                raise ValidationError(f"layer {i}: in_dec {layer.in_dec} != incoming {dec}")
        else:
            raise ValidationError(f"layer {i}: unknown layer kind {type(layer).__name__}")
        shapes.append(shape)
    if not isinstance(model.layers[-1], SoftmaxScore):
        raise ValidationError("model must end with SoftmaxScore")
    return shapes, dec


# ---------------------------------------------------------------------------
# layer ops (batched: leading axis is the sample axis)
# ---------------------------------------------------------------------------


def relu_q(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def avgpool2x2(x: np.ndarray) -> np.ndarray:
    """2x2 average pool, stride 2; rounding shift of the 4-element sum."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValidationError(f"avgpool2x2 needs even spatial dims, got {x.shape}")
    s = (
        x[..., 0::2, 0::2].astype(np.int64)
        + x[..., 0::2, 1::2]
        + x[..., 1::2, 0::2]
        + x[..., 1::2, 1::2]
    )
    return requantize_shift(s, 2)


def linear_accumulate(x: np.ndarray, weight: QTensor) -> np.ndarray:
    """Exact int accumulators of W @ x for a batch, as int64. x: (N, n_in)."""
    acc = x.astype(np.float64) @ weight.values.T.astype(np.float64)
    return acc.astype(np.int64)


def linear_forward(x: np.ndarray, layer: Linear) -> np.ndarray:
    if x.shape[-1] != layer.weight.shape[1]:
        raise ValidationError(
            f"linear input length {x.shape[-1]} != weight n_in {layer.weight.shape[1]}"
        )
    acc = linear_accumulate(np.atleast_2d(x), layer.weight)
    out = requantize_shift(acc, shift_amount(layer.in_dec, layer.weight.dec, layer.out_dec))
    return out if x.ndim > 1 else out[0]


def conv2d_accumulate(x: np.ndarray, weight: QTensor) -> np.ndarray:
    """Exact accumulators for 5x5/s1/p2 convolution, as int64. x: (N, C, H, W)."""
    n, c, h, w = x.shape
    c_out = weight.shape[0]
    xpad = np.zeros((n, c, h + 4, w + 4), dtype=np.float64)
    xpad[:, :, 2 : h + 2, 2 : w + 2] = x
    acc = np.zeros((n, c_out, h, w), dtype=np.float64)
    wk = weight.values.astype(np.float64)
    for ky in range(5):
        for kx in range(5):
            view = xpad[:, :, ky : ky + h, kx : kx + w]
            # (N,C,H,W) x (c_out,C) over the channel axis -> (N,H,W,c_out)
            acc += np.tensordot(view, wk[:, :, ky, kx], axes=([1], [1])).transpose(0, 3, 1, 2)
    return acc.astype(np.int64)


def conv2d_forward(x: np.ndarray, layer: Conv2d) -> np.ndarray:
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.shape[1] != layer.weight.shape[1]:
        raise ValidationError(
            f"conv input channels {xb.shape[1]} != weight c_in {layer.weight.shape[1]}"
        )
    acc = conv2d_accumulate(xb, layer.weight)
    out = requantize_shift(acc, shift_amount(layer.in_dec, layer.weight.dec, layer.out_dec))
    return out[0] if single else out


def softmax_scores(logits: np.ndarray, logit_dec: int) -> np.ndarray:
    """floor(127 * softmax(dequantized logits)); batched over the leading axis."""
    z = np.atleast_2d(logits).astype(np.float64) * 2.0 ** (logit_dec - 7)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    s = np.floor(SCORE_MAX * p).astype(np.int8)
    return s if np.asarray(logits).ndim > 1 else s[0]


# ---------------------------------------------------------------------------
# model forward
# ---------------------------------------------------------------------------

_CONV_CHUNK = 256


def _forward_batch(model: QuantModel, x: np.ndarray, modifiers=None, weight_override=None):
    """Run all layers on a batch (N, *input_shape) -> scores (N, K).

    modifiers: optional {layer_index: fn(int8 batch) -> int8 batch} applied to
    that layer's output (randomized-scaling defense hook).
    weight_override: optional {layer_index: int8 ndarray} replacing a layer's
    weight values for this call only (fault overlay).
    """
    act = x
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            if weight_override and i in weight_override:
                layer = Linear(QTensor(weight_override[i], layer.weight.dec),
                               layer.in_dec, layer.out_dec)
            if act.ndim > 2:
                act = act.reshape(act.shape[0], -1)
            act = linear_forward(act, layer)
        elif isinstance(layer, Conv2d):
            if weight_override and i in weight_override:
                layer = Conv2d(QTensor(weight_override[i], layer.weight.dec),
                               layer.in_dec, layer.out_dec)
            act = conv2d_forward(act, layer)
        elif isinstance(layer, ReLU):
            act = relu_q(act)
        elif isinstance(layer, AvgPool2x2):
            act = avgpool2x2(act)
        elif isinstance(layer, SoftmaxScore):
            act = softmax_scores(act, layer.in_dec)
        if modifiers and i in modifiers:
            act = modifiers[i](act)
    return act


def forward_from(model: QuantModel, start: int, acts: np.ndarray) -> np.ndarray:
    """Resume inference at layers[start] given a batch of boundary activations.

    acts replaces the output of layers[start-1] (or the input for start=0).
    """
    act = acts
    for i in range(start, len(model.layers)):
        layer = model.layers[i]
        if isinstance(layer, Linear):
            if act.ndim > 2:
                act = act.reshape(act.shape[0], -1)
            act = linear_forward(act, layer)
        elif isinstance(layer, Conv2d):
            act = conv2d_forward(act, layer)
        elif isinstance(layer, ReLU):
            act = relu_q(act)
        elif isinstance(layer, AvgPool2x2):
            act = avgpool2x2(act)
        elif isinstance(layer, SoftmaxScore):
            act = softmax_scores(act, layer.in_dec)
    return act


def _check_input(model: QuantModel, x: np.ndarray, batched: bool):
    expect = model.input_shape
    got = x.shape[1:] if batched else x.shape
    if tuple(got) != expect:
        raise ValidationError(f"input shape {tuple(got)} != model input {expect}")
    if x.dtype != np.int8:
        raise ValidationError(f"input must be int8, got {x.dtype}")


def infer(model: QuantModel, x: np.ndarray) -> PredictionVector:
    """Deterministic nominal inference for one input."""
    x = np.asarray(x)
    _check_input(model, x, batched=False)
    scores = _forward_batch(model, x[None])[0]
    return PredictionVector(scores)


def infer_batch(model: QuantModel, x: np.ndarray, chunk: int = _CONV_CHUNK) -> np.ndarray:
    """Nominal inference for a batch; returns (N, K) int8 scores."""
    x = np.asarray(x)
    _check_input(model, x, batched=True)
    has_conv = any(isinstance(l, Conv2d) for l in model.layers)
    if not has_conv or x.shape[0] <= chunk:
        return _forward_batch(model, x)
    outs = [_forward_batch(model, x[i : i + chunk]) for i in range(0, x.shape[0], chunk)]
    return np.concatenate(outs, axis=0)


@dataclass
class ForwardTrace:
    """Nominal per-layer state for one input, consumed by the probe sweep."""

    boundaries: list  # boundaries[i] = int8 output of layers[i]
    accs: dict        # layer_index -> int64 accumulators (weighted layers only)
    scores: np.ndarray

    def input_to(self, model: QuantModel, i: int, x: np.ndarray) -> np.ndarray:
        return x if i == 0 else self.boundaries[i - 1]


def forward_trace(model: QuantModel, x: np.ndarray) -> ForwardTrace:
    """Single-input forward keeping every boundary activation and accumulator."""
    x = np.asarray(x)
    _check_input(model, x, batched=False)
    act = x[None]
    boundaries = []
    accs = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            if act.ndim > 2:
                act = act.reshape(act.shape[0], -1)
            acc = linear_accumulate(act, layer.weight)
            accs[i] = acc[0]
            act = requantize_shift(acc, shift_amount(layer.in_dec, layer.weight.dec, layer.out_dec))
        elif isinstance(layer, Conv2d):
            acc = conv2d_accumulate(act, layer.weight)
            accs[i] = acc[0]
            act = requantize_shift(acc, shift_amount(layer.in_dec, layer.weight.dec, layer.out_dec))
        elif isinstance(layer, ReLU):
            act = relu_q(act)
        elif isinstance(layer, AvgPool2x2):
            act = avgpool2x2(act)
        elif isinstance(layer, SoftmaxScore):
            act = softmax_scores(act, layer.in_dec)
        boundaries.append(act[0])
    return ForwardTrace(boundaries, accs, boundaries[-1])
