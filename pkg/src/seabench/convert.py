"""Bridging the float and integer worlds: calibration, conversion, prediction.

Per-layer output exponents are calibrated from activation statistics over a
calibration batch, mirroring how deployment tools fix activation scales before
flashing a model.
"""

from __future__ import annotations

import numpy as np

from . import engine, floatnet
from .errors import ValidationError
from .qtensor import compute_dec, dequantize, quantize

CALIB_SAMPLES = 256


def float_images(images: np.ndarray, input_dec: int = 0) -> np.ndarray:
    """Dequantized pixel values as float64, the float models' input domain."""
    return images.astype(np.float64) * 2.0 ** (input_dec - 7)


def quantize_model(fmodel: floatnet.FloatModel, calib_images: np.ndarray,
                   input_dec: int = 0) -> engine.QuantModel:
    """8-bit model with weight exponents from the weights and activation
    exponents from a calibration batch (clamped so every shift is >= 0)."""
    if calib_images.ndim == len(fmodel.input_shape):
        calib_images = calib_images[None]
    cache = []
    logits = floatnet.forward_logits(fmodel, float_images(calib_images, input_dec), cache)

    def output_of(i: int) -> np.ndarray:
        return cache[i + 1][0] if i + 1 < len(fmodel.layers) else logits

    layers = []
    dec = input_dec
    for i, fl in enumerate(fmodel.layers):
        if isinstance(fl, (floatnet.FLinear, floatnet.FConv2d)):
            w_dec = compute_dec(fl.weight)
            out_dec = max(compute_dec(output_of(i)), dec + w_dec - 7)
            qw = quantize(fl.weight, w_dec)
            kind = engine.Linear if isinstance(fl, floatnet.FLinear) else engine.Conv2d
            layers.append(kind(qw, dec, out_dec))
            dec = out_dec
        elif isinstance(fl, floatnet.FReLU):
            layers.append(engine.ReLU())
        elif isinstance(fl, floatnet.FAvgPool2x2):
            layers.append(engine.AvgPool2x2())
        else:
            raise ValidationError(f"cannot quantize layer {type(fl).__name__}")
    layers.append(engine.SoftmaxScore(dec))
    return engine.QuantModel(fmodel.input_shape, input_dec, tuple(layers))


def dequantize_model(qmodel: engine.QuantModel) -> floatnet.FloatModel:
    """Float model carrying the dequantized weights (softmax layer dropped)."""
    layers = []
    for l in qmodel.layers:
        if isinstance(l, engine.Linear):
            layers.append(floatnet.FLinear(dequantize(l.weight)))
        elif isinstance(l, engine.Conv2d):
            layers.append(floatnet.FConv2d(dequantize(l.weight)))
        elif isinstance(l, engine.ReLU):
            layers.append(floatnet.FReLU())
        elif isinstance(l, engine.AvgPool2x2):
            layers.append(floatnet.FAvgPool2x2())
    return floatnet.FloatModel(qmodel.input_shape, layers)


def predict_labels(model, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    """argmax labels for int8 images under either model kind."""
    if isinstance(model, engine.QuantModel):
        scores = engine.infer_batch(model, images)
        return np.argmax(scores, axis=1)
    if isinstance(model, floatnet.FloatModel):
        outs = []
        x = float_images(images)
        for lo in range(0, x.shape[0], chunk):
            outs.append(np.argmax(floatnet.forward_logits(model, x[lo : lo + chunk]), axis=1))
        return np.concatenate(outs)
    raise ValidationError(f"unsupported model type {type(model).__name__}")
