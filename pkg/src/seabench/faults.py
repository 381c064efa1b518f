"""Data-dependent fault injection on stored parameters (read-time overlay).

Bit indexing follows the two's-complement notation b_0 .. b_7 with b_0 the
most significant (sign) bit, so bit_index 0 targets machine bit 7 of the byte.
A bit-set forces the target bit to 1 (safe when it already is 1); a bit-reset
forces it to 0.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .engine import Conv2d, Linear, PredictionVector, QuantModel, _forward_batch
from .errors import ValidationError


class Polarity(enum.Enum):
    SET = "set"
    RESET = "reset"


@dataclass(frozen=True)
class FaultSpec:
    """One targeted bit of one stored parameter.

    layer_index addresses the model's layer list (must be a weighted layer);
    param_index is the row-major flat index into that layer's weight tensor.
    """

    layer_index: int
    param_index: int
    bit_index: int
    polarity: Polarity = Polarity.SET

    def __post_init__(self):
        if not 0 <= self.bit_index <= 7:
            raise ValidationError(f"bit_index must be in [0, 7], got {self.bit_index}")

    @property
    def mask(self) -> int:
        return 0x80 >> self.bit_index

    def validate(self, model: QuantModel) -> None:
        if not 0 <= self.layer_index < len(model.layers):
            raise ValidationError(f"layer index {self.layer_index} out of range")
        layer = model.layers[self.layer_index]
        if not isinstance(layer, (Linear, Conv2d)):
            raise ValidationError(f"layer {self.layer_index} has no stored parameters")
        if not 0 <= self.param_index < layer.weight.size:
            raise ValidationError(
                f"param index {self.param_index} out of range for layer {self.layer_index} "
                f"({layer.weight.size} parameters)"
            )

    def __str__(self) -> str:
        return f"L{self.layer_index}:{self.param_index}:b{self.bit_index}:{self.polarity.value}"

    @classmethod
    def from_string(cls, text: str) -> "FaultSpec":
        parts = text.strip().split(":")
        try:
            if len(parts) != 4 or not parts[0].startswith("L") or not parts[2].startswith("b"):
                raise ValueError
            return cls(int(parts[0][1:]), int(parts[1]), int(parts[2][1:]), Polarity(parts[3]))
        except ValueError:
            raise ValidationError(f"bad fault spec {text!r}; expected L<layer>:<param>:b<bit>:<set|reset>")


def apply_fault(byte: int, spec: FaultSpec) -> int:
    """Fault one int8 value; all other bits are untouched."""
    u = int(byte) & 0xFF
    u = u | spec.mask if spec.polarity is Polarity.SET else u & ~spec.mask & 0xFF
    return u - 256 if u >= 128 else u


def fault_array(values: np.ndarray, bit_index: int, polarity: Polarity) -> np.ndarray:
    """Vectorized apply_fault over an int8 array."""
    mask = np.uint8(0x80 >> bit_index)
    u = values.view(np.uint8) if values.dtype == np.int8 else values.astype(np.int8).view(np.uint8)
    u = (u | mask) if polarity is Polarity.SET else (u & np.uint8(~mask & 0xFF))
    return u.view(np.int8)


def faulted_infer(model: QuantModel, x: np.ndarray, spec: FaultSpec) -> PredictionVector:
    """Inference with the targeted parameter read through the fault overlay.

    The model object is never mutated; the fault applies to every read of the
    parameter within this single inference.
    """
    spec.validate(model)
    layer = model.layers[spec.layer_index]
    values = layer.weight.values.copy()
    flat = values.reshape(-1)
    flat[spec.param_index] = apply_fault(int(flat[spec.param_index]), spec)
    x = np.asarray(x)
    scores = _forward_batch(model, x[None], weight_override={spec.layer_index: values})[0]
    return PredictionVector(scores)
