"""Fixed-point tensors and the symmetric powers-of-two 8-bit quantization scheme.

A stored int8 entry ``v`` with exponent ``dec`` represents the real value
``v * 2**(dec - 7)``, i.e. ``2**dec`` is the magnitude the 8 bits must cover.
All arithmetic that feeds the integer inference engine lives here:
float->int8 quantization, the inverse, and the rounding right-shift used to
renormalize 32-bit accumulators back to int8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import QuantizationError

INT8_MIN = -128
INT8_MAX = 127


@dataclass(frozen=True)
class QTensor:
    """Immutable int8 tensor plus its power-of-two exponent."""

    values: np.ndarray
    dec: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype != np.int8:
            raise QuantizationError(f"QTensor values must be int8, got {v.dtype}")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "dec", int(self.dec))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, QTensor):
            return NotImplemented
        return self.dec == other.dec and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.dec, self.values.tobytes(), self.values.shape))


def compute_dec(x) -> int:
    """Exponent dec = ceil(log2(max|x|)); an all-zero tensor maps to dec = 0."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise QuantizationError("non-finite values in tensor")
    m = float(np.max(np.abs(arr))) if arr.size else 0.0
    if m == 0.0:
        return 0
    # m = frac * 2**exp with frac in [0.5, 1); exact, unlike log2 round-off.
    frac, exp = math.frexp(m)
    return exp - 1 if frac == 0.5 else exp


def quantize(x, dec: int) -> QTensor:
    """Round x * 2**(7-dec) to nearest (ties away from zero), saturate to int8."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise QuantizationError("non-finite values in tensor")
    scaled = arr * 2.0 ** (7 - dec)
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    q = np.clip(q, INT8_MIN, INT8_MAX)
    return QTensor(q.astype(np.int8), dec)


def dequantize(q: QTensor) -> np.ndarray:
    """Element-wise v * 2**(dec - 7) as float64."""
    return q.values.astype(np.float64) * 2.0 ** (q.dec - 7)


def requantize_shift(acc, shift: int) -> np.ndarray:
    """Rounding arithmetic right-shift of accumulators, saturated to int8.

    For shift > 0 adds 2**(shift-1) before the (floor-division) shift, the
    round-half-up convention of the integer backend.
    """
    if shift < 0:
        raise QuantizationError(f"shift must be >= 0, got {shift}")
    a = np.asarray(acc)
    if not np.issubdtype(a.dtype, np.integer):
        a = np.asarray(acc, dtype=np.int64)
        if not np.array_equal(a, np.asarray(acc)):
            raise QuantizationError("accumulators must be integer-valued")
    a = a.astype(np.int64)
    if shift > 0:
        a = (a + (1 << (shift - 1))) >> shift
    return np.clip(a, INT8_MIN, INT8_MAX).astype(np.int8)
