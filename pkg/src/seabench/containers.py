"""Binary containers for models, bit knowledge, and datasets, plus the
campaign record. All integers little-endian; every file ends with a CRC32 of
everything before it. Writes go through a temp file so failures never leave
partial artifacts.
"""

from __future__ import annotations

import base64
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine, floatnet
from .datasets import DatasetHandle
from .errors import ParseError, ValidationError
from .qtensor import QTensor
from .recovery import BitKnowledge

MODEL_MAGIC = b"QNNM"
KNOWLEDGE_MAGIC = b"QNNK"
DATASET_MAGIC = b"QNND"
FORMAT_VERSION = 1

KIND_LINEAR = 1
KIND_CONV = 2
KIND_RELU = 3
KIND_AVGPOOL = 4
KIND_SOFTMAX = 5
FLOAT_FLAG = 0x10  # kind | FLOAT_FLAG stores an f32 payload

FLAGS_QUANT = 0
FLAGS_FLOAT = 1


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _check_crc(data: bytes, origin: str) -> bytes:
    if len(data) < 4:
        raise ParseError(f"{origin}: too short for a checksum ({len(data)} bytes)")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if crc != actual:
        raise ParseError(
            f"{origin}: checksum mismatch at offset {len(body)} "
            f"(stored 0x{crc:08x}, computed 0x{actual:08x})"
        )
    return body


class _Reader:
    def __init__(self, data: bytes, origin: str):
        self.data = data
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(
                f"{self.origin}: truncated at offset {self.pos}, needed {n} more bytes"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ParseError(
                f"{self.origin}: {len(self.data) - self.pos} trailing bytes at offset {self.pos}"
            )


def _check_magic(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise ParseError(f"{r.origin}: bad magic {got!r} at offset 0, expected {magic!r}")
    (version,) = r.unpack("H")
    if version != FORMAT_VERSION:
        raise ParseError(f"{r.origin}: unsupported format version {version} at offset 4")


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


def _layer_record(kind: int, dims, decs, payload: bytes) -> bytes:
    out = struct.pack("<BB", kind, len(dims))
    out += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
    out += struct.pack("<bbb", *decs)
    return out + payload


def save_model(path, model) -> None:
    body = MODEL_MAGIC + struct.pack("<H", FORMAT_VERSION)
    if isinstance(model, engine.QuantModel):
        flags, input_dec = FLAGS_QUANT, model.input_dec
        layer_list = model.layers
    elif isinstance(model, floatnet.FloatModel):
        flags, input_dec = FLAGS_FLOAT, 0
        layer_list = model.layers
    else:
        raise ValidationError(f"cannot save a {type(model).__name__}")
    body += struct.pack("<Bb", flags, input_dec)
    body += struct.pack("<B", len(model.input_shape))
    body += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    body += struct.pack("<H", len(layer_list))
    for layer in layer_list:
        if isinstance(layer, engine.Linear):
            body += _layer_record(KIND_LINEAR, layer.weight.shape,
                                  (layer.weight.dec, layer.in_dec, layer.out_dec),
                                  layer.weight.values.tobytes())
        elif isinstance(layer, engine.Conv2d):
            body += _layer_record(KIND_CONV, layer.weight.shape,
                                  (layer.weight.dec, layer.in_dec, layer.out_dec),
                                  layer.weight.values.tobytes())
        elif isinstance(layer, engine.ReLU) or isinstance(layer, floatnet.FReLU):
            body += _layer_record(KIND_RELU, (), (0, 0, 0), b"")
        elif isinstance(layer, engine.AvgPool2x2) or isinstance(layer, floatnet.FAvgPool2x2):
            body += _layer_record(KIND_AVGPOOL, (), (0, 0, 0), b"")
        elif isinstance(layer, engine.SoftmaxScore):
            body += _layer_record(KIND_SOFTMAX, (), (0, layer.in_dec, 0), b"")
        elif isinstance(layer, floatnet.FLinear):
            body += _layer_record(KIND_LINEAR | FLOAT_FLAG, layer.weight.shape, (0, 0, 0),
                                  layer.weight.astype("<f4").tobytes())
        elif isinstance(layer, floatnet.FConv2d):
            body += _layer_record(KIND_CONV | FLOAT_FLAG, layer.weight.shape, (0, 0, 0),
                                  layer.weight.astype("<f4").tobytes())
        else:
            raise ValidationError(f"cannot serialize layer {type(layer).__name__}")
    _atomic_write(path, _with_crc(body))


def load_model(path):
    origin = Path(path).name
    r = _Reader(_check_crc(Path(path).read_bytes(), origin), origin)
    _check_magic(r, MODEL_MAGIC)
    flags, input_dec = r.unpack("Bb")
    (ndim,) = r.unpack("B")
    input_shape = tuple(r.unpack(f"{ndim}I"))
    (n_layers,) = r.unpack("H")
    layers = []
    for _ in range(n_layers):
        kind, nd = r.unpack("BB")
        dims = tuple(r.unpack(f"{nd}I")) if nd else ()
        w_dec, in_dec, out_dec = r.unpack("bbb")
        base = kind & ~FLOAT_FLAG
        is_float = bool(kind & FLOAT_FLAG)
        if base in (KIND_LINEAR, KIND_CONV):
            count = int(np.prod(dims))
            if is_float:
                w = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float64)
                layers.append(floatnet.FLinear(w) if base == KIND_LINEAR else floatnet.FConv2d(w))
            else:
                w = np.frombuffer(r.take(count), dtype=np.int8).reshape(dims)
                qt = QTensor(w, w_dec)
                cls = engine.Linear if base == KIND_LINEAR else engine.Conv2d
                layers.append(cls(qt, in_dec, out_dec))
        elif base == KIND_RELU:
            layers.append(floatnet.FReLU() if flags == FLAGS_FLOAT else engine.ReLU())
        elif base == KIND_AVGPOOL:
            layers.append(floatnet.FAvgPool2x2() if flags == FLAGS_FLOAT else engine.AvgPool2x2())
        elif base == KIND_SOFTMAX:
            layers.append(engine.SoftmaxScore(in_dec))
        else:
            raise ParseError(f"{origin}: unknown layer kind {kind} at offset {r.pos}")
    r.done()
    if flags == FLAGS_FLOAT:
        return floatnet.FloatModel(input_shape, layers)
    return engine.QuantModel(input_shape, input_dec, tuple(layers))


def models_equal(a, b) -> bool:
    if type(a) is not type(b) or tuple(a.input_shape) != tuple(b.input_shape):
        return False
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb):
            return False
        if isinstance(la, (engine.Linear, engine.Conv2d)):
            if la.weight != lb.weight or la.in_dec != lb.in_dec or la.out_dec != lb.out_dec:
                return False
        if isinstance(la, engine.SoftmaxScore) and la.in_dec != lb.in_dec:
            return False
        if isinstance(la, (floatnet.FLinear, floatnet.FConv2d)):
            if not np.array_equal(la.weight, lb.weight):
                return False
    if isinstance(a, engine.QuantModel) and a.input_dec != b.input_dec:
        return False
    return True


# ---------------------------------------------------------------------------
# knowledge container
# ---------------------------------------------------------------------------


def pack_slots(slots: np.ndarray) -> bytes:
    """(n, 8) slot codes to 2 bytes per parameter, b_0 in the high bits."""
    s = slots.astype(np.uint16)
    b0 = (s[:, 0] << 6) | (s[:, 1] << 4) | (s[:, 2] << 2) | s[:, 3]
    b1 = (s[:, 4] << 6) | (s[:, 5] << 4) | (s[:, 6] << 2) | s[:, 7]
    out = np.empty((s.shape[0], 2), dtype=np.uint8)
    out[:, 0], out[:, 1] = b0, b1
    return out.tobytes()


def unpack_slots(data: bytes, n_params: int, origin: str, offset: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n_params, 2).astype(np.uint16)
    slots = np.empty((n_params, 8), dtype=np.uint8)
    for j in range(4):
        slots[:, j] = (raw[:, 0] >> (6 - 2 * j)) & 3
        slots[:, 4 + j] = (raw[:, 1] >> (6 - 2 * j)) & 3
    bad = np.nonzero(slots == 3)
    if bad[0].size:
        raise ParseError(
            f"{origin}: invalid slot code 3 for parameter {int(bad[0][0])} "
            f"near offset {offset + 2 * int(bad[0][0])}"
        )
    return slots


def save_knowledge(path, knowledge: BitKnowledge) -> None:
    body = KNOWLEDGE_MAGIC + struct.pack("<H", FORMAT_VERSION)
    body += struct.pack("<HIQ", len(knowledge.slots), knowledge.inputs_consumed,
                        knowledge.probes_executed)
    body += struct.pack("<I", len(knowledge.per_input_recovered))
    if knowledge.per_input_recovered:
        body += struct.pack(f"<{len(knowledge.per_input_recovered)}I",
                            *knowledge.per_input_recovered)
    for s in knowledge.slots:
        body += struct.pack("<I", s.shape[0])
    for s in knowledge.slots:
        body += pack_slots(s)
    _atomic_write(path, _with_crc(body))


def load_knowledge(path) -> BitKnowledge:
    origin = Path(path).name
    r = _Reader(_check_crc(Path(path).read_bytes(), origin), origin)
    _check_magic(r, KNOWLEDGE_MAGIC)
    n_layers, inputs_consumed, probes = r.unpack("HIQ")
    (n_hist,) = r.unpack("I")
    hist = list(r.unpack(f"{n_hist}I")) if n_hist else []
    counts = [r.unpack("I")[0] for _ in range(n_layers)]
    slots = []
    for c in counts:
        offset = r.pos
        slots.append(unpack_slots(r.take(2 * c), c, origin, offset))
    r.done()
    return BitKnowledge(slots, inputs_consumed, probes, hist)


def validate_knowledge_for_model(knowledge: BitKnowledge, model) -> None:
    if not knowledge.matches_model(model):
        sizes = [model.layers[i].weight.size for i in model.weighted_indices]
        raise ValidationError(
            f"knowledge layer sizes {[s.shape[0] for s in knowledge.slots]} do not "
            f"match model parameter counts {sizes}"
        )


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 255:
        raise ValidationError("tag too long")
    return struct.pack("<B", len(raw)) + raw


def _unpack_str(r: _Reader) -> str:
    (n,) = r.unpack("B")
    return r.take(n).decode("utf-8")


def save_dataset(path, handle: DatasetHandle) -> None:
    body = DATASET_MAGIC + struct.pack("<H", FORMAT_VERSION)
    body += _pack_str(handle.provenance)
    body += _pack_str(handle.split)
    body += struct.pack("<H", handle.num_classes)
    body += struct.pack("<B", 1)  # labels always stored (zeros for attack sets)
    body += struct.pack("<B", handle.images.ndim)
    body += struct.pack(f"<{handle.images.ndim}I", *handle.images.shape)
    body += handle.images.tobytes()
    body += handle.labels.astype(np.uint8).tobytes()
    _atomic_write(path, _with_crc(body))


def load_dataset(path) -> DatasetHandle:
    origin = Path(path).name
    r = _Reader(_check_crc(Path(path).read_bytes(), origin), origin)
    _check_magic(r, DATASET_MAGIC)
    provenance = _unpack_str(r)
    split = _unpack_str(r)
    (num_classes,) = r.unpack("H")
    (has_labels,) = r.unpack("B")
    (ndim,) = r.unpack("B")
    shape = tuple(r.unpack(f"{ndim}I"))
    count = int(np.prod(shape))
    images = np.frombuffer(r.take(count), dtype=np.int8).reshape(shape)
    labels = np.frombuffer(r.take(shape[0]), dtype=np.uint8).astype(np.int64)
    r.done()
    return DatasetHandle(images.copy(), labels, split, provenance, num_classes)


# ---------------------------------------------------------------------------
# campaign record
# ---------------------------------------------------------------------------


@dataclass
class CampaignRecord:
    """Config snapshot, resulting knowledge, and campaign statistics."""

    config: dict
    knowledge: BitKnowledge
    msb_curve: list = field(default_factory=list)  # (inputs, msb_pct_with_lsbl)
    wall_seconds: float = 0.0


def save_record(path, record: CampaignRecord) -> None:
    doc = {
        "config": record.config,
        "inputs_consumed": record.knowledge.inputs_consumed,
        "probes_executed": record.knowledge.probes_executed,
        "per_input_recovered": list(map(int, record.knowledge.per_input_recovered)),
        "msb_curve": [[int(i), float(p)] for i, p in record.msb_curve],
        "slots": [base64.b64encode(pack_slots(s)).decode("ascii")
                  for s in record.knowledge.slots],
        "layer_params": [int(s.shape[0]) for s in record.knowledge.slots],
        "wall_seconds": record.wall_seconds,
    }
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    _atomic_write(path, payload)


def load_record(path) -> CampaignRecord:
    origin = Path(path).name
    try:
        doc = json.loads(Path(path).read_bytes())
    except json.JSONDecodeError as e:
        raise ParseError(f"{origin}: bad JSON at offset {e.pos}: {e.msg}")
    slots = []
    for b64, count in zip(doc["slots"], doc["layer_params"]):
        raw = base64.b64decode(b64)
        slots.append(unpack_slots(raw, count, origin, 0))
    knowledge = BitKnowledge(slots, doc["inputs_consumed"], doc["probes_executed"],
                             list(doc["per_input_recovered"]))
    return CampaignRecord(doc["config"], knowledge,
                          [(i, p) for i, p in doc["msb_curve"]], doc["wall_seconds"])
