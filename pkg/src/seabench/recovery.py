"""Safe-error attack campaign and least-significant-bit-leakage propagation.

Knowledge about each stored parameter is an 8-slot lattice over
{Unknown, ZeroSEA, OneLSBL}: ZeroSEA slots are proven zeros (a bit-set fault
changed the predictions), OneLSBL slots are heuristic ones filled in by
lsbl_propagate. Knowledge only ever grows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .engine import PredictionVector, QuantModel, infer
from .errors import ValidationError
from .faults import FaultSpec, Polarity, faulted_infer
from . import sweep

UNKNOWN = 0
ZERO_SEA = 1
ONE_LSBL = 2

# two's-complement contribution of bits b_0..b_7 (b_0 = sign)
BIT_WEIGHTS = np.array([-128, 64, 32, 16, 8, 4, 2, 1], dtype=np.int64)


class ProbeResult(enum.Enum):
    ZERO_RECOVERED = "zero"
    DOUBT = "doubt"


@dataclass
class CampaignConfig:
    """Probe plan: which bits, fault polarity, and when to stop."""

    bit_subset: tuple = (0, 1, 2, 3, 4, 5, 6, 7)
    polarity: Polarity = Polarity.SET
    max_inputs: int | None = None
    stop_msb_fraction: float | None = None

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bit_subset)
        if not bits:
            raise ValidationError("bit_subset must be non-empty")
        if any(b < 0 or b > 7 for b in bits):
            raise ValidationError(f"bit_subset entries must be in [0, 7], got {bits}")
        self.bit_subset = bits
        if self.stop_msb_fraction is not None and not 0 < self.stop_msb_fraction <= 1:
            raise ValidationError("stop_msb_fraction must be in (0, 1]")


@dataclass
class BitKnowledge:
    """Per-parameter recovery state for every weighted layer of one model."""

    slots: list  # one (n_params, 8) uint8 array per weighted layer
    inputs_consumed: int = 0
    probes_executed: int = 0
    per_input_recovered: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model: QuantModel) -> "BitKnowledge":
        return cls([
            np.zeros((model.layers[i].weight.size, 8), dtype=np.uint8)
            for i in model.weighted_indices
        ])

    def copy(self) -> "BitKnowledge":
        return BitKnowledge(
            [s.copy() for s in self.slots],
            self.inputs_consumed,
            self.probes_executed,
            list(self.per_input_recovered),
        )

    def matches_model(self, model: QuantModel) -> bool:
        sizes = [model.layers[i].weight.size for i in model.weighted_indices]
        return sizes == [s.shape[0] for s in self.slots]

    @property
    def total_params(self) -> int:
        return sum(s.shape[0] for s in self.slots)

    def known_count(self) -> int:
        return int(sum((s != UNKNOWN).sum() for s in self.slots))

    def msb_known_fraction(self) -> float:
        known = sum(int((s[:, 0] != UNKNOWN).sum()) for s in self.slots)
        return known / self.total_params

    def bit_known_fraction(self, bit: int) -> float:
        known = sum(int((s[:, bit] != UNKNOWN).sum()) for s in self.slots)
        return known / self.total_params


def param_strings(slots_row: np.ndarray) -> tuple:
    """Textual form of one parameter: bits over {0,1,?} plus provenance flags.

    Provenance: 'S' marks a SEA-proven zero, 'L' an LSBL-estimated one,
    '.' an unknown slot.
    """
    bits = "".join("0" if c == ZERO_SEA else "1" if c == ONE_LSBL else "?" for c in slots_row)
    prov = "".join("S" if c == ZERO_SEA else "L" if c == ONE_LSBL else "." for c in slots_row)
    return bits, prov


def sea_probe(model: QuantModel, x, nominal: PredictionVector, spec: FaultSpec) -> ProbeResult:
    """Single safe-error probe: any score difference proves the bit was 0."""
    faulted = faulted_infer(model, x, spec)
    return ProbeResult.DOUBT if faulted == nominal else ProbeResult.ZERO_RECOVERED


def run_campaign(model: QuantModel, attack_set, config: CampaignConfig,
                 progress=None) -> BitKnowledge:
    """Probe every still-unknown (parameter, bit) with each input in order.

    Marks ZeroSEA on prediction mismatch; known bits are never re-probed.
    The stop criterion counts a parameter's MSB as known if it would be known
    after LSBL propagation, matching how recovery curves are reported; the
    returned knowledge itself carries SEA marks only.
    """
    if config.polarity is not Polarity.SET:
        raise ValidationError(
            "run_campaign supports the bit-set fault model only; the knowledge "
            "lattice cannot record bit-reset (proven-one) results"
        )
    inputs = np.asarray(attack_set)
    if inputs.ndim == len(model.input_shape):
        inputs = inputs[None]
    if inputs.shape[0] == 0:
        raise ValidationError("attack set must be non-empty")

    knowledge = BitKnowledge.for_model(model)
    bit_sel = np.zeros(8, dtype=bool)
    bit_sel[list(config.bit_subset)] = True

    n_inputs = inputs.shape[0]
    if config.max_inputs is not None:
        n_inputs = min(n_inputs, config.max_inputs)

    for idx in range(n_inputs):
        masks = [(s == UNKNOWN) & bit_sel[None, :] for s in knowledge.slots]
        n_probes = int(sum(m.sum() for m in masks))
        if n_probes == 0:
            break
        mism = sweep.sweep_input(model, inputs[idx], masks, config.polarity)
        recovered = 0
        for s, m in zip(knowledge.slots, mism):
            recovered += int(m.sum())
            s[m] = ZERO_SEA
        knowledge.probes_executed += n_probes
        knowledge.inputs_consumed += 1
        knowledge.per_input_recovered.append(recovered)
        if progress is not None:
            progress(knowledge)
        if config.stop_msb_fraction is not None:
            if lsbl_propagate(knowledge).msb_known_fraction() >= config.stop_msb_fraction:
                break
    return knowledge


def lsbl_propagate(knowledge: BitKnowledge) -> BitKnowledge:
    """Estimate undefined bits above a proven zero as ones.

    For each parameter, let k* be the largest index in [1, 7] whose slot is
    ZeroSEA; every Unknown slot at an index below k* becomes OneLSBL. A fault
    on a more significant bit perturbs the parameter more, so its silence can
    only mean the bit was already set.
    """
    out = knowledge.copy()
    positions = np.arange(8, dtype=np.int64)
    for s in out.slots:
        zero_hi = (s[:, 1:] == ZERO_SEA) * positions[1:][None, :]
        kstar = zero_hi.max(axis=1)  # 0 when no ZeroSEA above the sign bit
        fill = (positions[None, :] < kstar[:, None]) & (s == UNKNOWN)
        s[fill] = ONE_LSBL
    return out


def projected_range(slots_row) -> tuple:
    """(min, max) over all two's-complement bytes consistent with known slots."""
    s = np.asarray(slots_row, dtype=np.uint8).reshape(1, 8)
    mins, maxs = layer_projected_ranges(s)
    return int(mins[0]), int(maxs[0])


def layer_projected_ranges(slots: np.ndarray) -> tuple:
    """Vectorized projected_range over an (n_params, 8) slot array."""
    known_one = slots == ONE_LSBL
    unknown = slots == UNKNOWN
    base = (known_one * BIT_WEIGHTS[None, :]).sum(axis=1)
    mins = base + unknown[:, 0] * BIT_WEIGHTS[0]
    maxs = base + (unknown[:, 1:] * BIT_WEIGHTS[None, 1:]).sum(axis=1)
    return mins, maxs


def true_bits(model: QuantModel) -> list:
    """Per weighted layer, the (n_params, 8) matrix of actual bit values."""
    out = []
    for i in model.weighted_indices:
        w = model.layers[i].weight.values.reshape(-1).view(np.uint8)
        bits = (w[:, None] >> (7 - np.arange(8))[None, :]) & 1
        out.append(bits.astype(np.uint8))
    return out


@dataclass
class LayerRecovery:
    layer_index: int
    kind: str
    n_params: int
    bit_known_pct: list          # per bit position, % of params with the slot known
    msb_known_pct: float
    lsbl_slots: int
    lsbl_errors: int

    @property
    def lsbl_error_pct(self):
        if self.lsbl_slots == 0:
            return None
        return 100.0 * self.lsbl_errors / self.lsbl_slots


@dataclass
class RecoveryReport:
    layers: list
    bit_known_pct: list
    msb_known_pct: float
    known_bits: int
    total_bits: int
    sea_marks: int
    sea_violations: int          # ZeroSEA slots whose true bit is 1 (must be 0)
    lsbl_slots: int
    lsbl_errors: int

    @property
    def lsbl_error_pct(self):
        if self.lsbl_slots == 0:
            return None
        return 100.0 * self.lsbl_errors / self.lsbl_slots

    @property
    def bits_known_pct(self) -> float:
        return 100.0 * self.known_bits / self.total_bits


def recovery_stats(knowledge: BitKnowledge, truth: QuantModel) -> RecoveryReport:
    """Diagnostics against ground truth (simulation only)."""
    if not knowledge.matches_model(truth):
        raise ValidationError("knowledge does not match the model's parameter counts")
    bits = true_bits(truth)
    rows = []
    tot_known = np.zeros(8, dtype=np.int64)
    tot_params = 0
    sea_marks = sea_viol = lsbl_slots = lsbl_err = 0
    for (wl, li), s, b in zip(enumerate(truth.weighted_indices), knowledge.slots, bits):
        known = s != UNKNOWN
        sea = s == ZERO_SEA
        lsbl = s == ONE_LSBL
        viol = int((sea & (b == 1)).sum())
        errs = int((lsbl & (b == 0)).sum())
        rows.append(LayerRecovery(
            layer_index=li,
            kind=type(truth.layers[li]).__name__,
            n_params=s.shape[0],
            bit_known_pct=[100.0 * known[:, i].mean() for i in range(8)],
            msb_known_pct=100.0 * known[:, 0].mean(),
            lsbl_slots=int(lsbl.sum()),
            lsbl_errors=errs,
        ))
        tot_known += known.sum(axis=0)
        tot_params += s.shape[0]
        sea_marks += int(sea.sum())
        sea_viol += viol
        lsbl_slots += int(lsbl.sum())
        lsbl_err += errs
    return RecoveryReport(
        layers=rows,
        bit_known_pct=[100.0 * k / tot_params for k in tot_known],
        msb_known_pct=100.0 * tot_known[0] / tot_params,
        known_bits=int(tot_known.sum()),
        total_bits=8 * tot_params,
        sea_marks=sea_marks,
        sea_violations=sea_viol,
        lsbl_slots=lsbl_slots,
        lsbl_errors=lsbl_err,
    )
