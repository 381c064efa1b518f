"""Evaluation triad (accuracy, fidelity, AUA) and the randomized-scaling
defense with its expectation-attack analysis.

The defense scales groups of the target layer's output channels by fresh
factors drawn in [alpha_min, alpha_max] at every inference, applied in fixed
point (scale = round(alpha * 256), act' = (act * scale + 128) >> 8) so the
engine stays integer-only. Distinct inferences then disagree slightly, which
poisons strict-equality safe-error probes unless the adversary averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convert import float_images, predict_labels
from .engine import Conv2d, Linear, PredictionVector, QuantModel, _forward_batch, infer_batch
from .errors import ValidationError
from .faults import FaultSpec, Polarity, apply_fault
from .floatnet import FloatModel
from .qtensor import quantize
from .recovery import UNKNOWN, ZERO_SEA, BitKnowledge, CampaignConfig, run_campaign, true_bits
from .training import pgd_attack


@dataclass
class DefenseConfig:
    """Group-wise randomized scaling of one layer's output channels."""

    layer_index: int | None = None  # None: last convolutional layer
    group_count: int = 8
    channels_per_group: int = 8
    alpha_min: float = 0.9
    alpha_max: float = 1.0

    def resolve_layer(self, model: QuantModel) -> int:
        idx = self.layer_index
        if idx is None:
            convs = [i for i, l in enumerate(model.layers) if isinstance(l, Conv2d)]
            if not convs:
                raise ValidationError("model has no convolutional layer; set layer_index")
            idx = convs[-1]
        layer = model.layers[idx]
        if not isinstance(layer, (Linear, Conv2d)):
            raise ValidationError(f"layer {idx} has no output channels to scale")
        channels = layer.weight.shape[0]
        if channels != self.group_count * self.channels_per_group:
            raise ValidationError(
                f"layer {idx} has {channels} channels, config covers "
                f"{self.group_count * self.channels_per_group}"
            )
        return idx


def _scale_modifier(config: DefenseConfig, rng: np.random.Generator, n: int):
    """Per-sample, per-group fixed-point scaling hook for a batch of size n."""
    alphas = rng.uniform(config.alpha_min, config.alpha_max,
                         size=(n, config.group_count))
    scales = np.rint(alphas * 256.0).astype(np.int64)
    per_channel = np.repeat(scales, config.channels_per_group, axis=1)

    def fn(act: np.ndarray) -> np.ndarray:
        a = act.astype(np.int64)
        s = per_channel if act.ndim == 2 else per_channel[:, :, None, None]
        return np.clip((a * s + 128) >> 8, -128, 127).astype(np.int8)

    return fn


def randomized_infer(model: QuantModel, x: np.ndarray, config: DefenseConfig,
                     rng: np.random.Generator) -> PredictionVector:
    """One defended inference; nondeterministic across calls by design."""
    idx = config.resolve_layer(model)
    scores = _forward_batch(model, np.asarray(x)[None],
                            modifiers={idx: _scale_modifier(config, rng, 1)})[0]
    return PredictionVector(scores)


def randomized_infer_batch(model: QuantModel, x: np.ndarray, config: DefenseConfig,
                           rng: np.random.Generator, weight_override=None,
                           chunk: int = 256) -> np.ndarray:
    """Batch of defended inferences, fresh scaling factors per sample."""
    idx = config.resolve_layer(model)
    outs = []
    for lo in range(0, x.shape[0], chunk):
        part = x[lo : lo + chunk]
        outs.append(_forward_batch(model, part,
                                   modifiers={idx: _scale_modifier(config, rng, part.shape[0])},
                                   weight_override=weight_override))
    return np.concatenate(outs, axis=0)


def accuracy(model, dataset) -> float:
    """Percent of argmax matches against ground-truth labels."""
    if dataset.images.shape[0] == 0:
        raise ValidationError("empty dataset")
    pred = predict_labels(model, dataset.images)
    return 100.0 * float((pred == dataset.labels).mean())


def defended_accuracy(model: QuantModel, dataset, config: DefenseConfig,
                      rng: np.random.Generator) -> float:
    if dataset.images.shape[0] == 0:
        raise ValidationError("empty dataset")
    scores = randomized_infer_batch(model, dataset.images, config, rng)
    return 100.0 * float((np.argmax(scores, axis=1) == dataset.labels).mean())


def _model_labels(model) -> int:
    return model.num_labels


def fidelity(m1, m2, dataset) -> float:
    """Percent of test inputs on which the two models predict the same label."""
    if dataset.images.shape[0] == 0:
        raise ValidationError("empty dataset")
    if _model_labels(m1) != _model_labels(m2):
        raise ValidationError("models have different label counts")
    p1 = predict_labels(m1, dataset.images)
    p2 = predict_labels(m2, dataset.images)
    return 100.0 * float((p1 == p2).mean())


def aua(victim, substitute: FloatModel, dataset, eps: float, steps: int = 40,
        chunk: int = 1024) -> float:
    """Victim accuracy on adversarial examples crafted against the substitute."""
    if not isinstance(substitute, FloatModel):
        raise ValidationError("AUA needs a float substitute for gradients")
    if dataset.images.shape[0] == 0:
        raise ValidationError("empty dataset")
    hits = 0
    for lo in range(0, dataset.images.shape[0], chunk):
        img = dataset.images[lo : lo + chunk]
        lab = dataset.labels[lo : lo + chunk]
        adv = pgd_attack(substitute, float_images(img), lab, eps, steps)
        adv_q = quantize(adv, 0).values
        pred = predict_labels(victim, adv_q)
        hits += int((pred == lab).sum())
    return 100.0 * hits / dataset.images.shape[0]


def expectation_delta(model: QuantModel, inputs: np.ndarray, n_repeats: int,
                      config: DefenseConfig | None, rng: np.random.Generator):
    """Mean (std) over inputs of the label-averaged |difference| between two
    independently averaged groups of n_repeats defended inferences."""
    if n_repeats < 1:
        raise ValidationError("n_repeats must be >= 1")
    deltas = []
    for x in inputs:
        groups = []
        for _ in range(2):
            tiled = np.repeat(x[None], n_repeats, axis=0)
            if config is None:
                scores = infer_batch(model, tiled)
            else:
                scores = randomized_infer_batch(model, tiled, config, rng)
            groups.append(scores.astype(np.float64).mean(axis=0))
        deltas.append(float(np.abs(groups[0] - groups[1]).mean()))
    d = np.asarray(deltas)
    return float(d.mean()), float(d.std())


@dataclass
class DefenseProbeReport:
    probes: int
    marks: int
    wrong_marks: int

    @property
    def false_positive_rate(self):
        if self.marks == 0:
            return None
        return self.wrong_marks / self.marks


def sea_under_defense(model: QuantModel, attack_set: np.ndarray, config: CampaignConfig,
                      defense: DefenseConfig | None, rng: np.random.Generator,
                      probe_n: int = 1, tau: float = 0.0, probe_specs=None):
    """SEA campaign against the (possibly defended) model.

    With the defense off this is exactly run_campaign. With it on, each probe
    compares score sets averaged over probe_n defended inferences: strict
    equality when tau <= 0, otherwise mismatch iff the label-averaged absolute
    difference exceeds tau. Returns (knowledge, false-positive report).
    """
    if defense is None:
        knowledge = run_campaign(model, attack_set, config)
        bits = true_bits(model)
        marks = sum(int((s == ZERO_SEA).sum()) for s in knowledge.slots)
        wrong = sum(int(((s == ZERO_SEA) & (b == 1)).sum())
                    for s, b in zip(knowledge.slots, bits))
        return knowledge, DefenseProbeReport(knowledge.probes_executed, marks, wrong)

    if config.polarity is not Polarity.SET:
        raise ValidationError("defended campaign supports the bit-set model only")
    knowledge = BitKnowledge.for_model(model)
    weighted = model.weighted_indices
    if probe_specs is None:
        probe_specs = [
            FaultSpec(li, p, b, config.polarity)
            for wl, li in enumerate(weighted)
            for p in range(model.layers[li].weight.size)
            for b in config.bit_subset
        ]
    wl_of = {li: wl for wl, li in enumerate(weighted)}
    bits = true_bits(model)
    probes = marks = wrong = 0
    inputs = np.asarray(attack_set)
    if inputs.ndim == len(model.input_shape):
        inputs = inputs[None]
    n_inputs = inputs.shape[0]
    if config.max_inputs is not None:
        n_inputs = min(n_inputs, config.max_inputs)
    for idx in range(n_inputs):
        x = inputs[idx]
        tiled = np.repeat(x[None], probe_n, axis=0)
        nominal = randomized_infer_batch(model, tiled, defense, rng).astype(np.float64).mean(axis=0)
        for spec in probe_specs:
            wl = wl_of[spec.layer_index]
            if knowledge.slots[wl][spec.param_index, spec.bit_index] != UNKNOWN:
                continue
            layer = model.layers[spec.layer_index]
            values = layer.weight.values.copy()
            flat = values.reshape(-1)
            flat[spec.param_index] = apply_fault(int(flat[spec.param_index]), spec)
            faulted = randomized_infer_batch(model, tiled, defense, rng,
                                             weight_override={spec.layer_index: values})
            favg = faulted.astype(np.float64).mean(axis=0)
            probes += 1
            if tau <= 0:
                mismatch = not np.array_equal(favg, nominal)
            else:
                mismatch = float(np.abs(favg - nominal).mean()) > tau
            if mismatch:
                knowledge.slots[wl][spec.param_index, spec.bit_index] = ZERO_SEA
                marks += 1
                if bits[wl][spec.param_index, spec.bit_index] == 1:
                    wrong += 1
        knowledge.inputs_consumed += 1
        knowledge.probes_executed = probes
    return knowledge, DefenseProbeReport(probes, marks, wrong)
