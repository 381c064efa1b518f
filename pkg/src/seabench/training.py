"""Victim training, constrained substitute training, and PGD crafting.

The substitute loss adds a per-layer penalty pulling partially recovered
parameters toward the midpoint of their projected ranges; fully recovered
parameters are frozen, unrecovered ones train free of any penalty.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import floatnet
from .convert import float_images, predict_labels
from .engine import QuantModel
from .errors import TrainingDivergedError, ValidationError
from .floatnet import FloatModel, backward, ce_loss, float_cnn, float_mlp, forward_logits
from .recovery import UNKNOWN, BitKnowledge, layer_projected_ranges


@dataclass
class HyperParams:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    augment: bool = False
    seed: int = 0
    dtype: type = np.float64


@dataclass
class EpochStats:
    epoch: int
    loss: float
    seconds: float


def make_arch(arch, rng: np.random.Generator, dtype=np.float64) -> FloatModel:
    if isinstance(arch, FloatModel):
        return arch.copy()
    if arch == "mlp":
        return float_mlp(rng, dtype=dtype)
    if arch == "cnn":
        return float_cnn(rng, dtype=dtype)
    raise ValidationError(f"unknown architecture {arch!r}")


def _augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip plus 4-pixel-pad random crop (CHW int8 batch)."""
    n, c, h, w = images.shape
    out = np.zeros((n, c, h + 8, w + 8), dtype=images.dtype)
    out[:, :, 4 : h + 4, 4 : w + 4] = images
    oy = rng.integers(0, 9, size=n)
    ox = rng.integers(0, 9, size=n)
    flip = rng.random(n) < 0.5
    crops = np.empty_like(images)
    for i in range(n):
        patch = out[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
        crops[i] = patch[:, :, ::-1] if flip[i] else patch
    return crops


def _sgd_step(model, grads, velocity, lr, momentum, weight_decay, skip_mask=None):
    for i, w in model.weights().items():
        g = grads[i]
        if weight_decay:
            g = g + weight_decay * w
        if skip_mask is not None and i in skip_mask:
            g = np.where(skip_mask[i], 0.0, g)
        v = velocity.get(i)
        v = momentum * v - lr * g if v is not None else -lr * g
        velocity[i] = v
        w += v


def train_victim(arch, dataset, hp: HyperParams, progress=None):
    """Plain momentum-SGD training; returns (FloatModel, per-epoch stats)."""
    rng = np.random.default_rng(hp.seed)
    model = make_arch(arch, rng, hp.dtype)
    images, labels = dataset.images, dataset.labels
    history = _fit(model, images, labels, hp, rng, constraints=None, lam=0.0,
                   progress=progress)
    return model, history


@dataclass
class LayerConstraints:
    """Dequantized projected ranges for one layer's partially known weights."""

    constrained: np.ndarray  # any bit known
    frozen: np.ndarray       # all 8 bits known
    lo: np.ndarray
    hi: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0


@dataclass
class ConstraintSet:
    """Per weighted layer (in model order): constraints or None when nothing
    is known about any parameter of that layer."""

    layers: list
    weight_decs: list

    @classmethod
    def from_knowledge(cls, knowledge: BitKnowledge, victim: QuantModel) -> "ConstraintSet":
        if not knowledge.matches_model(victim):
            raise ValidationError("knowledge does not match the victim model")
        out = []
        decs = []
        for slots, li in zip(knowledge.slots, victim.weighted_indices):
            layer = victim.layers[li]
            decs.append(layer.weight.dec)
            known = slots != UNKNOWN
            if not known.any():
                out.append(None)
                continue
            mins, maxs = layer_projected_ranges(slots)
            scale = 2.0 ** (layer.weight.dec - 7)
            shape = layer.weight.shape
            out.append(LayerConstraints(
                constrained=known.any(axis=1).reshape(shape),
                frozen=known.all(axis=1).reshape(shape),
                lo=(mins * scale).reshape(shape),
                hi=(maxs * scale).reshape(shape),
            ))
        return cls(out, decs)


def loss_sub(model: FloatModel, batch_x, batch_y, constraints: ConstraintSet | None,
             lam: float):
    """Substitute loss: CE plus lam * sum of per-layer L2 distances of the
    constrained parameters from their range midpoints. Returns (loss, grads);
    frozen parameters get zero gradient."""
    cache = []
    logits = forward_logits(model, batch_x, cache)
    loss, dlogits = ce_loss(logits, batch_y)
    grads, _ = backward(model, cache, dlogits)
    if constraints is not None and lam:
        for wl, i in enumerate(model.weighted_indices):
            con = constraints.layers[wl]
            if con is None:
                continue
            w = model.layers[i].weight
            active = con.constrained & ~con.frozen
            d = np.where(active, w - con.mean, 0.0)
            norm = float(np.sqrt((d * d).sum()))
            if norm > 0:
                loss += lam * norm
                grads[i] = grads[i] + lam * (d / norm)
    if constraints is not None:
        for wl, i in enumerate(model.weighted_indices):
            con = constraints.layers[wl]
            if con is not None:
                grads[i] = np.where(con.frozen, 0.0, grads[i])
    return loss, grads


def init_substitute(arch, constraints: ConstraintSet, rng: np.random.Generator,
                    dtype=np.float64) -> FloatModel:
    """Fresh model with constrained params drawn inside their ranges and
    frozen params set exactly; free params keep their standard init."""
    model = make_arch(arch, rng, dtype)
    for wl, i in enumerate(model.weighted_indices):
        con = constraints.layers[wl]
        if con is None:
            continue
        w = model.layers[i].weight
        draw = rng.uniform(con.lo, con.hi)
        model.layers[i].weight = np.where(con.constrained, draw, w).astype(dtype)
    return model


def clip_to_constraints(model: FloatModel, constraints: ConstraintSet) -> None:
    for wl, i in enumerate(model.weighted_indices):
        con = constraints.layers[wl]
        if con is None:
            continue
        w = model.layers[i].weight
        model.layers[i].weight = np.where(con.constrained, np.clip(w, con.lo, con.hi), w)


def _fit(model, images, labels, hp, rng, constraints, lam, progress=None):
    velocity = {}
    history = []
    skip = None
    if constraints is not None:
        skip = {}
        for wl, i in enumerate(model.weighted_indices):
            con = constraints.layers[wl]
            if con is not None and con.frozen.any():
                skip[i] = con.frozen
    lr = hp.lr
    n = images.shape[0]
    for epoch in range(hp.epochs):
        t0 = time.time()
        if epoch in hp.lr_decay_epochs:
            lr *= hp.lr_decay_factor
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for lo in range(0, n, hp.batch_size):
            idx = order[lo : lo + hp.batch_size]
            xb = images[idx]
            if hp.augment:
                xb = _augment(xb, rng)
            xb = float_images(xb).astype(hp.dtype)
            yb = labels[idx]
            loss, grads = loss_sub(model, xb, yb, constraints, lam)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {batches} (lr={lr})"
                )
            _sgd_step(model, grads, velocity, lr, hp.momentum, hp.weight_decay, skip)
            total += loss
            batches += 1
        if constraints is not None:
            clip_to_constraints(model, constraints)
        stats = EpochStats(epoch, total / max(batches, 1), time.time() - t0)
        history.append(stats)
        if progress is not None:
            progress(stats)
    model.check_finite()
    return history


def train_substitute(arch, knowledge: BitKnowledge, victim: QuantModel, dataset,
                     hp: HyperParams, dataset_fraction: float = 0.08,
                     lam: float = 1e-4, progress=None):
    """Train a substitute against victim-provided labels on a small data slice,
    constrained by the recovered bits. Returns (FloatModel, history)."""
    rng = np.random.default_rng(hp.seed)
    constraints = ConstraintSet.from_knowledge(knowledge, victim)
    model = init_substitute(arch, constraints, rng, hp.dtype)
    if tuple(model.input_shape) != tuple(victim.input_shape):
        raise ValidationError("architecture does not match the victim input shape")
    n = dataset.images.shape[0]
    take = max(1, round(dataset_fraction * n))
    idx = rng.choice(n, size=take, replace=False)
    images = dataset.images[idx]
    labels = predict_labels(victim, images)
    history = _fit(model, images, labels, hp, rng, constraints, lam, progress=progress)
    return model, history


def input_gradient(model: FloatModel, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    cache = []
    logits = forward_logits(model, x, cache)
    _, dlogits = ce_loss(logits, labels)
    _, dx = backward(model, cache, dlogits)
    return dx


def pgd_attack(model: FloatModel, x: np.ndarray, y_true, eps: float, steps: int = 40,
               x_min: float = 0.0, x_max: float = 1.0) -> np.ndarray:
    """l-inf PGD: signed-gradient ascent with step 2.5*eps/steps, projected on
    the eps-ball around x and the valid pixel range."""
    single = x.ndim == len(model.input_shape)
    xb = (x[None] if single else x).astype(np.float64)
    yb = np.atleast_1d(np.asarray(y_true))
    alpha = 2.5 * eps / steps if steps else 0.0
    lo = np.maximum(xb - eps, x_min)
    hi = np.minimum(xb + eps, x_max)
    adv = xb.copy()
    for _ in range(steps):
        g = input_gradient(model, adv, yb)
        adv = np.clip(adv + alpha * np.sign(g), lo, hi)
    return adv[0] if single else adv
