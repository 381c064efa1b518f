"""Attack-set construction: random inputs, certainty classification, and the
black-box genetic algorithm that steers inputs toward uncertain predictions.

The crafter only ever calls the inference entry points (never weights or
gradients): uncertain score vectors leak far more bits under safe-error
probing, so the GA's sole objective is to reach one.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .engine import QuantModel, infer_batch
from .errors import CraftingError, ValidationError

PIXEL_MIN = -127
PIXEL_MAX = 127
SCORE_SUM = 127


class Certainty(enum.Enum):
    CERTAIN = "certain"
    UNCERTAIN = "uncertain"


def classify_prediction(scores) -> Certainty:
    """Certain iff exactly one entry is non-zero and it equals 127."""
    s = np.asarray(scores if not hasattr(scores, "scores") else scores.scores)
    nonzero = np.flatnonzero(s)
    if nonzero.size == 1 and s[nonzero[0]] == 127:
        return Certainty.CERTAIN
    return Certainty.UNCERTAIN


def classify_batch(scores: np.ndarray) -> np.ndarray:
    """Vectorized classification; True where Uncertain."""
    nz = (scores != 0).sum(axis=1)
    top = scores.max(axis=1)
    return ~((nz == 1) & (top == 127))


@dataclass(frozen=True)
class TargetScores:
    """Adversary-chosen uncertain score vector: C zeros, the rest sums to 127."""

    scores: np.ndarray
    zero_count: int

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.int64)
        k = s.size
        if int(s.sum()) != SCORE_SUM:
            raise ValidationError(f"target scores must sum to {SCORE_SUM}, got {int(s.sum())}")
        if int((s == 0).sum()) != self.zero_count:
            raise ValidationError("zero_count does not match the zero entries")
        if not 0 <= self.zero_count <= k - 2:
            raise ValidationError(f"zero_count must be in [0, {k - 2}]")
        if np.any(s < 0):
            raise ValidationError("target scores must be non-negative")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)


def gen_target_scores(k: int, rng: np.random.Generator) -> TargetScores:
    """C in [0, K-2] uniform; the K-C live slots get >= 1 point each and the
    rest of the 127 mass by largest-remainder apportionment of random weights."""
    if k < 2:
        raise ValidationError("need at least two labels")
    c = int(rng.integers(0, k - 1))  # inclusive of K-2
    live = rng.choice(k, size=k - c, replace=False)
    raw = rng.random(k - c)
    raw /= raw.sum()
    budget = SCORE_SUM - (k - c)
    exact = raw * budget
    base = np.floor(exact).astype(np.int64)
    rem = budget - int(base.sum())
    order = np.argsort(-(exact - base))
    base[order[:rem]] += 1
    scores = np.zeros(k, dtype=np.int64)
    scores[live] = base + 1
    return TargetScores(scores, c)


def ga_cost(scores, target: TargetScores, eps: float = 1e-6) -> float:
    """Cross-entropy between the 127-normalized score and target distributions."""
    s = np.asarray(scores if not hasattr(scores, "scores") else scores.scores, dtype=np.float64)
    t = target.scores.astype(np.float64) / SCORE_SUM
    return float(-(t * np.log(s / SCORE_SUM + eps)).sum())


def _ga_cost_batch(scores: np.ndarray, target: TargetScores, eps: float = 1e-6) -> np.ndarray:
    t = target.scores.astype(np.float64) / SCORE_SUM
    return -(t[None, :] * np.log(scores.astype(np.float64) / SCORE_SUM + eps)).sum(axis=1)


@dataclass
class GAConfig:
    population_size: int = 150
    best_percent: int = 60
    random_percent: int = 20
    mutation_amplitude: int = 16
    mutation_fraction: float = 0.10
    max_generations: int = 30
    init_range: tuple = (PIXEL_MIN, PIXEL_MAX)

    def __post_init__(self):
        if self.population_size < 4:
            raise ValidationError("population_size must be >= 4")
        if self.best_percent + self.random_percent > 100:
            raise ValidationError("best_percent + random_percent must be <= 100")
        lo, hi = self.init_range
        if not (PIXEL_MIN <= lo < hi <= PIXEL_MAX):
            raise ValidationError(f"init_range must be within [{PIXEL_MIN}, {PIXEL_MAX}]")


@dataclass
class GAResult:
    best_input: np.ndarray
    best_scores: np.ndarray
    best_cost: float
    converged: bool
    generations: int
    cost_trajectory: list = field(default_factory=list)


def random_inputs(n: int, shape, rng: np.random.Generator,
                  value_range: tuple = (PIXEL_MIN, PIXEL_MAX)) -> np.ndarray:
    """n i.i.d. uniform int8 tensors of the given shape."""
    lo, hi = value_range
    if not (PIXEL_MIN <= lo <= hi <= PIXEL_MAX):
        raise ValidationError(f"value_range must be within [{PIXEL_MIN}, {PIXEL_MAX}]")
    return rng.integers(lo, hi + 1, size=(n, *shape), dtype=np.int16).astype(np.int8)


def _crossover(a: np.ndarray, b: np.ndarray, rng: np.random.Generator):
    """Swap a uniformly random half of the coordinates between two parents."""
    flat_a, flat_b = a.reshape(-1).copy(), b.reshape(-1).copy()
    n = flat_a.size
    sel = rng.permutation(n)[: n // 2]
    flat_a[sel], flat_b[sel] = flat_b[sel], flat_a[sel].copy()
    return flat_a.reshape(a.shape), flat_b.reshape(b.shape)


def _mutate(x: np.ndarray, cfg: GAConfig, rng: np.random.Generator) -> np.ndarray:
    out = x.reshape(-1).astype(np.int16)
    n = out.size
    count = max(1, int(round(cfg.mutation_fraction * n)))
    sel = rng.permutation(n)[:count]
    noise = rng.integers(-cfg.mutation_amplitude, cfg.mutation_amplitude + 1, size=count)
    out[sel] = np.clip(out[sel] + noise, PIXEL_MIN, PIXEL_MAX)
    return out.astype(np.int8).reshape(x.shape)


def ga_evolve(model: QuantModel, target: TargetScores, cfg: GAConfig,
              rng: np.random.Generator) -> GAResult:
    """Evolve a population until its best member scores as Uncertain."""
    if target.scores.size != model.num_labels:
        raise ValidationError("target label count does not match the model")
    pop = random_inputs(cfg.population_size, model.input_shape, rng, cfg.init_range)
    trajectory = []
    best_input = pop[0]
    best_scores = None
    best_cost = np.inf
    for gen in range(cfg.max_generations):
        scores = infer_batch(model, pop)
        costs = _ga_cost_batch(scores, target)
        order = np.argsort(costs, kind="stable")
        trajectory.append(float(costs[order[0]]))
        if costs[order[0]] < best_cost:
            best_cost = float(costs[order[0]])
            best_input = pop[order[0]].copy()
            best_scores = scores[order[0]].copy()
        if classify_prediction(scores[order[0]]) is Certainty.UNCERTAIN:
            return GAResult(pop[order[0]].copy(), scores[order[0]].copy(),
                            float(costs[order[0]]), True, gen + 1, trajectory)
        n_best = max(1, round(cfg.best_percent * cfg.population_size / 100))
        n_rand = round(cfg.random_percent * cfg.population_size / 100)
        keep = list(order[:n_best])
        suboptimal = order[n_best:]
        if n_rand and suboptimal.size:
            keep.extend(rng.choice(suboptimal, size=min(n_rand, suboptimal.size), replace=False))
        new_pop = [pop[i] for i in keep]
        while len(new_pop) < cfg.population_size:
            if rng.random() < 0.5 and len(keep) >= 2:
                pa, pb = rng.choice(len(keep), size=2, replace=False)
                ca, cb = _crossover(pop[keep[pa]], pop[keep[pb]], rng)
                new_pop.append(ca)
                if len(new_pop) < cfg.population_size:
                    new_pop.append(cb)
            else:
                src = suboptimal if suboptimal.size else order
                new_pop.append(_mutate(pop[int(rng.choice(src))], cfg, rng))
        pop = np.stack(new_pop[: cfg.population_size])
    return GAResult(best_input, best_scores, best_cost, False, cfg.max_generations, trajectory)


class Strategy(enum.Enum):
    RANDOM = "random"
    GA = "ga"
    TESTSET = "testset"


@dataclass
class CertaintyReport:
    n: int
    n_certain: int
    n_uncertain: int
    accuracy_all: float | None = None
    accuracy_certain: float | None = None
    accuracy_uncertain: float | None = None

    @property
    def uncertain_fraction(self) -> float:
        return self.n_uncertain / self.n if self.n else 0.0


@dataclass
class AttackSet:
    inputs: np.ndarray
    provenance: str
    report: CertaintyReport


INIT_RANGES = ((-127, 127), (-64, 64), (0, 127), (-127, 0), (-96, 96), (-32, 32))


def certainty_report(model: QuantModel, inputs: np.ndarray, labels=None) -> CertaintyReport:
    scores = infer_batch(model, inputs)
    unc = classify_batch(scores)
    rep = CertaintyReport(n=inputs.shape[0], n_certain=int((~unc).sum()),
                          n_uncertain=int(unc.sum()))
    if labels is not None:
        pred = np.argmax(scores, axis=1)
        ok = pred == labels
        rep.accuracy_all = 100.0 * float(ok.mean())
        rep.accuracy_certain = 100.0 * float(ok[~unc].mean()) if (~unc).any() else None
        rep.accuracy_uncertain = 100.0 * float(ok[unc].mean()) if unc.any() else None
    return rep


def build_attack_set(model: QuantModel, size: int, strategy: Strategy,
                     rng: np.random.Generator, ga_config: GAConfig | None = None,
                     value_range: tuple = (PIXEL_MIN, PIXEL_MAX), dataset=None,
                     max_failures: int = 10, progress=None) -> AttackSet:
    """Assemble `size` attack inputs plus a certainty report.

    GA crafting rotates the init range over several presets and draws a fresh
    target per input for diversity; repeated non-convergence raises.
    """
    if size < 1:
        raise ValidationError("size must be >= 1")
    if strategy is Strategy.RANDOM:
        inputs = random_inputs(size, model.input_shape, rng, value_range)
        return AttackSet(inputs, "random", certainty_report(model, inputs))
    if strategy is Strategy.TESTSET:
        if dataset is None:
            raise ValidationError("testset strategy needs a dataset")
        inputs = dataset.images[:size]
        labels = dataset.labels[:size]
        return AttackSet(inputs, "testset", certainty_report(model, inputs, labels))
    cfg = ga_config or GAConfig()
    collected = []
    failures = 0
    k = model.num_labels
    import dataclasses
    while len(collected) < size:
        target = gen_target_scores(k, rng)
        rng_range = INIT_RANGES[len(collected) % len(INIT_RANGES)]
        run_cfg = dataclasses.replace(cfg, init_range=rng_range)
        result = ga_evolve(model, target, run_cfg, rng)
        if result.converged:
            collected.append(result.best_input)
            failures = 0
            if progress is not None:
                progress(len(collected))
        else:
            failures += 1
            if failures >= max_failures:
                raise CraftingError(
                    f"GA failed to craft an uncertain input {failures} times in a row"
                )
    inputs = np.stack(collected)
    return AttackSet(inputs, "ga", certainty_report(model, inputs))
