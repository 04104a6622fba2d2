"""Exit policies over recorded traces, and budgeted threshold search.

A trace holds, for every sample, the softmax output of every exit and the
cumulative FLOPs spent to reach it. Given thresholds ``eta_1..eta_{K-1}`` a
sample leaves at the first exit whose confidence reaches its threshold (the
last exit always accepts), so accuracy and mean cost of any threshold vector
can be computed offline.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

# relative slack when testing mean_flops <= budget, absorbs summation-order noise
_BUDGET_RTOL = 1e-12


class TraceError(ValueError):
    """Trace arrays are inconsistent or empty."""


@dataclass
class ExitTrace:
    labels: np.ndarray  # [n]
    probs: np.ndarray  # [n, K, C]
    flops: np.ndarray  # [n, K], cumulative

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.flops = np.asarray(self.flops, dtype=np.float64)
        if self.probs.ndim != 3:
            raise TraceError(f"probs must be [n, K, C], got {self.probs.shape}")
        n, k, c = self.probs.shape
        if n == 0 or k == 0 or c == 0:
            raise TraceError(f"empty trace: probs shape {self.probs.shape}")
        if self.labels.shape != (n,):
            raise TraceError(f"{self.labels.shape} labels for {n} samples")
        if self.flops.shape != (n, k):
            raise TraceError(f"flops shape {self.flops.shape} != {(n, k)}")
        if self.labels.min() < 0 or self.labels.max() >= c:
            raise TraceError(f"labels outside [0, {c})")
        if not (np.isfinite(self.probs).all() and np.isfinite(self.flops).all()):
            raise TraceError("trace contains non-finite values")
        if (self.flops < 0).any() or (np.diff(self.flops, axis=1) <= 0).any():
            raise TraceError("cumulative flops must be non-negative and strictly increasing")

    @property
    def num_samples(self) -> int:
        return self.probs.shape[0]

    @property
    def num_exits(self) -> int:
        return self.probs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=2)

    def entropy(self) -> np.ndarray:
        p = self.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, -p * np.log(p), 0.0)
        return terms.sum(axis=2)

    def correct(self) -> np.ndarray:
        return self.probs.argmax(axis=2) == self.labels[:, None]

    def exit_accuracy(self, i: int) -> float:
        return float(self.correct()[:, i].mean())

    def exit_mean_flops(self, i: int) -> float:
        return float(self.flops[:, i].mean())


def _thresholds(thresholds, k: int) -> np.ndarray:
    eta = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if eta.size != k - 1:
        raise ValueError(f"need {k - 1} thresholds for {k} exits, got {eta.size}")
    if np.isnan(eta).any():
        raise ValueError("thresholds contain NaN")
    return eta


def exit_indices(scores: np.ndarray, thresholds, higher_exits: bool = True) -> np.ndarray:
    """First exit whose score passes its threshold; the last exit always passes.

    ``higher_exits`` selects ``score >= eta`` (confidence); otherwise
    ``score <= eta`` (entropy).
    """
    k = scores.shape[1]
    eta = _thresholds(thresholds, k)
    head = scores[:, : k - 1]
    hit = head >= eta if higher_exits else head <= eta
    hit = np.concatenate([hit, np.ones((scores.shape[0], 1), dtype=bool)], axis=1)
    return hit.argmax(axis=1)


def _score(trace: ExitTrace, idx: np.ndarray) -> tuple[float, float]:
    rows = np.arange(trace.num_samples)
    acc = float((trace.probs[rows, idx].argmax(axis=1) == trace.labels).mean())
    return acc, float(trace.flops[rows, idx].mean())


def evaluate_policy(trace: ExitTrace, thresholds) -> tuple[float, float]:
    """(accuracy, mean FLOPs) of confidence-thresholded early exit."""
    return _score(trace, exit_indices(trace.confidence(), thresholds))


def entropy_policy_evaluate(trace: ExitTrace, thresholds) -> tuple[float, float]:
    """Like :func:`evaluate_policy` but exits once entropy (nats) <= threshold."""
    return _score(trace, exit_indices(trace.entropy(), thresholds, higher_exits=False))


@dataclass
class Solution:
    thresholds: np.ndarray
    accuracy: float
    mean_flops: float
    feasible: bool = True


def _fits(mean_flops, budget: float):
    return mean_flops <= budget * (1.0 + _BUDGET_RTOL)


def _lattice(resolution: float) -> np.ndarray:
    steps = int(round(1.0 / resolution))
    if steps <= 0 or abs(steps * resolution - 1.0) > 1e-9:
        raise ValueError(f"resolution {resolution} must divide 1")
    return np.linspace(0.0, 1.0, steps + 1)


def solve_grid(trace: ExitTrace, budget: float, resolution: float = 0.01) -> Solution:
    """Exhaustive search over the threshold lattice ``{0, r, 2r, ..., 1}^(K-1)``.

    Highest accuracy within budget wins; ties go to lower mean FLOPs and then
    to the lexicographically smallest thresholds. If nothing fits, the
    cheapest lattice point is returned with ``feasible=False``.
    """
    k = trace.num_exits
    if k == 1:
        acc, mf = evaluate_policy(trace, [])
        return Solution(np.zeros(0), acc, mf, _fits(mf, budget))
    if k - 1 > 3:
        raise ValueError(f"grid search supports at most 3 thresholds, trace has {k - 1}")
    lattice = _lattice(resolution)
    m, n = lattice.size, trace.num_samples
    conf = trace.confidence()
    correct = trace.correct().astype(np.float64)
    flops = trace.flops
    passes = [(conf[:, i][None, :] >= lattice[:, None]) for i in range(k - 1)]
    last = passes[-1].astype(np.float64)  # [m, n]

    best = None  # (count, flop_sum, thresholds)
    cheapest = None
    for prefix in itertools.product(range(m), repeat=k - 2):
        active = np.ones(n, dtype=bool)
        base_c = 0.0
        base_f = 0.0
        for i, j in enumerate(prefix):
            leave = active & passes[i][j]
            base_c += correct[leave, i].sum()
            base_f += flops[leave, i].sum()
            active &= ~leave
        act = active.astype(np.float64)
        counts = base_c + act @ correct[:, k - 1] + last @ (act * (correct[:, k - 2] - correct[:, k - 1]))
        fsums = base_f + act @ flops[:, k - 1] + last @ (act * (flops[:, k - 2] - flops[:, k - 1]))
        counts = np.rint(counts)

        j = int(np.argmin(fsums))
        if cheapest is None or fsums[j] < cheapest[1] * (1 - 1e-12):
            cheapest = (counts[j], fsums[j], prefix + (j,))

        ok = np.flatnonzero(_fits(fsums / n, budget))
        if ok.size == 0:
            continue
        top = counts[ok].max()
        ok = ok[counts[ok] == top]
        fmin = fsums[ok].min()
        ok = ok[fsums[ok] <= fmin * (1 + 1e-12)]
        j = int(ok[0])
        cand = (top, fsums[j], prefix + (j,))
        if best is None or cand[0] > best[0] or (
            cand[0] == best[0] and cand[1] < best[1] * (1 - 1e-12)
        ):
            best = cand

    feasible = best is not None
    chosen = best if feasible else cheapest
    eta = lattice[list(chosen[2])]
    acc, mf = evaluate_policy(trace, eta)
    return Solution(eta, acc, mf, feasible)


@dataclass(frozen=True)
class GAConfig:
    population: int = 50
    generations: int = 100
    tournament: int = 4
    mutation_std: float = 0.05
    crossover_prob: float = 0.9
    elitism: int = 2
    seed: int = 0
    penalty: float = 10.0
    # genes live on this lattice (same as the grid oracle); None = continuous
    resolution: float | None = 0.01

    def __post_init__(self):
        if min(self.population, self.generations, self.tournament) <= 0:
            raise ValueError("population, generations and tournament must be positive")
        if self.mutation_std <= 0 or not 0 < self.crossover_prob <= 1:
            raise ValueError("mutation_std must be > 0 and crossover_prob in (0, 1]")
        if not 0 <= self.elitism < self.population:
            raise ValueError("elitism must be in [0, population)")
        if self.resolution is not None:
            _lattice(self.resolution)

    def snap(self, genes: np.ndarray) -> np.ndarray:
        genes = np.clip(genes, 0.0, 1.0)
        if self.resolution is None:
            return genes
        lattice = _lattice(self.resolution)
        return lattice[np.rint(genes * (lattice.size - 1)).astype(np.int64)]


def _population_scores(conf, correct, flops, pop):
    """Accuracy and mean FLOPs of every individual: pop [P, K-1]."""
    n, k = conf.shape
    hit = conf[None, :, : k - 1] >= pop[:, None, :]  # [P, n, K-1]
    hit = np.concatenate([hit, np.ones(hit.shape[:2] + (1,), dtype=bool)], axis=2)
    idx = hit.argmax(axis=2)  # [P, n]
    rows = np.arange(n)[None, :]
    return correct[rows, idx].mean(axis=1), flops[rows, idx].mean(axis=1)


@dataclass
class _Best:
    feasible: Solution | None = None
    fallback: tuple | None = field(default=None)  # (fitness, Solution)


def solve_ga(trace: ExitTrace, budget: float, ga: GAConfig = GAConfig()) -> Solution:
    """Real-coded genetic search over ``[0, 1]^(K-1)``.

    Tournament selection, uniform crossover, clipped Gaussian mutation and
    elitism; genes are rounded to ``ga.resolution`` after every mutation.
    Over-budget individuals are penalised in proportion to their excess cost
    relative to the final exit. Returns the best in-budget
    individual seen in any generation, else the fittest one flagged infeasible.
    """
    k = trace.num_exits
    if k == 1:
        acc, mf = evaluate_policy(trace, [])
        return Solution(np.zeros(0), acc, mf, _fits(mf, budget))
    rng = np.random.default_rng(ga.seed)
    dim = k - 1
    conf = trace.confidence()
    correct = trace.correct().astype(np.float64)
    flops = trace.flops
    final_cost = float(flops[:, -1].mean())

    def fitness(pop):
        acc, mf = _population_scores(conf, correct, flops, pop)
        over = ~_fits(mf, budget)
        fit = acc - np.where(over, ga.penalty * (mf - budget) / final_cost, 0.0)
        return fit, acc, mf, ~over

    best = _Best()

    def consider(pop, fit, acc, mf, ok):
        for i in np.flatnonzero(ok):
            cur = best.feasible
            if cur is None or acc[i] > cur.accuracy or (
                acc[i] == cur.accuracy and mf[i] < cur.mean_flops
            ):
                best.feasible = Solution(pop[i].copy(), float(acc[i]), float(mf[i]), True)
        j = int(np.argmax(fit))
        if best.fallback is None or fit[j] > best.fallback[0]:
            best.fallback = (fit[j], Solution(pop[j].copy(), float(acc[j]), float(mf[j]), False))

    pop = ga.snap(rng.random((ga.population, dim)))
    fit, acc, mf, ok = fitness(pop)
    consider(pop, fit, acc, mf, ok)
    for _ in range(ga.generations - 1):
        order = np.argsort(-fit, kind="stable")
        children = [pop[i].copy() for i in order[: ga.elitism]]
        while len(children) < ga.population:
            a = _tournament(rng, fit, ga.tournament)
            b = _tournament(rng, fit, ga.tournament)
            child = pop[a].copy()
            if rng.random() < ga.crossover_prob:
                mask = rng.random(dim) < 0.5
                child[mask] = pop[b][mask]
            child += rng.normal(0.0, ga.mutation_std, dim)
            children.append(ga.snap(child))
        pop = np.stack(children)
        fit, acc, mf, ok = fitness(pop)
        consider(pop, fit, acc, mf, ok)

    if best.feasible is not None:
        sol = best.feasible
    else:
        sol = best.fallback[1]
    acc, mf = evaluate_policy(trace, sol.thresholds)
    return Solution(sol.thresholds, acc, mf, sol.feasible)


def _tournament(rng: np.random.Generator, fit: np.ndarray, size: int) -> int:
    entrants = rng.integers(0, fit.size, size)
    return int(entrants[np.argmax(fit[entrants])])


@dataclass
class SweepPoint:
    budget: float
    accuracy: float
    mean_flops: float
    thresholds: np.ndarray
    feasible: bool = True


def budget_sweep(
    trace: ExitTrace,
    budgets,
    method: str = "grid",
    resolution: float = 0.01,
    ga: GAConfig = GAConfig(),
) -> list[SweepPoint]:
    budgets = [float(b) for b in budgets]
    if budgets != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    points = []
    for b in budgets:
        if method == "grid":
            sol = solve_grid(trace, b, resolution)
        elif method == "ga":
            sol = solve_ga(trace, b, ga)
        else:
            raise ValueError(f"unknown method {method!r}")
        points.append(SweepPoint(b, sol.accuracy, sol.mean_flops, sol.thresholds, sol.feasible))
    return points


def synthetic_trace(
    n: int,
    exits: int,
    classes: int = 10,
    seed: int = 0,
    stage_costs=None,
) -> ExitTrace:
    """Random trace whose later exits are, on average, more accurate and more confident."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    ease = rng.random(n)
    probs = np.empty((n, exits, classes))
    for i in range(exits):
        skill = 1.0 + 3.0 * (i + 1) / exits
        logits = rng.normal(0.0, 1.0, (n, classes))
        logits[np.arange(n), labels] += skill * (0.25 + ease) + rng.normal(0.0, 0.5, n)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs[:, i] = e / e.sum(axis=1, keepdims=True)
    if stage_costs is None:
        stage_costs = [2.0**i for i in range(exits)]
    cum = np.cumsum(np.asarray(stage_costs, dtype=np.float64))
    return ExitTrace(labels, probs, np.broadcast_to(cum, (n, exits)).copy())
