"""Black-box reference optimisers: greedy marginal gain and grid brute force.

Both evaluate the full influence model (network features recomputed for
every candidate), batching candidates through the tape-free forward pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import netfeat as nf
from .aga import AgaTrace
from .objective import InfluenceProblem, influence


class GridTooLargeError(RuntimeError):
    pass


@dataclass(frozen=True)
class GreedyConfig:
    alpha: int = 1
    # keep adding while the best step gains nothing (spends remaining budget)
    spend_all: bool = False

    def __post_init__(self):
        if int(self.alpha) != self.alpha or self.alpha < 1:
            raise ValueError("alpha must be an integer >= 1")


@dataclass(frozen=True)
class BruteForceConfig:
    alpha: float = 1
    batch_size: int = 4096
    route_limit: int = 3
    max_points: int = 20_000_000

    def __post_init__(self):
        if self.alpha < 1 or self.batch_size < 1:
            raise ValueError("alpha and batch_size must be >= 1")


@dataclass
class GreedyResult:
    matrix: nf.FrequencyMatrix
    objective: float
    trace: AgaTrace
    steps: int
    evaluations: int


def greedy_optimize(problem: InfluenceProblem, config: GreedyConfig = GreedyConfig(), timing: bool = True) -> GreedyResult:
    """Repeatedly add ``alpha`` flights where influence gains the most."""
    if problem.budget < 0:
        raise ValueError("budget must be non-negative")
    alpha = float(config.alpha)
    x = np.zeros(problem.n_routes)
    current = float(influence(problem, x))
    spent = 0.0
    trace = AgaTrace()
    start = time.perf_counter()
    steps = evals = 0
    trace.append(0, current, spent - problem.budget, 0.0, 0.0)
    while True:
        ok = (x + alpha <= problem.f_max) & (spent + alpha * problem.cost <= problem.budget)
        cand = np.flatnonzero(ok)
        if cand.size == 0:
            break
        batch = np.repeat(x[None, :], cand.size, axis=0)
        batch[np.arange(cand.size), cand] += alpha
        values = influence(problem, batch)
        evals += cand.size
        best = int(np.argmax(values))
        gain = values[best] - current
        if gain <= 0 and not config.spend_all:
            break
        r = cand[best]
        x[r] += alpha
        spent = float(np.dot(problem.cost, x))
        current = float(values[best])
        steps += 1
        trace.append(steps, current, spent - problem.budget, 0.0, (time.perf_counter() - start) * 1e3 if timing else 0.0)
    return GreedyResult(problem.to_matrix(x), current, trace, steps, evals)


def grid_axes(problem: InfluenceProblem, alpha: float) -> list[np.ndarray]:
    axes = []
    for f in problem.f_max:
        g = np.arange(0.0, f + 1e-9, alpha)
        if g[-1] < f:
            g = np.append(g, f)
        axes.append(g)
    return axes


@dataclass
class BruteForceResult:
    matrix: nf.FrequencyMatrix
    objective: float
    evaluated: int
    feasible: int


def brute_force_optimize(problem: InfluenceProblem, config: BruteForceConfig = BruteForceConfig()) -> BruteForceResult:
    """Exact optimum over the ``alpha`` grid of the frequency box.

    Points are enumerated in lexicographic order and evaluated ``batch_size``
    at a time; ties go to the lexicographically smallest schedule.
    """
    if problem.n_routes > config.route_limit:
        raise GridTooLargeError(f"{problem.n_routes} routes exceed the brute-force limit of {config.route_limit}")
    axes = grid_axes(problem, config.alpha)
    sizes = [len(a) for a in axes]
    total = int(np.prod(sizes, dtype=float))
    if total > config.max_points:
        raise GridTooLargeError(f"grid of {total} points exceeds the limit of {config.max_points}")

    best_val, best_x = -np.inf, None
    feasible = 0
    for lo in range(0, total, config.batch_size):
        flat = np.arange(lo, min(lo + config.batch_size, total))
        idx = np.unravel_index(flat, sizes)
        pts = np.stack([axes[r][i] for r, i in enumerate(idx)], axis=1)
        ok = pts @ problem.cost <= problem.budget
        if not ok.any():
            continue
        pts = pts[ok]
        feasible += len(pts)
        vals = influence(problem, pts)
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val, best_x = float(vals[i]), pts[i]
    if best_x is None:
        # the origin is always on the grid and affordable when budget >= 0
        raise RuntimeError("no affordable grid point")
    objective = float(influence(problem, best_x))
    return BruteForceResult(problem.to_matrix(best_x), objective, total, feasible)
