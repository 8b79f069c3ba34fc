"""Adaptive gradient ascent (AGA) for budget-constrained influence.

Each epoch builds a fresh tape, takes the gradients of the influence and
of the active penalty, picks the penalty weight beta so that the update
direction strictly lowers any cost overrun, steps, and clips the schedule
back into its box.
"""

from __future__ import annotations

import csv
import enum
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import netfeat as nf
from .objective import InfluenceProblem, PenaltyKind, cost_overrun, influence, penalty

TRACE_COLUMNS = ("epoch", "objective", "cost_overrun", "beta", "elapsed_ms")


class Init(str, enum.Enum):
    ZERO = "zero"
    REAL = "real"
    RANDOM = "random"


class DegenerateProblemError(ValueError):
    """Positive overrun while the penalty gradient vanishes (all costs zero)."""


class NoFeasibleIterateError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgaConfig:
    gamma: float = 10.0
    epsilon: float = 1000.0
    penalty: PenaltyKind = PenaltyKind.RELU
    min_epochs: int = 500
    max_epochs: int = 2000
    init: Init = Init.ZERO
    seed: int = 0
    # pick beta from coordinates the box lets move (see free_direction)
    box_aware: bool = True
    # ascend in unit-free coordinates (see optimize)
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "penalty", PenaltyKind(self.penalty))
        object.__setattr__(self, "init", Init(self.init))
        if not self.gamma > 0 or not self.epsilon > 0:
            raise ValueError("gamma and epsilon must be positive")
        if not 0 <= self.min_epochs <= self.max_epochs:
            raise ValueError("need 0 <= min_epochs <= max_epochs")

    def echo(self) -> dict:
        d = asdict(self)
        d["penalty"] = self.penalty.value
        d["init"] = self.init.value
        return d


@dataclass
class AgaTrace:
    epoch: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    cost_overrun: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    elapsed_ms: list[float] = field(default_factory=list)

    def append(self, epoch, objective, overrun, beta, elapsed_ms):
        self.epoch.append(int(epoch))
        self.objective.append(float(objective))
        self.cost_overrun.append(float(overrun))
        self.beta.append(float(beta))
        self.elapsed_ms.append(float(elapsed_ms))

    def __len__(self) -> int:
        return len(self.epoch)

    def rows(self):
        return zip(self.epoch, self.objective, self.cost_overrun, self.beta, self.elapsed_ms)

    def to_csv(self, path, timing: bool = True) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for e, o, c, b, t in self.rows():
                w.writerow([e, repr(o), repr(c), repr(b), repr(t if timing else 0.0)])


def beta_update(grad_o: np.ndarray, grad_penalty: np.ndarray, c_value: float, epsilon: float) -> float:
    """Smallest-margin penalty weight that makes the step reduce the overrun.

    ``(o'.c')/(c'.c') + c * epsilon``; with it ``c'.(o' - beta c')`` equals
    ``-c * epsilon * |c'|^2``.
    """
    if not c_value > 0:
        raise ValueError("beta_update needs a positive cost overrun")
    g = np.ravel(grad_penalty)
    gg = float(np.dot(g, g))
    if gg == 0.0:
        raise DegenerateProblemError("penalty gradient vanishes while the budget is exceeded")
    return float(np.dot(np.ravel(grad_o), g)) / gg + c_value * epsilon


def free_direction(x, grad_o, grad_p, c_value, epsilon, lower, upper):
    """Overrun-reducing direction restricted to coordinates that can move.

    Coordinates sitting on a bound while the direction pushes them outward
    are frozen and beta is recomputed on the rest, until nothing more
    needs freezing.  The returned step then satisfies
    ``grad_p . step = -c * epsilon * |grad_p[free]|^2`` and clipping does
    not cancel it.
    """
    lower = np.broadcast_to(lower, x.shape)
    upper = np.broadcast_to(upper, x.shape)
    free = np.ones(x.shape, dtype=bool)
    for _ in range(x.size + 1):
        beta = beta_update(grad_o[free], grad_p[free], c_value, epsilon)
        step = np.where(free, grad_o - beta * grad_p, 0.0)
        # drop floor-pinned coordinates before ceiling-pinned ones: while the
        # overrun is positive some coordinate sits above its floor, and the
        # descent identity keeps one free coordinate with a negative step
        blocked = free & (x <= lower) & (step < 0)
        if not blocked.any():
            blocked = free & (x >= upper) & (step > 0)
        if not blocked.any():
            return beta, step
        free &= ~blocked
    raise AssertionError("free set did not settle")


def ascend(
    objective: Callable,
    overrun: Callable,
    x0: np.ndarray,
    lower,
    upper,
    config: AgaConfig,
    timing: bool = True,
    feasible: Callable | None = None,
) -> tuple[np.ndarray, AgaTrace]:
    """Run the AGA loop on generic differentiable callables.

    ``objective(x)`` and ``overrun(x)`` map a tape Var to scalar Vars (and
    plain arrays to floats).  Returns the continuous iterate at which the
    loop stopped: the first epoch at or after ``min_epochs`` that is
    feasible, or the best feasible iterate seen if ``max_epochs`` runs out.

    An iterate counts as feasible when its overrun is not positive or when
    ``feasible(x)`` says so.  The beta rule shrinks a positive overrun
    geometrically, so the continuous overrun usually approaches zero from
    above; a caller that rounds the result down (which only lowers cost)
    passes a check on the rounded schedule so the loop can stop there.
    """
    x = np.clip(np.array(x0, dtype=float), lower, upper)
    trace = AgaTrace()
    best_x, best_o = None, -np.inf
    start = time.perf_counter()
    for epoch in range(config.max_epochs):
        tape = ad.Tape()
        xv = tape.var(x)
        o = objective(xv)
        c = overrun(xv)
        o_val, c_val = float(o.value), float(c.value)
        ok = c_val <= 0 or (feasible is not None and feasible(x))
        if ok and o_val > best_o:
            best_x, best_o = x.copy(), o_val
        if epoch >= config.min_epochs and ok:
            trace.append(epoch, o_val, c_val, 0.0, (time.perf_counter() - start) * 1e3 if timing else 0.0)
            return x, trace
        pen = penalty(c, config.penalty)
        grad_o, = tape.gradient(o, xv)
        if c_val > 0:
            grad_p, = tape.gradient(pen, xv)
            if config.box_aware:
                beta, step = free_direction(x, grad_o, grad_p, c_val, config.epsilon, lower, upper)
            else:
                beta = beta_update(grad_o, grad_p, c_val, config.epsilon)
                step = grad_o - beta * grad_p
        else:
            beta = 0.0
            step = grad_o
        trace.append(epoch, o_val, c_val, beta, (time.perf_counter() - start) * 1e3 if timing else 0.0)
        x = np.clip(x + config.gamma * step, lower, upper)
    if best_x is None:
        raise NoFeasibleIterateError(f"no feasible iterate within {config.max_epochs} epochs")
    return best_x, trace


def initialize(problem: InfluenceProblem, scheme: Init | str = Init.ZERO, seed: int = 0) -> nf.FrequencyMatrix:
    """Starting schedule: zeros, the observed one, or small random values."""
    scheme = Init(scheme)
    n = problem.n_routes
    if scheme is Init.ZERO:
        x = np.zeros(n)
    elif scheme is Init.REAL:
        if problem.observed is None:
            raise ValueError("real initialisation needs observed frequencies in the problem")
        x = np.clip(problem.observed, 0.0, problem.f_max)
    else:
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, 1.0, size=n) * 0.1 * problem.f_max
    return problem.to_matrix(x)


def optimize(problem: InfluenceProblem, config: AgaConfig = AgaConfig(), timing: bool = True):
    """Maximise influence under the budget; returns ``(matrix, trace)``.

    With ``config.normalize`` the loop runs on ``u = x / f_max`` in the unit
    box, with the influence divided by the total demand and the overrun by
    the cost of flying every route at its cap.  Positive rescaling keeps the
    feasibility argument intact and makes gamma and epsilon independent of
    the currency and passenger units.  The trace is reported in the
    original units (beta stays in the scaled ones).

    The continuous solution is rounded down, which keeps it inside the
    box and can only lower the total cost.
    """
    if problem.budget < 0:
        raise ValueError("budget must be non-negative")
    x0 = problem.route_vector(initialize(problem, config.init, config.seed))
    if config.normalize:
        span = np.where(problem.f_max > 0, problem.f_max, 1.0)
        o_scale = max(float(np.sum(problem.demand)), 1e-300)
        c_scale = max(float(np.dot(problem.cost, problem.f_max)), 1e-300)
    else:
        span, o_scale, c_scale = np.ones(problem.n_routes), 1.0, 1.0

    def to_x(u):
        return np.floor(u * span)

    u, trace = ascend(
        lambda v: influence(problem, v * span) / o_scale,
        lambda v: cost_overrun(problem, v * span) / c_scale,
        x0 / span,
        0.0,
        problem.f_max / span,
        config,
        timing,
        feasible=lambda v: problem.is_feasible(to_x(v)),
    )
    trace.objective = [v * o_scale for v in trace.objective]
    trace.cost_overrun = [v * c_scale for v in trace.cost_overrun]
    return problem.to_matrix(to_x(u)), trace
