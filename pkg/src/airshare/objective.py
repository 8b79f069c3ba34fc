"""Market influence of one carrier and its budget-penalised variants.

The decision variable is the vector ``x`` of the carrier's monthly flights on
the problem's routes (sorted by route id).  It is scattered into the
carrier's frequency matrix, network features are recomputed from that
matrix, and every route's share model is evaluated with competitors frozen.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import netfeat as nf
from .sharemodel import ModelStack, ShareModel, arch_key, load_model, masked_softmax, model_from_dict, model_to_dict

PROBLEM_VERSION = 1


class PenaltyKind(str, enum.Enum):
    LAGRANGE = "lagrange"
    RELU = "relu"


@dataclass
class InfluenceProblem:
    """Budget-constrained influence maximisation for one carrier.

    Arrays are aligned with ``routes`` (kept sorted).  ``static`` holds the
    carrier's own 19-dim feature rows; frequency and network columns are
    recomputed.  ``competitors[i]`` is a ``(K_i, 19)`` block of the other
    carriers on route ``i``, frozen during optimisation.  ``base_matrix``
    carries the carrier's flights on routes outside the problem.
    """

    network: nf.Network
    carrier: str
    routes: list[str]
    demand: np.ndarray
    cost: np.ndarray
    budget: float
    f_max: np.ndarray
    static: np.ndarray
    competitors: list[np.ndarray]
    models: dict[str, ShareModel]
    base_matrix: np.ndarray | None = None
    observed: np.ndarray | None = None
    sample_fraction: float = 1.0
    damping: float = nf.DEFAULT_DAMPING
    pagerank_iters: int = nf.DEFAULT_ITERS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        order = np.argsort(self.routes, kind="stable")
        if list(order) != list(range(len(self.routes))):
            self.routes = [self.routes[i] for i in order]
            self.demand = np.asarray(self.demand, dtype=float)[order]
            self.cost = np.asarray(self.cost, dtype=float)[order]
            self.f_max = np.asarray(self.f_max, dtype=float)[order]
            self.static = np.asarray(self.static, dtype=float)[order]
            self.competitors = [self.competitors[i] for i in order]
            if self.observed is not None:
                self.observed = np.asarray(self.observed, dtype=float)[order]
        self.demand = np.asarray(self.demand, dtype=float)
        self.cost = np.asarray(self.cost, dtype=float)
        self.f_max = np.asarray(self.f_max, dtype=float)
        self.static = np.asarray(self.static, dtype=float).reshape(len(self.routes), nf.N_FEATURES)
        self.competitors = [np.asarray(c, dtype=float).reshape(-1, nf.N_FEATURES) for c in self.competitors]
        if self.observed is not None:
            self.observed = np.asarray(self.observed, dtype=float)
        v = self.network.n_airports
        self.base_matrix = np.zeros((v, v)) if self.base_matrix is None else np.asarray(self.base_matrix, dtype=float)
        self.validate()

    def validate(self) -> None:
        n = len(self.routes)
        if len(set(self.routes)) != n:
            raise ValueError("duplicate route ids")
        for name in ("demand", "cost", "f_max"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per route")
        if len(self.competitors) != n:
            raise ValueError("competitor features must be given for every route")
        if np.any(self.demand < 0) or np.any(self.f_max < 0) or self.budget < 0:
            raise ValueError("demand, f_max and budget must be non-negative")
        if np.any(self.cost <= 0):
            raise ValueError("unit costs must be positive")
        for r in self.routes:
            if r not in self.network.routes:
                raise ValueError(f"route {r} is not in the network")
            if r not in self.models:
                raise KeyError(f"no share model for route {r}")
        src, dst = self.src_dst
        if np.any(self.base_matrix[src, dst] != 0):
            raise ValueError("base_matrix must be zero on the optimised routes")

    @property
    def n_routes(self) -> int:
        return len(self.routes)

    @cached_property
    def src_dst(self) -> tuple[np.ndarray, np.ndarray]:
        return self.network.endpoints(self.routes)

    @cached_property
    def _padded(self):
        # slot 0 is the optimised carrier, competitors follow
        kmax = 1 + max((c.shape[0] for c in self.competitors), default=0)
        comp = np.zeros((self.n_routes, kmax, nf.N_FEATURES))
        mask = np.zeros((self.n_routes, kmax))
        mask[:, 0] = 1.0
        for i, c in enumerate(self.competitors):
            comp[i, 1 : 1 + len(c)] = c
            mask[i, 1 : 1 + len(c)] = 1.0
        return comp, mask

    @cached_property
    def _groups(self) -> list[tuple[np.ndarray, ModelStack]]:
        keys: dict[tuple, list[int]] = {}
        for i, r in enumerate(self.routes):
            keys.setdefault(arch_key(self.models[r]), []).append(i)
        return [
            (np.array(idx), ModelStack.from_models([self.models[self.routes[i]] for i in idx]))
            for _, idx in sorted(keys.items())
        ]

    def to_matrix(self, x) -> nf.FrequencyMatrix:
        src, dst = self.src_dst
        a = self.base_matrix.copy()
        a[src, dst] = np.asarray(x, dtype=float)
        return nf.FrequencyMatrix(a, self.carrier)

    def route_vector(self, a) -> np.ndarray:
        if isinstance(a, nf.FrequencyMatrix):
            a = a.values
        src, dst = self.src_dst
        return np.asarray(a, dtype=float)[..., src, dst]

    def spend(self, x) -> float:
        return float(np.dot(self.cost, np.asarray(x, dtype=float)))

    def is_feasible(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= 0) and np.all(x <= self.f_max) and self.spend(x) <= self.budget)


def _as_routes(problem: InfluenceProblem, x):
    if isinstance(x, nf.FrequencyMatrix):
        return problem.route_vector(x)
    if isinstance(x, ad.Var):
        return x
    return np.asarray(x, dtype=float)


def frequency_matrix(problem: InfluenceProblem, x):
    """Carrier matrix ``(..., V, V)`` with ``x`` placed on the problem routes."""
    src, dst = problem.src_dst
    shape = ad.value(x).shape[:-1] + problem.base_matrix.shape
    return ad.add(problem.base_matrix, ad.scatter(x, (Ellipsis, src, dst), shape))


def route_shares(problem: InfluenceProblem, x):
    """Predicted share of the carrier on every route, shape ``(..., R)``.

    Works on a Var (one schedule) or on an array with leading batch axes.
    """
    x = _as_routes(problem, x)
    src, dst = problem.src_dst
    a = frequency_matrix(problem, x)
    own = nf.route_features(a, problem.static, problem.network, src, dst, problem.damping, problem.pagerank_iters)
    comp, mask = problem._padded
    batch = ad.value(own).shape[:-2]
    feats = ad.add(comp, ad.scatter(own, (Ellipsis, slice(None), 0, slice(None)), batch + comp.shape))

    if len(problem._groups) == 1:
        _, stack = problem._groups[0]
        shares = masked_softmax(stack.scores(feats), mask)
        return ad.gather(shares, (Ellipsis, slice(None), 0))

    out = None
    for idx, stack in problem._groups:
        sub = ad.gather(feats, (Ellipsis, idx, slice(None), slice(None)))
        shares = masked_softmax(stack.scores(sub), mask[idx])
        own_share = ad.gather(shares, (Ellipsis, slice(None), 0))
        placed = ad.scatter(own_share, (Ellipsis, idx), batch + (problem.n_routes,))
        out = placed if out is None else ad.add(out, placed)
    return out


def influence(problem: InfluenceProblem, x):
    """Passengers per month: sum over routes of demand times predicted share."""
    shares = route_shares(problem, x)
    return ad.row_sum(ad.mul(shares, problem.demand))


def cost_overrun(problem: InfluenceProblem, x):
    """Total operating cost minus budget (negative means slack)."""
    x = _as_routes(problem, x)
    return ad.sub(ad.row_sum(ad.mul(x, problem.cost)), problem.budget)


def penalty(c, kind: PenaltyKind):
    kind = PenaltyKind(kind)
    if kind is PenaltyKind.LAGRANGE:
        return ad.mul(0.5, ad.mul(c, c))
    return ad.relu(c)


def penalized(problem: InfluenceProblem, x, beta: float, kind: PenaltyKind):
    """Influence minus ``beta`` times the squared-half or rectified overrun."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    o = influence(problem, x)
    return ad.sub(o, ad.mul(beta, penalty(cost_overrun(problem, x), kind)))


def lambda_hat(c_value: float, delta: float) -> float:
    """Minimiser over lambda of ``o - lambda*c + delta*lambda**2``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    return c_value / (2.0 * delta)


# ------------------------------------------------------------------ files


def _hash_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def problem_to_dict(problem: InfluenceProblem, model_refs: Mapping[str, str] | None = None) -> dict:
    """JSON-ready description; models are inlined unless ``model_refs`` maps
    route ids to relative model file paths."""
    src, dst = problem.src_dst
    fixed = [
        {"src": problem.network.airports[i], "dst": problem.network.airports[j], "freq": float(problem.base_matrix[i, j])}
        for i, j in zip(*np.nonzero(problem.base_matrix))
    ]
    routes = []
    for i, r in enumerate(problem.routes):
        s, d = problem.network.routes[r]
        routes.append(
            {
                "route_id": r,
                "src": problem.network.airports[s],
                "dst": problem.network.airports[d],
                "demand": float(problem.demand[i]),
                "unit_cost": float(problem.cost[i]),
                "f_max": float(problem.f_max[i]),
                "static": problem.static[i].tolist(),
                "competitors": problem.competitors[i].tolist(),
                "observed_freq": None if problem.observed is None else float(problem.observed[i]),
                "model": model_refs[r] if model_refs else model_to_dict(problem.models[r]),
            }
        )
    other = {
        rid: [problem.network.airports[s], problem.network.airports[d]]
        for rid, (s, d) in problem.network.routes.items()
        if rid not in set(problem.routes)
    }
    return {
        "format_version": PROBLEM_VERSION,
        "carrier": problem.carrier,
        "budget": float(problem.budget),
        "sample_fraction": problem.sample_fraction,
        "pagerank": {"damping": problem.damping, "iters": problem.pagerank_iters},
        "airports": list(problem.network.airports),
        "routes": routes,
        "other_routes": other,
        "fixed_frequencies": fixed,
        "meta": problem.meta,
    }


def problem_from_dict(d: dict, base_dir: Path | None = None) -> InfluenceProblem:
    if d.get("format_version") != PROBLEM_VERSION:
        raise ValueError(f"unsupported problem format version {d.get('format_version')!r}")
    edges = {r["route_id"]: (r["src"], r["dst"]) for r in d["routes"]}
    edges.update({k: tuple(v) for k, v in d.get("other_routes", {}).items()})
    network = nf.Network.from_airport_ids(d["airports"], edges)
    pos = {a: i for i, a in enumerate(network.airports)}
    base = np.zeros((network.n_airports, network.n_airports))
    for e in d.get("fixed_frequencies", []):
        base[pos[e["src"]], pos[e["dst"]]] = float(e["freq"])

    models = {}
    for r in d["routes"]:
        ref = r["model"]
        if isinstance(ref, str):
            path = Path(ref) if base_dir is None else Path(base_dir) / ref
            models[r["route_id"]] = load_model(path)
        else:
            models[r["route_id"]] = model_from_dict(ref)
    observed = [r.get("observed_freq") for r in d["routes"]]
    pr = d.get("pagerank", {})
    return InfluenceProblem(
        network=network,
        carrier=d["carrier"],
        routes=[r["route_id"] for r in d["routes"]],
        demand=np.array([r["demand"] for r in d["routes"]], dtype=float),
        cost=np.array([r["unit_cost"] for r in d["routes"]], dtype=float),
        budget=float(d["budget"]),
        f_max=np.array([r["f_max"] for r in d["routes"]], dtype=float),
        static=np.array([r["static"] for r in d["routes"]], dtype=float).reshape(-1, nf.N_FEATURES),
        competitors=[np.array(r["competitors"], dtype=float).reshape(-1, nf.N_FEATURES) for r in d["routes"]],
        models=models,
        base_matrix=base,
        observed=None if any(o is None for o in observed) else np.array(observed, dtype=float),
        sample_fraction=float(d.get("sample_fraction", 1.0)),
        damping=float(pr.get("damping", nf.DEFAULT_DAMPING)),
        pagerank_iters=int(pr.get("iters", nf.DEFAULT_ITERS)),
        meta=d.get("meta", {}),
    )


def save_problem(problem: InfluenceProblem, path, model_refs=None) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(problem, model_refs), indent=1), encoding="utf-8")


def load_problem(path) -> tuple[InfluenceProblem, str]:
    """Load a problem file; also returns a content hash of it and any model files."""
    path = Path(path)
    raw = path.read_bytes()
    d = json.loads(raw)
    chunks = [raw]
    for r in d.get("routes", []):
        if isinstance(r.get("model"), str):
            chunks.append((path.parent / r["model"]).read_bytes())
    return problem_from_dict(d, path.parent), _hash_bytes(*chunks)
