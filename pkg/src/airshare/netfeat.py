"""Carrier transportation networks and their differentiable features.

Every feature function accepts either a plain ``(..., V, V)`` array, with
optional leading batch axes, or an autodiff :class:`~airshare.autodiff.Var`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

FEATURE_NAMES: tuple[str, ...] = (
    "price",
    "freq",
    "delay_ratio",
    "delay_min",
    "cancel_ratio",
    "divert_ratio",
    "fatal",
    "serious",
    "minor",
    "aircraft_size",
    "seat_avail",
    "in_degree_src",
    "in_degree_dst",
    "out_degree_src",
    "out_degree_dst",
    "pagerank_src",
    "pagerank_dst",
    "ego_density_src",
    "ego_density_dst",
)
N_FEATURES = len(FEATURE_NAMES)
FREQ = 1
STATIC_INDICES: tuple[int, ...] = (0, 2, 3, 4, 5, 6, 7, 8, 9, 10)
NETWORK_INDICES: tuple[int, ...] = (1, 11, 12, 13, 14, 15, 16, 17, 18)

DEFAULT_DAMPING = 0.85
DEFAULT_ITERS = 50


class MissingFeatureError(KeyError):
    pass


@dataclass
class Network:
    """Structural route graph shared by all carriers.

    ``routes`` maps a route id to ``(src, dst)`` airport positions.
    """

    airports: list[str]
    routes: dict[str, tuple[int, int]]
    route_mask: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        n = len(self.airports)
        if len(set(self.airports)) != n:
            raise ValueError("duplicate airport ids")
        mask = np.zeros((n, n), dtype=bool)
        for rid, (s, d) in self.routes.items():
            if not (0 <= s < n and 0 <= d < n):
                raise ValueError(f"route {rid} references an unknown airport")
            if s == d:
                raise ValueError(f"route {rid} is a self-loop")
            if mask[s, d]:
                raise ValueError(f"route {rid} duplicates edge {self.airports[s]}->{self.airports[d]}")
            mask[s, d] = True
        self.route_mask = mask

    @classmethod
    def from_airport_ids(cls, airports: Sequence[str], routes: Mapping[str, tuple[str, str]]) -> "Network":
        pos = {a: i for i, a in enumerate(airports)}
        try:
            idx = {rid: (pos[s], pos[d]) for rid, (s, d) in routes.items()}
        except KeyError as exc:
            raise ValueError(f"route references undeclared airport {exc.args[0]!r}") from None
        return cls(list(airports), idx)

    @property
    def n_airports(self) -> int:
        return len(self.airports)

    def endpoints(self, route_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        pairs = np.array([self.routes[r] for r in route_ids], dtype=int).reshape(-1, 2)
        return pairs[:, 0], pairs[:, 1]

    @cached_property
    def ego_membership(self) -> np.ndarray:
        """``M[v, u] = 1`` when ``u`` is ``v`` or a structural neighbour of ``v``."""
        m = self.route_mask | self.route_mask.T
        m = m | np.eye(self.n_airports, dtype=bool)
        return m.astype(float)

    @cached_property
    def ego_scale(self) -> np.ndarray:
        n = self.ego_membership.sum(axis=1)
        with np.errstate(divide="ignore"):
            return np.where(n > 1, 1.0 / (n * (n - 1)), 0.0)


@dataclass
class FrequencyMatrix:
    """Monthly flight counts of one carrier between airports."""

    values: np.ndarray
    carrier_id: str = ""

    @classmethod
    def from_routes(
        cls, network: Network, freqs: Mapping[str, float], carrier_id: str = ""
    ) -> "FrequencyMatrix":
        a = np.zeros((network.n_airports, network.n_airports))
        for rid, f in freqs.items():
            s, d = network.routes[rid]
            a[s, d] = f
        return cls(a, carrier_id)

    def route_values(self, network: Network, route_ids: Sequence[str]) -> np.ndarray:
        src, dst = network.endpoints(route_ids)
        return self.values[src, dst].copy()

    def check(self, network: Network) -> None:
        if self.values.shape != network.route_mask.shape:
            raise ValueError(f"frequency matrix shape {self.values.shape} != network {network.route_mask.shape}")
        if np.any(self.values[~network.route_mask] != 0):
            raise ValueError("non-zero frequency on a pair that is not a route")
        if np.any(self.values < 0):
            raise ValueError("negative frequency")


def _values(a):
    return a.values if isinstance(a, FrequencyMatrix) else a


def degree_centrality(a):
    """Return ``(in_degree, out_degree)``: column and row sums of ``a``."""
    a = _values(a)
    return ad.col_sum(a), ad.row_sum(a)


def ego_density_all(a, network: Network):
    """Ego network density of every airport, shape ``(..., V)``.

    The neighbourhood comes from the static route mask so the result is
    smooth in the weights.  Isolated airports get 0.
    """
    a = ad.mul(_values(a), network.route_mask.astype(float))
    m = network.ego_membership
    inner = ad.row_sum(ad.mul(ad.matmul(m, a), m))
    return ad.mul(inner, network.ego_scale)


def ego_density(a, network: Network, v: int):
    return ad.gather(ego_density_all(a, network), (Ellipsis, v))


def pagerank(a, damping: float = DEFAULT_DAMPING, iters: int = DEFAULT_ITERS):
    """Power iteration on the row-normalised weights, unrolled ``iters`` times.

    Rows with no outgoing weight teleport uniformly.
    """
    if not 0.0 < damping < 1.0:
        raise ValueError(f"damping must lie in (0, 1), got {damping}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    a = _values(a)
    shape = ad.value(a).shape
    n = shape[-1]
    out = ad.row_sum(a)
    dangling = (ad.value(out) <= 0.0).astype(float)
    denom = ad.reshape(ad.add(out, dangling), shape[:-1] + (1,))
    trans = ad.add(ad.div(a, denom), dangling[..., :, None] / n)

    x = ad.power_iterate(trans, np.full((1, n), 1.0 / n), (1.0 - damping) / n, damping, iters)
    return ad.reshape(x, shape[:-2] + (n,))


def route_network_columns(a, network: Network, src, dst, damping=DEFAULT_DAMPING, iters=DEFAULT_ITERS):
    """The nine frequency-derived columns for routes ``src -> dst``.

    Returns a dict mapping feature index to an array of shape ``(..., R)``.
    """
    a = _values(a)
    in_deg, out_deg = degree_centrality(a)
    pr = pagerank(a, damping, iters)
    ego = ego_density_all(a, network)
    src = np.asarray(src)
    dst = np.asarray(dst)

    def at(x, idx):
        return ad.gather(x, (Ellipsis, idx))

    return {
        1: ad.gather(a, (Ellipsis, src, dst)),
        11: at(in_deg, src),
        12: at(in_deg, dst),
        13: at(out_deg, src),
        14: at(out_deg, dst),
        15: at(pr, src),
        16: at(pr, dst),
        17: at(ego, src),
        18: at(ego, dst),
    }


def route_features(a, static: np.ndarray, network: Network, src, dst, damping=DEFAULT_DAMPING, iters=DEFAULT_ITERS):
    """Full feature matrices ``(..., R, 19)`` for one carrier's routes.

    ``static`` is ``(R, 19)``; its frequency and network columns are ignored.
    """
    static = np.array(static, dtype=float)
    static[:, list(NETWORK_INDICES)] = 0.0
    cols = route_network_columns(a, network, src, dst, damping, iters)
    batch = ad.value(cols[1]).shape[:-1]
    shape = batch + static.shape
    out = static
    for j in NETWORK_INDICES:
        out = ad.add(out, ad.scatter(cols[j], (Ellipsis, slice(None), j), shape))
    return out


def assemble_features(
    matrices: Mapping[str, object],
    static_feats: Mapping[tuple[str, str], Sequence[float]],
    route: str,
    carrier: str,
    network: Network,
    damping: float = DEFAULT_DAMPING,
    iters: int = DEFAULT_ITERS,
):
    """19-dim feature vector of ``carrier`` on ``route``.

    ``static_feats[(route, carrier)]`` holds a length-19 vector whose static
    entries (0, 2-10) must be finite; the rest is filled in from the
    carrier's frequency matrix.
    """
    try:
        static = np.asarray(static_feats[(route, carrier)], dtype=float)
    except KeyError:
        raise MissingFeatureError(f"no static features for route {route!r}, carrier {carrier!r}") from None
    if static.shape != (N_FEATURES,):
        raise ValueError(f"static feature vector must have length {N_FEATURES}, got {static.shape}")
    bad = [FEATURE_NAMES[i] for i in STATIC_INDICES if not np.isfinite(static[i])]
    if bad:
        raise MissingFeatureError(f"missing static features {bad} for route {route!r}, carrier {carrier!r}")
    s, d = network.routes[route]
    f = route_features(matrices[carrier], static[None, :], network, [s], [d], damping, iters)
    return ad.gather(f, (Ellipsis, 0, slice(None)))
