"""Market panels: CSV schema, validation, feature extraction and a
synthetic market generator with a known share model."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import netfeat as nf
from .objective import InfluenceProblem
from .sharemodel import (
    Arch,
    ModelStack,
    RouteData,
    Scaler,
    ShareModel,
    init_model,
    masked_softmax,
    model_from_dict,
    model_to_dict,
)

OBS_COLUMNS: tuple[str, ...] = (
    "month",
    "route_id",
    "carrier_id",
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
    "share",
    "demand",
    "unit_cost",
)
ROUTE_COLUMNS = ("route_id", "src_airport", "dst_airport", "f_max")
AIRPORT_COLUMNS = ("airport_id", "name")
# observation column -> index in the 19-dim feature vector
FEATURE_COLUMNS = {name: i for i, name in enumerate(nf.FEATURE_NAMES[:11])}
SHARE_TOL = 1e-6


class SchemaError(ValueError):
    pass


class SimplexError(ValueError):
    pass


class EmptyMarketError(ValueError):
    pass


@dataclass
class MarketPanel:
    airports: list[str]
    airport_names: dict[str, str]
    routes: dict[str, tuple[str, str]]
    f_max: dict[str, float]
    observations: pd.DataFrame
    sample_fraction: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.routes:
            raise EmptyMarketError("market has no routes")
        known = set(self.airports)
        for rid, (s, d) in self.routes.items():
            for a in (s, d):
                if a not in known:
                    raise SchemaError(f"route {rid} references undeclared airport {a!r}")
        obs = self.observations
        if tuple(obs.columns) != OBS_COLUMNS:
            raise SchemaError(f"observation columns must be {list(OBS_COLUMNS)}, got {list(obs.columns)}")
        unknown = set(obs["route_id"]) - set(self.routes)
        if unknown:
            raise SchemaError(f"observations reference unknown routes {sorted(unknown)}")
        num = obs[list(OBS_COLUMNS[3:])]
        bad = ~np.isfinite(num.to_numpy(dtype=float))
        if bad.any():
            row, col = map(int, np.argwhere(bad)[0])
            raise SchemaError(f"observations row {row + 2}, column {num.columns[col]!r}: missing or non-numeric value")
        for col in ("freq", "demand", "unit_cost", "share"):
            neg = obs.index[obs[col] < 0]
            if len(neg):
                raise SchemaError(f"observations row {int(neg[0]) + 2}: negative {col}")
        if any(v < 0 for v in self.f_max.values()):
            raise SchemaError("negative f_max")
        sums = obs.groupby(["route_id", "month"], sort=False)["share"].sum()
        off = sums[(sums - 1.0).abs() > SHARE_TOL]
        if len(off):
            (route, month), total = off.index[0], off.iloc[0]
            raise SimplexError(f"shares of route {route} in month {month} sum to {total:.6g}, not 1")

    @property
    def months(self) -> list[str]:
        return list(dict.fromkeys(self.observations["month"]))

    @property
    def carriers(self) -> list[str]:
        return sorted(set(self.observations["carrier_id"]))

    def network(self) -> nf.Network:
        return nf.Network.from_airport_ids(self.airports, self.routes)

    def matrix(self, carrier: str, month: str, network: nf.Network | None = None) -> np.ndarray:
        net = network or self.network()
        obs = self.observations
        rows = obs[(obs["carrier_id"] == carrier) & (obs["month"] == month)]
        a = np.zeros((net.n_airports, net.n_airports))
        for rid, f in zip(rows["route_id"], rows["freq"]):
            s, d = net.routes[rid]
            a[s, d] = f
        return a

    def feature_matrix(self, damping=nf.DEFAULT_DAMPING, iters=nf.DEFAULT_ITERS) -> np.ndarray:
        """19-dim features for every observation row, in row order."""
        net = self.network()
        obs = self.observations
        out = np.zeros((len(obs), nf.N_FEATURES))
        for col, j in FEATURE_COLUMNS.items():
            out[:, j] = obs[col].to_numpy(dtype=float)
        for (month, carrier), rows in obs.groupby(["month", "carrier_id"], sort=False):
            a = self.matrix(carrier, month, net)
            src, dst = net.endpoints(list(rows["route_id"]))
            cols = nf.route_network_columns(a, net, src, dst, damping, iters)
            pos = obs.index.get_indexer(rows.index)
            for j in nf.NETWORK_INDICES:
                out[pos, j] = cols[j]
        return out

    def route_datasets(self, features: np.ndarray | None = None) -> list[RouteData]:
        """Per-route ``(months x carriers)`` training arrays, sorted by route id."""
        feats = self.feature_matrix() if features is None else features
        obs = self.observations
        months = self.months
        out = []
        for rid, rows in sorted(obs.groupby("route_id", sort=False), key=lambda kv: kv[0]):
            carriers = sorted(set(rows["carrier_id"]))
            r_months = [m for m in months if m in set(rows["month"])]
            mi = {m: i for i, m in enumerate(r_months)}
            ci = {c: i for i, c in enumerate(carriers)}
            x = np.zeros((len(r_months), len(carriers), nf.N_FEATURES))
            mask = np.zeros((len(r_months), len(carriers)))
            y = np.zeros_like(mask)
            pos = obs.index.get_indexer(rows.index)
            for p, m, c, s in zip(pos, rows["month"], rows["carrier_id"], rows["share"]):
                x[mi[m], ci[c]] = feats[p]
                mask[mi[m], ci[c]] = 1.0
                y[mi[m], ci[c]] = s
            out.append(RouteData(rid, r_months, carriers, x, mask, y))
        return out


# ------------------------------------------------------------------ files


def save_panel(panel: MarketPanel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(
        {"airport_id": panel.airports, "name": [panel.airport_names.get(a, a) for a in panel.airports]}
    ).to_csv(out / "airports.csv", index=False)
    ids = list(panel.routes)
    pd.DataFrame(
        {
            "route_id": ids,
            "src_airport": [panel.routes[r][0] for r in ids],
            "dst_airport": [panel.routes[r][1] for r in ids],
            "f_max": [panel.f_max[r] for r in ids],
        }
    ).to_csv(out / "routes.csv", index=False)
    panel.observations.to_csv(out / "observations.csv", index=False)
    (out / "meta.json").write_text(json.dumps({"sample_fraction": panel.sample_fraction}), encoding="utf-8")


def _read(path: Path, columns: Sequence[str], str_cols: Sequence[str]) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"missing panel table {path}")
    try:
        df = pd.read_csv(path, float_precision="round_trip", dtype={c: str for c in str_cols}, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyMarketError(f"{path.name} is empty") from None
    if tuple(df.columns) != tuple(columns):
        raise SchemaError(f"{path.name}: expected columns {list(columns)}, got {list(df.columns)}")
    for c in columns:
        if c in str_cols:
            continue
        conv = pd.to_numeric(df[c], errors="coerce")
        bad = conv.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(f"{path.name} row {row + 2}, column {c!r}: missing or non-numeric value")
        df[c] = conv.astype(float)
    return df


def load_panel(path) -> MarketPanel:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"panel directory {d} does not exist")
    airports = _read(d / "airports.csv", AIRPORT_COLUMNS, AIRPORT_COLUMNS)
    routes = _read(d / "routes.csv", ROUTE_COLUMNS, ROUTE_COLUMNS[:3])
    if routes.empty:
        raise EmptyMarketError("routes.csv lists no routes")
    obs = _read(d / "observations.csv", OBS_COLUMNS, OBS_COLUMNS[:3])
    meta_path = d / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return MarketPanel(
        airports=list(airports["airport_id"]),
        airport_names=dict(zip(airports["airport_id"], airports["name"])),
        routes={r: (s, t) for r, s, t in zip(routes["route_id"], routes["src_airport"], routes["dst_airport"])},
        f_max=dict(zip(routes["route_id"], routes["f_max"].astype(float))),
        observations=obs,
        sample_fraction=float(meta.get("sample_fraction", 0.1)),
    )


# -------------------------------------------------------------- generator


@dataclass(frozen=True)
class SynthConfig:
    n_airports: int = 8
    n_routes: int = 12
    n_carriers: int = 3
    n_months: int = 12
    noise_std: float = 0.0
    hidden_model: str = "multilogit"
    seed: int = 0
    hidden_layers: int = 3
    hidden_width: int = 16
    freq_median: float = 30.0
    demand_median: float = 2000.0
    demand_sigma: float = 0.6
    cost_median: float = 10.0
    cost_sigma: float = 0.3
    score_scale: float = 1.0
    sample_fraction: float = 0.1

    def __post_init__(self):
        if self.n_airports < 2 or self.n_carriers < 1 or self.n_months < 1 or self.n_routes < 1:
            raise ValueError("need >= 2 airports and >= 1 route, carrier and month")
        if self.n_routes > self.n_airports * (self.n_airports - 1):
            raise ValueError(
                f"{self.n_routes} routes do not fit among {self.n_airports} airports "
                f"(at most {self.n_airports * (self.n_airports - 1)})"
            )
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.hidden_model not in ("multilogit", "mlp"):
            raise ValueError(f"hidden_model must be 'multilogit' or 'mlp', got {self.hidden_model!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def _sample_routes(rng: np.random.Generator, n: int, m: int) -> list[tuple[int, int]]:
    """Directed edges by preferential attachment on total degree."""
    deg = np.zeros(n)
    edges: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    attempts = 0
    while len(edges) < m and attempts < 50 * m:
        attempts += 1
        p = (deg + 1.0) / (deg + 1.0).sum()
        s, d = rng.choice(n, size=2, replace=False, p=p)
        if (s, d) in seen:
            continue
        seen.add((int(s), int(d)))
        edges.append((int(s), int(d)))
        deg[s] += 1
        deg[d] += 1
    if len(edges) < m:
        rest = [(i, j) for i in range(n) for j in range(n) if i != j and (i, j) not in seen]
        pick = rng.choice(len(rest), size=m - len(edges), replace=False)
        edges.extend(rest[i] for i in sorted(pick))
    return edges


@dataclass
class GeneratedMarket:
    panel: MarketPanel
    models: dict[str, ShareModel]
    config: SynthConfig

    def ground_truth(self) -> dict:
        return {"config": asdict(self.config), "models": {r: model_to_dict(m) for r, m in sorted(self.models.items())}}


def generate_market(config: SynthConfig) -> GeneratedMarket:
    """Sample a market whose shares come from a hidden per-route model.

    Shares are the hidden model's predictions on features computed by the
    real network pipeline, plus optional Gaussian noise renormalised onto
    the simplex.
    """
    rng = np.random.default_rng(config.seed)
    airports = [f"AP{i:03d}" for i in range(config.n_airports)]
    edges = _sample_routes(rng, config.n_airports, config.n_routes)
    route_ids = [f"R{i:04d}" for i in range(len(edges))]
    routes = {r: (airports[s], airports[d]) for r, (s, d) in zip(route_ids, edges)}
    carriers = [f"C{i + 1}" for i in range(config.n_carriers)]
    months = [f"M{t + 1:02d}" for t in range(config.n_months)]
    k_min = min(2, config.n_carriers)

    served = {}
    for r in route_ids:
        k = int(rng.integers(k_min, config.n_carriers + 1))
        served[r] = sorted(rng.choice(config.n_carriers, size=k, replace=False).tolist())

    safety = rng.poisson([1.0, 2.0, 4.0], size=(config.n_carriers, 3)).astype(float)
    demand_base = rng.lognormal(np.log(config.demand_median), config.demand_sigma, size=len(route_ids))
    rows = []
    for ri, r in enumerate(route_ids):
        for c in served[r]:
            base_f = rng.lognormal(np.log(config.freq_median), 0.5)
            price = rng.uniform(80, 400)
            size = rng.uniform(70, 250)
            cost = rng.lognormal(np.log(config.cost_median), config.cost_sigma)
            for t, m in enumerate(months):
                rows.append(
                    {
                        "month": m,
                        "route_id": r,
                        "carrier_id": carriers[c],
                        "price": price * (1 + 0.05 * rng.normal()),
                        "freq": float(max(1, round(base_f * (1 + 0.15 * rng.normal())))),
                        "delay_ratio": rng.beta(2, 8),
                        "delay_min": rng.uniform(10, 60),
                        "cancel_ratio": rng.beta(1, 50),
                        "divert_ratio": rng.beta(1, 200),
                        "fatal": safety[c, 0],
                        "serious": safety[c, 1],
                        "minor": safety[c, 2],
                        "aircraft_size": size,
                        "seat_avail": rng.uniform(0.5, 0.95),
                        "share": 0.0,
                        "demand": float(round(demand_base[ri] * (1 + 0.1 * rng.normal()))),
                        "unit_cost": cost,
                    }
                )
    obs = pd.DataFrame(rows, columns=list(OBS_COLUMNS))
    obs = obs.sort_values(["month", "route_id", "carrier_id"], kind="stable").reset_index(drop=True)
    # placeholder shares so the panel validates before the model runs
    obs["share"] = 1.0 / obs.groupby(["route_id", "month"])["share"].transform("size")
    f_max = obs.groupby("route_id")["freq"].max().to_dict()
    panel = MarketPanel(airports, {a: f"Airport {a}" for a in airports}, routes, f_max, obs, config.sample_fraction)

    feats = panel.feature_matrix()
    datasets = panel.route_datasets(feats)
    arch = Arch("multilogit") if config.hidden_model == "multilogit" else Arch("mlp", config.hidden_layers, config.hidden_width)
    models: dict[str, ShareModel] = {}
    share_col = np.zeros(len(obs))
    model_rng = np.random.default_rng([config.seed, 1])
    index = {(m, r, c): i for i, (m, r, c) in enumerate(zip(obs["month"], obs["route_id"], obs["carrier_id"]))}
    # hidden weights are drawn per panel-wide std of each feature; a route whose
    # network features barely move would otherwise react to a small schedule
    # change as if it were many standard deviations
    global_std = np.concatenate([d.x[d.mask > 0] for d in datasets]).std(axis=0)
    for d in datasets:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scaler, kept = Scaler.fit(d.x[d.mask > 0], arch.features, d.route)
        model = init_model(d.route, arch, scaler, kept, int(model_rng.integers(2**31)))
        if model.kind == "multilogit":
            w = model_rng.normal(size=len(kept)) / np.sqrt(len(kept))
            # more flights and a better connected network attract passengers
            for j, f in enumerate(kept):
                if f in nf.NETWORK_INDICES:
                    w[j] = abs(w[j])
            if nf.FREQ in kept:
                w[kept.index(nf.FREQ)] += 0.5
            model.weights = w
        ratio = scaler.std / np.where(global_std[kept] > 0, global_std[kept], 1.0)
        if model.kind == "multilogit":
            model.weights = model.weights * ratio
        else:
            model.w0 = model.w0 * ratio[:, None]
        stack = ModelStack.from_models([model])
        scores = stack.scores(d.x[:, None])[:, 0]
        spread = scores[d.mask > 0].std()
        if spread > 0:
            factor = config.score_scale / spread
            if model.kind == "multilogit":
                model.weights = model.weights * factor
            else:
                model.w_out = model.w_out * factor
            stack = ModelStack.from_models([model])
        pred = masked_softmax(stack.scores(d.x[:, None]), d.mask[:, None])[:, 0]
        if config.noise_std > 0:
            noisy = np.clip(pred + config.noise_std * rng.normal(size=pred.shape), 1e-6, None) * d.mask
            pred = noisy / noisy.sum(axis=1, keepdims=True)
        for t, m in enumerate(d.months):
            for k, c in enumerate(d.carriers):
                if d.mask[t, k]:
                    share_col[index[(m, d.route, c)]] = pred[t, k]
        models[d.route] = model
    obs["share"] = share_col
    panel = MarketPanel(airports, panel.airport_names, routes, f_max, obs, config.sample_fraction)
    return GeneratedMarket(panel, models, config)


def save_generated(market: GeneratedMarket, out_dir) -> None:
    save_panel(market.panel, out_dir)
    (Path(out_dir) / "ground_truth.json").write_text(json.dumps(market.ground_truth(), indent=1), encoding="utf-8")


def load_ground_truth(path) -> dict[str, ShareModel]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return {r: model_from_dict(m) for r, m in d["models"].items()}


# ------------------------------------------------------------- problems


def build_problem(
    panel: MarketPanel,
    models: dict[str, ShareModel],
    carrier: str,
    month: str | None = None,
    top: int | None = None,
    budget: float | None = None,
    features: np.ndarray | None = None,
) -> InfluenceProblem:
    """Influence problem for ``carrier`` in ``month`` (default: the last one).

    Competitors keep their observed features; the budget defaults to what
    the observed schedule costs.  ``top`` keeps the largest routes by demand,
    the remaining ones stay fixed at their observed frequencies.
    """
    month = panel.months[-1] if month is None else month
    net = panel.network()
    feats = panel.feature_matrix() if features is None else features
    obs = panel.observations
    in_month = (obs["month"] == month).to_numpy()
    own = in_month & (obs["carrier_id"] == carrier).to_numpy()
    if not own.any():
        raise ValueError(f"carrier {carrier} has no routes in month {month}")
    own_rows = obs[own]
    order = sorted(range(len(own_rows)), key=lambda i: own_rows["route_id"].iloc[i])
    if top is not None:
        order = sorted(order, key=lambda i: (-own_rows["demand"].iloc[i], own_rows["route_id"].iloc[i]))[:top]
        order.sort(key=lambda i: own_rows["route_id"].iloc[i])
    pos = np.flatnonzero(own)[order]
    route_ids = [obs["route_id"].iloc[p] for p in pos]

    competitors = []
    for r in route_ids:
        sel = np.flatnonzero(in_month & (obs["route_id"] == r).to_numpy() & (obs["carrier_id"] != carrier).to_numpy())
        competitors.append(feats[sel])
    base = panel.matrix(carrier, month, net)
    src, dst = net.endpoints(route_ids)
    base[src, dst] = 0.0
    observed = obs["freq"].to_numpy()[pos]
    cost = obs["unit_cost"].to_numpy()[pos]
    return InfluenceProblem(
        network=net,
        carrier=carrier,
        routes=route_ids,
        demand=obs["demand"].to_numpy()[pos],
        cost=cost,
        budget=float(np.dot(cost, observed)) if budget is None else float(budget),
        f_max=np.array([panel.f_max[r] for r in route_ids]),
        static=feats[pos],
        competitors=competitors,
        models={r: models[r] for r in route_ids},
        base_matrix=base,
        observed=observed,
        sample_fraction=panel.sample_fraction,
        meta={"month": month},
    )
