"""Per-route market-share models.

Two model families share one scoring path:

* :class:`MultiLogitModel` - a softmax over linear scores of standardised
  features (Model1 / Model2 are feature-subset configurations of it).
* :class:`ResidualMlpModel` - ReLU layers with residual connections after
  the first one, followed by the same softmax read-out.

Models of the same architecture are stacked along a route axis so that
training and optimisation evaluate every route in one vectorised pass.
"""

from __future__ import annotations

import json
import logging
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .netfeat import N_FEATURES

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

FEATURE_SETS: dict[str, tuple[int, ...]] = {
    "model1": tuple(range(1, 9)),
    "model2": tuple(range(0, 11)),
    "all": tuple(range(N_FEATURES)),
}

DEFAULT_GRID = tuple(("mlp", l, d) for l in (3, 4, 5) for d in (16, 32))


class TrainingError(RuntimeError):
    pass


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, subset: Sequence[int], route: str = "") -> tuple["Scaler", list[int]]:
        """Z-score statistics over rows of ``x``; constant columns are dropped."""
        cols = x[:, list(subset)]
        mean = cols.mean(axis=0)
        std = cols.std(axis=0)
        keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        if not keep.all():
            dropped = [int(s) for s, k in zip(subset, keep) if not k]
            warnings.warn(f"route {route}: constant features {dropped} dropped", stacklevel=3)
        kept = [int(s) for s, k in zip(subset, keep) if k]
        return cls(mean[keep], std[keep]), kept


@dataclass(frozen=True)
class Arch:
    kind: str = "mlp"
    layers: int = 3
    width: int = 16
    features: tuple[int, ...] = FEATURE_SETS["all"]

    def __post_init__(self):
        if self.kind not in ("multilogit", "mlp"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.kind == "mlp" and (self.layers < 2 or self.width < 1):
            raise ValueError("mlp needs layers >= 2 and width >= 1")

    @property
    def key(self) -> tuple:
        return ("multilogit",) if self.kind == "multilogit" else ("mlp", self.layers, self.width)

    def label(self) -> str:
        return "multilogit" if self.kind == "multilogit" else f"mlp-l{self.layers}-d{self.width}"

    @classmethod
    def parse(cls, spec, features="all") -> "Arch":
        if isinstance(spec, Arch):
            return spec
        if isinstance(features, str):
            features = FEATURE_SETS[features]
        if spec == "multilogit" or spec == ("multilogit",):
            return cls("multilogit", features=tuple(features))
        kind, layers, width = spec
        return cls(kind, int(layers), int(width), tuple(features))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    decay_ratio: float = 0.96
    decay_every: int = 100
    epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.decay_ratio <= 1:
            raise ValueError("decay_ratio must lie in (0, 1]")
        if self.decay_every < 1 or self.epochs < 1:
            raise ValueError("decay_every and epochs must be >= 1")


@dataclass
class MultiLogitModel:
    route: str
    feature_subset: list[int]
    scaler: Scaler
    weights: np.ndarray

    kind = "multilogit"

    @property
    def arch(self) -> Arch:
        return Arch("multilogit", features=tuple(self.feature_subset))

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.weights}


@dataclass
class ResidualMlpModel:
    route: str
    feature_subset: list[int]
    scaler: Scaler
    w0: np.ndarray
    b0: np.ndarray
    hidden_w: list[np.ndarray]
    hidden_b: list[np.ndarray]
    w_out: np.ndarray

    kind = "mlp"

    @property
    def layers(self) -> int:
        return len(self.hidden_w) + 1

    @property
    def width(self) -> int:
        return self.w0.shape[1]

    @property
    def arch(self) -> Arch:
        return Arch("mlp", self.layers, self.width, tuple(self.feature_subset))

    def params(self) -> dict[str, np.ndarray]:
        p = {"W0": self.w0, "b0": self.b0}
        for i, (w, b) in enumerate(zip(self.hidden_w, self.hidden_b), start=1):
            p[f"W{i}"] = w
            p[f"b{i}"] = b
        p["w"] = self.w_out
        return p


ShareModel = MultiLogitModel | ResidualMlpModel


def arch_key(model: ShareModel) -> tuple:
    if model.kind == "multilogit":
        return ("multilogit",)
    return ("mlp", model.layers, model.width)


@dataclass
class ModelStack:
    """Models of one architecture stacked along a leading route axis.

    Features are expanded to all 19 columns: unused or dropped columns get a
    zero inverse scale, so they never influence scores.
    """

    key: tuple
    routes: list[str]
    mean: np.ndarray
    inv_std: np.ndarray
    params: dict[str, np.ndarray]

    @classmethod
    def from_models(cls, models: Sequence[ShareModel]) -> "ModelStack":
        key = arch_key(models[0])
        if any(arch_key(m) != key for m in models):
            raise ValueError("cannot stack models of different architectures")
        g = len(models)
        mean = np.zeros((g, N_FEATURES))
        inv_std = np.zeros((g, N_FEATURES))
        params: dict[str, list] = {}
        for i, m in enumerate(models):
            sub = list(m.feature_subset)
            mean[i, sub] = m.scaler.mean
            inv_std[i, sub] = 1.0 / m.scaler.std
            for name, arr in m.params().items():
                if name == "W0" or (m.kind == "multilogit" and name == "w"):
                    full = np.zeros((N_FEATURES,) + arr.shape[1:])
                    full[sub] = arr
                    arr = full
                params.setdefault(name, []).append(arr)
        return cls(key, [m.route for m in models], mean, inv_std, {k: np.stack(v) for k, v in params.items()})

    def scores(self, feats, params=None):
        """Valuation scores ``(..., G, K)`` for features ``(..., G, K, 19)``."""
        p = self.params if params is None else params
        z = ad.mul(ad.sub(feats, self.mean[:, None, :]), self.inv_std[:, None, :])
        g = len(self.routes)
        if self.key[0] == "multilogit":
            return ad.row_sum(ad.mul(z, ad.reshape(p["w"], (g, 1, N_FEATURES))))
        layers, width = self.key[1], self.key[2]
        h = ad.relu(ad.add(ad.matmul(z, p["W0"]), ad.reshape(p["b0"], (g, 1, width))))
        for i in range(1, layers):
            pre = ad.add(ad.matmul(h, p[f"W{i}"]), ad.reshape(p[f"b{i}"], (g, 1, width)))
            h = ad.add(h, ad.relu(pre))
        return ad.row_sum(ad.mul(h, ad.reshape(p["w"], (g, 1, width))))

    def unstack(self, params: dict[str, np.ndarray], subsets, scalers) -> list[ShareModel]:
        out = []
        for i, route in enumerate(self.routes):
            sub = list(subsets[i])
            if self.key[0] == "multilogit":
                out.append(MultiLogitModel(route, sub, scalers[i], params["w"][i][sub].copy()))
            else:
                layers = self.key[1]
                out.append(
                    ResidualMlpModel(
                        route,
                        sub,
                        scalers[i],
                        params["W0"][i][sub].copy(),
                        params["b0"][i].copy(),
                        [params[f"W{j}"][i].copy() for j in range(1, layers)],
                        [params[f"b{j}"][i].copy() for j in range(1, layers)],
                        params["w"][i].copy(),
                    )
                )
        return out


def masked_softmax(scores, mask):
    """Softmax over the last axis restricted to ``mask``; masked entries get 0."""
    mask = np.asarray(mask, dtype=float)
    s = ad.value(scores)
    shift = np.max(np.where(mask > 0, s, -np.inf), axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    # masked slots are zeroed before exp so they cannot overflow
    e = ad.mul(ad.exp(ad.mul(ad.sub(scores, shift), mask)), mask)
    # fully masked rows (padding) would otherwise divide 0 by 0
    empty = (mask.sum(axis=-1, keepdims=True) == 0).astype(float)
    return ad.div(e, ad.add(ad.sum(e, axis=-1, keepdims=True), empty))


def predict_shares(model: ShareModel, features):
    """Market shares of the carriers whose feature rows are given.

    ``features`` is ``(K, 19)`` (array or Var) or a list of length-19 vectors.
    """
    if isinstance(features, (list, tuple)):
        dims = {np.shape(ad.value(f)) for f in features}
        if len(dims) != 1:
            raise ValueError(f"feature vectors differ in dimension: {sorted(dims)}")
        if any(isinstance(f, ad.Var) for f in features):
            raise TypeError("pass a stacked (K, 19) Var instead of a list of Vars")
        features = np.stack([np.asarray(f, dtype=float) for f in features])
    shape = ad.value(features).shape
    if len(shape) != 2 or shape[1] != N_FEATURES:
        raise ValueError(f"expected features of shape (K, {N_FEATURES}), got {shape}")
    if shape[0] < 1:
        raise ValueError("need at least one carrier")
    stack = ModelStack.from_models([model])
    scores = stack.scores(ad.reshape(features, (1,) + shape))
    shares = masked_softmax(scores, np.ones((1, shape[0])))
    return ad.reshape(shares, (shape[0],))


# ---------------------------------------------------------------- training


@dataclass
class RouteData:
    """Monthly observations of one route.

    ``x`` is ``(T, K, 19)``, ``mask`` marks carriers present in a month and
    ``y`` holds observed shares (zero where masked).
    """

    route: str
    months: list[str]
    carriers: list[str]
    x: np.ndarray
    mask: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t, k, f = self.x.shape
        if t == 0:
            raise ValueError(f"route {self.route}: empty panel")
        if f != N_FEATURES or self.mask.shape != (t, k) or self.y.shape != (t, k):
            raise ValueError(f"route {self.route}: inconsistent array shapes")

    def select(self, months: Sequence[int]) -> "RouteData":
        idx = list(months)
        return RouteData(self.route, [self.months[i] for i in idx], self.carriers, self.x[idx], self.mask[idx], self.y[idx])


def _route_rng(seed: int, route: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(route.encode())])


def _xavier(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_model(route: str, arch: Arch, scaler: Scaler, subset: list[int], seed: int) -> ShareModel:
    """Fresh model with Glorot-uniform weights and zero biases."""
    rng = _route_rng(seed, route)
    m = len(subset)
    if arch.kind == "multilogit":
        return MultiLogitModel(route, subset, scaler, _xavier(rng, m, 1, (m,)))
    d = arch.width
    return ResidualMlpModel(
        route,
        subset,
        scaler,
        _xavier(rng, m, d),
        np.zeros(d),
        [_xavier(rng, d, d) for _ in range(arch.layers - 1)],
        [np.zeros(d) for _ in range(arch.layers - 1)],
        _xavier(rng, d, 1, (d,)),
    )


def _check_route(data: RouteData):
    if np.any(data.mask.sum(axis=1) < 2):
        raise ValueError(f"route {data.route}: every month needs at least 2 carriers")
    sums = (data.y * data.mask).sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"route {data.route}: observed shares do not sum to 1")


def _pad(datasets: Sequence[RouteData]):
    """Stack route panels into ``(T, G, K, 19)`` with zero padding."""
    t = max(d.x.shape[0] for d in datasets)
    k = max(d.x.shape[1] for d in datasets)
    g = len(datasets)
    x = np.zeros((t, g, k, N_FEATURES))
    mask = np.zeros((t, g, k))
    y = np.zeros((t, g, k))
    for i, d in enumerate(datasets):
        tt, kk = d.mask.shape
        x[:tt, i, :kk] = d.x
        mask[:tt, i, :kk] = d.mask
        y[:tt, i, :kk] = d.y
    return x, mask, y


def fit_routes(datasets: Sequence[RouteData], arch: Arch, config: TrainConfig):
    """Train one model per route, all routes batched in a single loop.

    The loss is the mean squared share error of each route, summed over
    routes; since parameters are per route and Adam is elementwise, every
    route follows the same trajectory it would follow if trained alone.

    Returns ``(models, losses)`` where ``losses`` has shape ``(epochs, G)``.
    """
    if not datasets:
        raise ValueError("empty panel: no routes to train")
    subsets, scalers, inits = [], [], []
    for d in datasets:
        _check_route(d)
        rows = d.x[d.mask > 0]
        scaler, kept = Scaler.fit(rows, arch.features, d.route)
        subsets.append(kept)
        scalers.append(scaler)
        inits.append(init_model(d.route, arch, scaler, kept, config.seed))
    stack = ModelStack.from_models(inits)
    x, mask, y = _pad(datasets)
    counts = mask.sum(axis=(0, 2))

    params = {k: v.copy() for k, v in stack.params.items()}
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses = np.zeros((config.epochs, len(datasets)))
    names = list(params)

    for epoch in range(config.epochs):
        tape = ad.Tape()
        pv = {k: tape.var(v) for k, v in params.items()}
        shares = masked_softmax(stack.scores(x, pv), mask)
        err = ad.mul(ad.sub(shares, y), mask)
        per_route = ad.div(ad.sum(ad.sum(ad.mul(err, err), axis=-1), axis=0), counts)
        loss = ad.sum(per_route)
        total = float(loss.value)
        if not np.isfinite(total):
            raise TrainingError(f"loss became NaN at epoch {epoch}")
        losses[epoch] = per_route.value
        grads = tape.gradient(loss, *(pv[k] for k in names))

        lr = config.learning_rate * config.decay_ratio ** (epoch // config.decay_every)
        step = epoch + 1
        for k, g in zip(names, grads):
            m1[k] = b1 * m1[k] + (1 - b1) * g
            m2[k] = b2 * m2[k] + (1 - b2) * g * g
            mhat = m1[k] / (1 - b1**step)
            vhat = m2[k] / (1 - b2**step)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)

    models = stack.unstack(params, subsets, scalers)
    return {m.route: m for m in models}, losses


def train(data: RouteData, config: TrainConfig, arch: Arch | str = "mlp") -> ShareModel:
    """Fit a single route's model."""
    if isinstance(arch, str):
        arch = Arch.parse("multilogit") if arch == "multilogit" else Arch()
    models, _ = fit_routes([data], arch, config)
    return models[data.route]


def predict_route(model: ShareModel, data: RouteData) -> np.ndarray:
    """Predicted shares ``(T, K)`` for every month of ``data``."""
    stack = ModelStack.from_models([model])
    scores = stack.scores(data.x[:, None])
    return masked_softmax(scores, data.mask[:, None])[:, 0]


def rmse(pred: np.ndarray, y: np.ndarray, mask: np.ndarray) -> float:
    diff = (pred - y)[mask > 0]
    return float(np.sqrt(np.mean(diff**2))) if diff.size else float("nan")


def r2(pred: np.ndarray, y: np.ndarray, mask: np.ndarray) -> float:
    yy = y[mask > 0]
    ss_res = float(np.sum((pred[mask > 0] - yy) ** 2))
    ss_tot = float(np.sum((yy - yy.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")


def uniform_rmse(data: RouteData) -> float:
    """RMSE of predicting 1/K for every carrier present."""
    k = data.mask.sum(axis=1, keepdims=True)
    return rmse(np.broadcast_to(1.0 / k, data.y.shape), data.y, data.mask)


def fit_by_arch(datasets: Sequence[RouteData], archs: dict[str, Arch], config: TrainConfig) -> dict[str, ShareModel]:
    """Train each route with its own architecture, grouping equal ones."""
    groups: dict[Arch, list[RouteData]] = {}
    for d in datasets:
        groups.setdefault(archs[d.route], []).append(d)
    out: dict[str, ShareModel] = {}
    for arch, group in groups.items():
        models, _ = fit_routes(group, arch, config)
        out.update(models)
    return out


@dataclass
class CVResult:
    models: dict[str, ShareModel]
    selected: dict[str, Arch]
    # validation RMSE averaged over folds, per architecture label and route
    val_rmse: dict[str, dict[str, float]]
    val_r2: dict[str, float]
    folds: int
    fold_rmse: dict[str, list[float]] = field(default_factory=dict)

    @property
    def median_rmse(self) -> float:
        return float(np.median([self.val_rmse[self.selected[r].label()][r] for r in self.selected]))

    @property
    def median_r2(self) -> float:
        vals = [v for v in self.val_r2.values() if np.isfinite(v)]
        return float(np.median(vals)) if vals else float("nan")


def cross_validate(
    datasets: Sequence[RouteData],
    grid: Sequence = DEFAULT_GRID,
    config: TrainConfig = TrainConfig(),
    features="all",
    threads: int = 1,
) -> CVResult:
    """Leave-one-month-out selection of an architecture per route.

    Every month label becomes a validation fold.  Each route keeps the
    architecture with the lowest mean validation RMSE and is then refit
    on all of its months.
    """
    months = sorted({m for d in datasets for m in d.months})
    if len(months) < 2:
        raise ValueError("cross-validation needs at least 2 months")
    archs = [Arch.parse(a, features) for a in grid]

    def run_fold(month):
        train_sets, val_sets = [], []
        for d in datasets:
            hold = [i for i, m in enumerate(d.months) if m == month]
            keep = [i for i, m in enumerate(d.months) if m != month]
            if hold and keep:
                train_sets.append(d.select(keep))
                val_sets.append(d.select(hold))
        result = {}
        for arch in archs:
            models, _ = fit_routes(train_sets, arch, config)
            result[arch.label()] = {
                v.route: (predict_route(models[v.route], v), v) for v in val_sets
            }
        return result

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        folds = list(pool.map(run_fold, months))

    val_rmse: dict[str, dict[str, float]] = {}
    fold_rmse: dict[str, list[float]] = {}
    for arch in archs:
        lab = arch.label()
        per_route: dict[str, list[float]] = {}
        for fold in folds:
            for route, (pred, v) in fold[lab].items():
                per_route.setdefault(route, []).append(rmse(pred, v.y, v.mask))
        val_rmse[lab] = {r: float(np.mean(v)) for r, v in per_route.items()}
        fold_rmse[lab] = [
            float(np.mean([rmse(p, v.y, v.mask) for p, v in fold[lab].values()])) for fold in folds
        ]

    selected: dict[str, Arch] = {}
    val_r2: dict[str, float] = {}
    for d in datasets:
        scored = [(val_rmse[a.label()].get(d.route, np.inf), i) for i, a in enumerate(archs)]
        best = archs[min(scored)[1]]
        selected[d.route] = best
        preds, ys, masks = [], [], []
        for fold in folds:
            if d.route in fold[best.label()]:
                p, v = fold[best.label()][d.route]
                preds.append(p)
                ys.append(v.y)
                masks.append(v.mask)
        val_r2[d.route] = r2(np.concatenate(preds), np.concatenate(ys), np.concatenate(masks)) if preds else float("nan")

    models = fit_by_arch(datasets, selected, config)
    log.info("cross-validation over %d folds, median RMSE %.5f", len(months), np.median(
        [val_rmse[selected[r].label()][r] for r in selected]))
    return CVResult(models, selected, val_rmse, val_r2, len(months), fold_rmse)


# ----------------------------------------------------------- serialisation


def _array_to_json(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def _array_from_json(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def model_to_dict(model: ShareModel) -> dict:
    arch = {"kind": model.kind}
    if model.kind == "mlp":
        arch.update(layers=model.layers, width=model.width)
    return {
        "format_version": FORMAT_VERSION,
        "route": model.route,
        "arch": arch,
        "feature_subset": list(model.feature_subset),
        "scaler": {"mean": _array_to_json(model.scaler.mean), "std": _array_to_json(model.scaler.std)},
        "parameters": {k: _array_to_json(v) for k, v in model.params().items()},
    }


def model_from_dict(d: dict) -> ShareModel:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {d.get('format_version')!r}")
    scaler = Scaler(_array_from_json(d["scaler"]["mean"]), _array_from_json(d["scaler"]["std"]))
    p = {k: _array_from_json(v) for k, v in d["parameters"].items()}
    subset = [int(i) for i in d["feature_subset"]]
    kind = d["arch"]["kind"]
    if kind == "multilogit":
        return MultiLogitModel(d["route"], subset, scaler, p["w"])
    if kind != "mlp":
        raise ValueError(f"unknown model kind {kind!r}")
    layers = int(d["arch"]["layers"])
    return ResidualMlpModel(
        d["route"],
        subset,
        scaler,
        p["W0"],
        p["b0"],
        [p[f"W{i}"] for i in range(1, layers)],
        [p[f"b{i}"] for i in range(1, layers)],
        p["w"],
    )


def save_model(model: ShareModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1), encoding="utf-8")


def load_model(path) -> ShareModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
