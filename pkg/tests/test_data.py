import numpy as np
import pandas as pd
import pytest

from airshare import data
from airshare import netfeat as nf
from airshare import sharemodel as sm

CFG = data.SynthConfig(n_routes=6, n_months=4, seed=11)


@pytest.fixture(scope="module")
def market():
    return data.generate_market(CFG)


@pytest.fixture()
def saved(market, tmp_path):
    data.save_generated(market, tmp_path)
    return tmp_path


def test_round_trip_is_exact(market, saved):
    back = data.load_panel(saved)
    pd.testing.assert_frame_equal(back.observations, market.panel.observations, check_exact=True)
    assert back.routes == market.panel.routes
    assert back.f_max == market.panel.f_max
    models = data.load_ground_truth(saved / "ground_truth.json")
    assert sorted(models) == sorted(market.models)


def test_noiseless_shares_are_the_hidden_model(market):
    panel = market.panel
    feats = panel.feature_matrix()
    obs = panel.observations
    for (route, month), rows in obs.groupby(["route_id", "month"]):
        want = sm.predict_shares(market.models[route], feats[rows.index])
        np.testing.assert_allclose(rows["share"].to_numpy(), want, atol=1e-12)


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        data.save_generated(data.generate_market(CFG), tmp_path / name)
    for f in ("airports.csv", "routes.csv", "observations.csv", "ground_truth.json", "meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_noise_keeps_shares_on_the_simplex():
    m = data.generate_market(data.SynthConfig(n_routes=6, n_months=4, seed=1, noise_std=0.05))
    s = m.panel.observations.groupby(["route_id", "month"])["share"].sum()
    np.testing.assert_allclose(s, 1.0, atol=1e-9)
    assert (m.panel.observations["share"] > 0).all()


def test_mlp_generator():
    m = data.generate_market(data.SynthConfig(n_routes=4, n_months=3, hidden_model="mlp", seed=4))
    assert all(mod.kind == "mlp" for mod in m.models.values())


def test_bad_shares_raise_simplex_error(saved):
    obs = pd.read_csv(saved / "observations.csv")
    obs.loc[0, "share"] += 0.1
    obs.to_csv(saved / "observations.csv", index=False)
    with pytest.raises(data.SimplexError):
        data.load_panel(saved)


@pytest.mark.parametrize(
    "edit, message",
    [
        (lambda o: o.drop(columns=["price"]), "columns"),
        (lambda o: o.assign(freq=o["freq"].astype(object).where(o.index != 3, "lots")), "row 5"),
        (lambda o: o.assign(demand=-o["demand"]), "negative demand"),
    ],
)
def test_schema_errors_point_at_the_problem(saved, edit, message):
    obs = pd.read_csv(saved / "observations.csv")
    edit(obs).to_csv(saved / "observations.csv", index=False)
    with pytest.raises(data.SchemaError, match=message):
        data.load_panel(saved)


def test_unknown_airport(saved):
    routes = pd.read_csv(saved / "routes.csv")
    routes.loc[0, "src_airport"] = "NOPE"
    routes.to_csv(saved / "routes.csv", index=False)
    with pytest.raises(data.SchemaError, match="NOPE"):
        data.load_panel(saved)


def test_empty_market(saved):
    (saved / "routes.csv").write_text("route_id,src_airport,dst_airport,f_max\n")
    with pytest.raises(data.EmptyMarketError):
        data.load_panel(saved)


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_panel(tmp_path / "nothing")


def test_config_validation():
    with pytest.raises(ValueError, match="do not fit"):
        data.SynthConfig(n_airports=3, n_routes=7)
    with pytest.raises(ValueError, match="unknown"):
        data.SynthConfig.from_dict({"n_route": 3})


def test_build_problem_defaults(market):
    p = data.build_problem(market.panel, market.models, "C1", top=3)
    assert p.n_routes <= 3
    assert p.budget == pytest.approx(float(np.dot(p.cost, p.observed)))
    assert p.is_feasible(p.observed)
    with pytest.raises(ValueError, match="no routes"):
        data.build_problem(market.panel, market.models, "C9")
