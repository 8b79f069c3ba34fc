import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from airshare import autodiff as ad
from airshare import data
from airshare import sharemodel as sm
from conftest import central_difference


def identity_scaler(k=19):
    return sm.Scaler(np.zeros(k), np.ones(k))


def logit_model(w, subset=None):
    subset = list(range(19)) if subset is None else subset
    return sm.MultiLogitModel("R", subset, identity_scaler(len(subset)), np.asarray(w, dtype=float))


def random_mlp(seed, layers=3, width=16):
    rng = np.random.default_rng(seed)
    scaler = sm.Scaler(rng.normal(size=19), rng.uniform(0.5, 2, size=19))
    return sm.init_model("R", sm.Arch("mlp", layers, width), scaler, list(range(19)), seed)


def test_hand_computed_logit_shares():
    w = np.zeros(19)
    w[0] = 1.0
    feats = np.zeros((2, 19))
    feats[1, 0] = np.log(3.0)
    shares = sm.predict_shares(logit_model(w), feats)
    np.testing.assert_allclose(shares, [0.25, 0.75])


def test_single_carrier_gets_everything():
    np.testing.assert_allclose(sm.predict_shares(random_mlp(0), np.ones((1, 19))), [1.0])


def test_ragged_feature_list_is_rejected():
    with pytest.raises(ValueError, match="dimension"):
        sm.predict_shares(logit_model(np.zeros(19)), [np.zeros(19), np.zeros(18)])


def test_masked_softmax_ignores_padding_and_survives_empty_rows():
    scores = np.array([[1.0, 2.0, 1e6], [0.0, 0.0, 0.0]])
    mask = np.array([[1, 1, 0], [0, 0, 0]])
    out = sm.masked_softmax(scores, mask)
    e = np.exp([1.0, 2.0])
    np.testing.assert_allclose(out[0], [e[0] / e.sum(), e[1] / e.sum(), 0.0])
    np.testing.assert_array_equal(out[1], 0.0)


def test_model_feature_sets():
    assert sm.FEATURE_SETS["model1"] == tuple(range(1, 9))
    assert sm.FEATURE_SETS["model2"] == tuple(range(11))
    assert len(sm.FEATURE_SETS["all"]) == 19


def test_mlp_forward_matches_hand_loop():
    m = random_mlp(3, layers=4, width=8)
    x = np.random.default_rng(0).normal(size=(3, 19))
    z = (x - m.scaler.mean) / m.scaler.std
    h = np.maximum(z @ m.w0 + m.b0, 0)
    for w, b in zip(m.hidden_w, m.hidden_b):
        h = h + np.maximum(h @ w + b, 0)
    s = h @ m.w_out
    want = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    np.testing.assert_allclose(sm.predict_shares(m, x), want, rtol=1e-12)


def test_share_gradient_matches_finite_differences():
    m = random_mlp(5)
    x0 = np.random.default_rng(1).normal(size=(3, 19))
    tape = ad.Tape()
    xv = tape.var(x0)
    (g,) = tape.gradient(ad.gather(sm.predict_shares(m, xv), 0), xv)
    num = central_difference(lambda x: sm.predict_shares(m, x)[0], x0)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


def test_stack_matches_individual_models():
    models = [random_mlp(s) for s in range(3)]
    for i, m in enumerate(models):
        m.route = f"R{i}"
    stack = sm.ModelStack.from_models(models)
    feats = np.random.default_rng(2).normal(size=(3, 4, 19))
    scores = stack.scores(feats)
    for i, m in enumerate(models):
        single = sm.ModelStack.from_models([m]).scores(feats[i][None])[0]
        np.testing.assert_allclose(scores[i], single, rtol=1e-12)


def test_stacking_mixed_architectures_fails():
    with pytest.raises(ValueError):
        sm.ModelStack.from_models([random_mlp(0), logit_model(np.zeros(19))])


@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.1, 50))
def test_shares_form_a_simplex(seed, k, scale):
    rng = np.random.default_rng(seed)
    feats = rng.normal(scale=scale, size=(k, 19))
    for model in (random_mlp(seed % 97), logit_model(rng.normal(size=19) * scale)):
        s = sm.predict_shares(model, feats)
        assert np.all(s >= 0)
        assert abs(s.sum() - 1) <= 1e-9


def test_scaler_drops_constant_columns():
    x = np.column_stack([np.arange(5.0), np.full(5, 7.0), np.arange(5.0) ** 2])
    with pytest.warns(UserWarning, match="constant"):
        scaler, kept = sm.Scaler.fit(x, [0, 1, 2], "R")
    assert kept == [0, 2]
    assert scaler.mean.shape == (2,)


def test_train_config_validation():
    with pytest.raises(ValueError):
        sm.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        sm.TrainConfig(decay_ratio=1.5)


def test_arch_parse_and_label():
    assert sm.Arch.parse(("mlp", 4, 32)).label() == "mlp-l4-d32"
    assert sm.Arch.parse("multilogit").label() == "multilogit"
    with pytest.raises(ValueError):
        sm.Arch("cnn")


@pytest.fixture(scope="module")
def noiseless_panel():
    market = data.generate_market(data.SynthConfig(n_routes=8, n_months=8, seed=3))
    return market


def test_multilogit_recovers_noiseless_shares():
    # two carriers give one share equation per month, so the panel needs
    # many more months than there are weights for held-out months to be
    # pinned down
    market = data.generate_market(data.SynthConfig(n_routes=8, n_months=60, seed=3))
    datasets = market.panel.route_datasets()
    train = [d.select(range(58)) for d in datasets]
    held = [d.select([58, 59]) for d in datasets]
    cfg = sm.TrainConfig(learning_rate=0.05, epochs=3000, decay_ratio=0.7, decay_every=300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        models, _ = sm.fit_routes(train, sm.Arch("multilogit"), cfg)
    errs = [sm.rmse(sm.predict_route(models[v.route], v), v.y, v.mask) for v in held]
    assert max(errs) <= 1e-3


def test_training_loss_does_not_rise_over_windows(noiseless_panel):
    datasets = noiseless_panel.panel.route_datasets()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, losses = sm.fit_routes(datasets, sm.Arch("mlp", 3, 16), sm.TrainConfig(learning_rate=1e-3, epochs=400))
    total = losses.sum(axis=1)
    for start in range(0, 300, 100):
        assert total[start + 100 - 1] <= total[start] * 1.01


def test_batched_training_equals_single_route_training(noiseless_panel):
    datasets = noiseless_panel.panel.route_datasets()[:3]
    cfg = sm.TrainConfig(learning_rate=1e-2, epochs=50)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        batched, _ = sm.fit_routes(datasets, sm.Arch("mlp", 3, 8), cfg)
        single = sm.fit_routes(datasets[1:2], sm.Arch("mlp", 3, 8), cfg)[0]
    r = datasets[1].route
    for k, v in single[r].params().items():
        np.testing.assert_allclose(batched[r].params()[k], v, rtol=1e-9, atol=1e-12)


def test_nan_loss_raises_training_error(noiseless_panel):
    d = noiseless_panel.panel.route_datasets()[0]
    bad = sm.RouteData(d.route, d.months, d.carriers, d.x.copy(), d.mask, d.y)
    bad.x[0, 0, 0] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(sm.TrainingError, match="epoch 0"):
            sm.fit_routes([bad], sm.Arch("multilogit"), sm.TrainConfig(epochs=3))


def test_cross_validation_picks_lowest_validation_error(noiseless_panel):
    datasets = noiseless_panel.panel.route_datasets()[:4]
    datasets = [d.select(range(4)) for d in datasets]
    grid = [("mlp", 3, 8), ("mlp", 2, 4)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = sm.cross_validate(datasets, grid, sm.TrainConfig(learning_rate=1e-2, epochs=30))
    for d in datasets:
        chosen = res.selected[d.route].label()
        assert all(res.val_rmse[chosen][d.route] <= res.val_rmse[a][d.route] for a in res.val_rmse)
    assert res.folds == 4


def test_model_round_trip(tmp_path):
    m = random_mlp(7, layers=5, width=4)
    m.feature_subset = list(range(19))
    sm.save_model(m, tmp_path / "m.json")
    back = sm.load_model(tmp_path / "m.json")
    x = np.random.default_rng(0).normal(size=(3, 19))
    np.testing.assert_array_equal(sm.predict_shares(back, x), sm.predict_shares(m, x))
    d = json.loads((tmp_path / "m.json").read_text())
    d["format_version"] = 99
    with pytest.raises(ValueError, match="version"):
        sm.model_from_dict(d)
