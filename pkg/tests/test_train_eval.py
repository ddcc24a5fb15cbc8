import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rimer.baselines import RidgeForecaster, persistence_forecast
from rimer.data import SeriesDataset, WindowSpec, make_windows, split_normalize
from rimer.errors import ConfigError, ContractError, DivergenceError
from rimer.model import RimerConfig, build_model
from rimer.numerics import Tensor
from rimer.synthetic import two_sinusoids
from rimer.train_eval import (
    Adam,
    TrainOpts,
    clip_grad_norm,
    evaluate,
    forecast_split,
    forecast_windows,
    train,
)

from conftest import tiny_config
from oracles import naive_metrics


def test_worked_metric_example():
    m = evaluate([1, 2, 4], [1, 2, 3])
    assert abs(m.rmse - 0.57735) < 1e-5
    assert abs(m.mae - 0.33333) < 1e-5
    assert abs(m.mape_percent - 11.1111) < 1e-3
    assert abs(m.r_squared - 0.5) < 1e-9
    assert m.n_points == 3


@settings(max_examples=30, deadline=None)
@given(y=arrays(np.float64, st.integers(2, 30), elements=st.floats(-100, 100)))
def test_perfect_prediction(y):
    m = evaluate(y, y)
    assert m.rmse == 0 and m.mae == 0 and m.mape_percent == 0
    assert m.r_squared in (1.0, None)


def test_constant_truth():
    m = evaluate([3.5, 3.5, 3.5], [2.0, 2.0, 2.0])
    assert m.r_squared is None
    assert m.rmse == 1.5 and m.mae == 1.5


def test_mape_floor_on_zero_targets():
    m = evaluate([1e-9], [0.0])
    assert m.mape_percent == pytest.approx(100 * 1e-9 / 1e-8)


def test_evaluate_contract():
    with pytest.raises(ContractError):
        evaluate([], [])
    with pytest.raises(ContractError):
        evaluate([1, 2], [1])


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_metrics_match_naive_oracle(data):
    n = data.draw(st.integers(1, 40))
    y = data.draw(arrays(np.float64, n, elements=st.floats(-1e3, 1e3)))
    yhat = data.draw(arrays(np.float64, n, elements=st.floats(-1e3, 1e3)))
    m = evaluate(yhat, y)
    ref = naive_metrics(yhat, y)
    assert m.rmse >= m.mae - 1e-12 * max(1.0, m.mae)
    for key in ("rmse", "mae", "mape_percent"):
        assert abs(getattr(m, key) - ref[key]) <= 1e-12 * max(1.0, abs(ref[key]))
    if np.ptp(y) == 0:
        assert m.r_squared is None
    else:
        # keep away from truths so flat that SS_tot is rounding noise
        assume(np.ptp(y) > 1e-6 * max(1.0, np.max(np.abs(y))))
        assert abs(m.r_squared - ref["r_squared"]) <= 1e-12 * max(1.0, abs(ref["r_squared"]))


# -- optimizer pieces ---------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), max_norm=st.floats(1e-3, 10))
def test_clip_bound(seed, max_norm):
    r = np.random.default_rng(seed)
    params = [Tensor(np.zeros(s)) for s in ((3,), (2, 2))]
    for p in params:
        p.grad = r.standard_normal(p.shape) * r.uniform(0.01, 100)
    before = clip_grad_norm(params, max_norm)
    after = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params))
    if before > max_norm:
        assert after <= max_norm + 1e-9
    else:
        assert after == pytest.approx(before)


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0]))
    p.grad = np.array([0.3, -5.0])
    Adam([p], lr=0.1).step()
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_train_opts_reject_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="'lr'"):
        TrainOpts.from_dict({"lr": 0.1})
    with pytest.raises(ConfigError):
        TrainOpts(beta1=1.0)
    with pytest.raises(ConfigError):
        TrainOpts(epochs=0)


# -- training -------------------------------------------------------------------------


def toy_ds(n=400):
    return split_normalize(two_sinusoids(n, periods=(8.0, 13.0), seed=3))


def test_zero_learning_rate_leaves_parameters(rng):
    model = build_model(tiny_config(), 0)
    before = model.state_dict()
    train(model, toy_ds(), TrainOpts(epochs=3, learning_rate=0.0, batch_size=8), WindowSpec(8, 4, 4))
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_one_epoch_on_ten_windows():
    ds = split_normalize(SeriesDataset("t", ["y"], np.sin(np.arange(60.0))[:, None]), (0.5, 0.25))
    spec = WindowSpec(8, 4, 2)
    assert len(make_windows(ds, "train", 8, 4, 2)) == 10
    _, hist = train(build_model(tiny_config(), 0), ds, TrainOpts(epochs=1, batch_size=4), spec)
    assert len(hist) == 1 and math.isfinite(hist[0]["val_loss"])


def test_reproducible_trajectory():
    runs = []
    for _ in range(2):
        _, hist = train(build_model(tiny_config(), 5), toy_ds(), TrainOpts(epochs=2, batch_size=8, seed=9), WindowSpec(8, 4, 2))
        runs.append(hist)
    assert runs[0] == runs[1]


def test_empty_windows_is_config_error():
    with pytest.raises(ConfigError):
        train(build_model(tiny_config(), 0), toy_ds(100), TrainOpts(epochs=1), WindowSpec(80, 4))


def test_divergence_names_batch():
    model = build_model(tiny_config(), 0)
    model.head_bias.data[:] = np.inf
    with pytest.raises(DivergenceError, match="batch 0"):
        train(model, toy_ds(), TrainOpts(epochs=1, batch_size=8), WindowSpec(8, 4, 4))


def test_best_checkpoint_restored():
    model = build_model(tiny_config(), 0)
    ckpt, hist = train(model, toy_ds(), TrainOpts(epochs=4, batch_size=8, learning_rate=3e-3), WindowSpec(8, 4, 2))
    best = min(hist, key=lambda h: h["val_loss"])
    assert ckpt.epoch == best["epoch"]
    restored = ckpt.to_model()
    for (n, a), (_, b) in zip(model.named_parameters(), restored.named_parameters()):
        assert np.array_equal(a.data.astype(np.float32), b.data), n


def test_sinusoid_beats_persistence_on_val():
    ds = toy_ds(800)
    cfg = RimerConfig(d_model=16, n_heads=2, head_dim=8, n_layers=1, patch_len=8)
    model = build_model(cfg, 0)
    spec = WindowSpec(32, 8, 2)
    train(model, ds, TrainOpts(epochs=6, batch_size=16, learning_rate=3e-3), spec)
    w = make_windows(ds, "val", 32, 8, 2)
    mse = np.mean((forecast_windows(model, w.inputs, 8) - w.targets) ** 2)
    persist = np.mean((persistence_forecast(w.inputs, 8) - w.targets) ** 2)
    assert mse < persist


def test_forecast_split_denormalizes():
    ds = split_normalize(SeriesDataset("t", ["y"], 10 + 3 * np.sin(np.arange(200.0) / 3)[:, None]))
    model = build_model(tiny_config(), 0)
    pred, truth, w = forecast_split(model, ds, "test", WindowSpec(8, 4, 4))
    assert np.allclose(truth, ds.raw[w.origins[:, None] + 8 + np.arange(4), 0])
    assert pred.shape == truth.shape


# -- baselines -------------------------------------------------------------------------


def test_ridge_recovers_linear_map(rng):
    X = rng.standard_normal((500, 6))
    B = rng.standard_normal((6, 2))
    Y = X @ B + 0.5
    model = RidgeForecaster(alpha=1e-9).fit(X, Y)
    assert np.allclose(model.coef, B, atol=1e-6)
    assert np.allclose(model.predict(X), Y, atol=1e-6)


def test_persistence_repeats_last_value():
    out = persistence_forecast(np.array([[1.0, 2.0, 3.0]]), 2)
    assert out.tolist() == [[3.0, 3.0]]
