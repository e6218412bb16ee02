"""Loss terms, the adaptive combination, and the training loop."""

import math

import numpy as np
import pytest

import riskport.autodiff as ad
from riskport.autodiff import Tensor, no_grad
from riskport.errors import ConfigError
from riskport.model import ModelConfig, ModelParams
from riskport.objectives import (
    LossWeights,
    TrainConfig,
    combined_loss,
    evaluate_objective,
    loss_maxcum,
    loss_maxsharpe,
    loss_mindown,
    loss_prediction,
    loss_ranking,
    maxcum_log,
    objective_loss,
    portfolio_return,
    portfolio_returns,
    train,
)
from riskport.market_data import SplitSpec
from riskport.pipeline import build_dataset
from riskport.synthetic import drift_panel


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def test_portfolio_returns_hand_loop():
    w = np.array([[0.6, 0.4],
                  [0.2, 0.8],
                  [0.5, 0.5]])
    r = np.array([[0.01, -0.02],
                  [0.03, 0.00],
                  [-0.01, 0.02]])
    cost = 0.002
    with no_grad():
        got = portfolio_returns(T(w), r, cost).data
    want = []
    prev = w[0]
    for t in range(3):
        gross = float(w[t] @ r[t])
        want.append(gross - cost * np.abs(w[t] - prev).sum())
        prev = w[t]
    assert np.allclose(got, want, atol=1e-16)
    # first period is charged nothing
    assert abs(got[0] - float(w[0] @ r[0])) < 1e-17


def test_portfolio_returns_zero_cost_skips_turnover():
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    r = np.array([[0.05, 0.0], [0.0, -0.03]])
    with no_grad():
        got = portfolio_returns(T(w), r, 0.0).data
    assert np.allclose(got, [0.05, -0.03])
    with pytest.raises(ValueError, match="weights"):
        portfolio_returns(T(w), r[:1], 0.0)


def test_single_period_return():
    with no_grad():
        gross = portfolio_return(T([0.5, 0.5]), np.array([0.02, 0.04]),
                                 np.array([0.5, 0.5]), 0.0)
        net = portfolio_return(T([1.0, 0.0]), np.array([0.02, 0.04]),
                               np.array([0.0, 1.0]), 0.01)
    assert abs(float(gross.data) - 0.03) < 1e-16
    assert abs(float(net.data) - (0.02 - 0.01 * 2.0)) < 1e-16


def test_maxcum_values():
    rp = T([0.01, 0.03])
    with no_grad():
        assert abs(float(loss_maxcum(rp).data) - 1.01 * 1.03) < 1e-14
        assert abs(float(maxcum_log(rp).data) - math.log(1.01 * 1.03)) < 1e-14


def test_maxsharpe_value():
    rp = T([0.01, 0.03])
    mean = 0.02
    sd = math.sqrt(2 * 0.01 ** 2 + 1e-12)  # sample std of the pair, eps under root
    with no_grad():
        got = float(loss_maxsharpe(rp).data)
    assert abs(got - mean / sd) < 1e-12


def test_mindown_value():
    rp = T([0.01, -0.02])
    with no_grad():
        got = float(loss_mindown(rp, 0.005).data)
    # only the second period falls short: -(0.02 + 0.005)
    assert abs(got - (-0.025)) < 1e-16


def test_prediction_loss_rows():
    pred = T([[3.0, 4.0], [0.0, 0.0]])
    real = np.zeros((2, 2))
    with no_grad():
        assert float(loss_prediction(pred, real).data) == 5.0
        assert float(loss_prediction(T(real), real).data) == 0.0


def test_ranking_loss_pairs():
    pred = T([[1.0, 2.0]])
    real = np.array([[0.02, 0.01]])  # order disagrees
    with no_grad():
        got = float(loss_ranking(pred, real).data)
    assert abs(got - 0.02) < 1e-16  # both ordered pairs contribute 0.01

    agree = np.array([[0.01, 0.02]])
    with no_grad():
        assert float(loss_ranking(pred, agree).data) == 0.0
    # perfect forecasts never pay
    with no_grad():
        assert float(loss_ranking(T(agree), agree).data) == 0.0


def test_objective_dispatch():
    rp = T([0.01, 0.03])
    with no_grad():
        assert float(objective_loss("maxcum", rp, 0.0).data) == float(maxcum_log(rp).data)
        assert float(objective_loss("maxsharpe", rp, 0.0).data) == float(loss_maxsharpe(rp).data)
        assert float(objective_loss("mindown", rp, 0.01).data) == float(loss_mindown(rp, 0.01).data)
    with pytest.raises(ConfigError):
        objective_loss("sortino", rp, 0.0)


def test_combined_loss_value_and_weight_gradients():
    lw = LossWeights()
    obj, pred, rank = T(0.4), T(2.0), T(1.5)
    total = combined_loss(obj, pred, rank, lw)
    # at s = 0 the combination is -obj + pred + rank
    assert abs(float(total.data) - (-0.4 + 2.0 + 1.5)) < 1e-15
    grads = ad.backward(total, lw.tensors())
    assert abs(float(grads[lw.s_m]) - (0.4 + 0.5)) < 1e-12
    assert abs(float(grads[lw.s_p]) - (-2.0 + 0.5)) < 1e-12
    assert abs(float(grads[lw.s_r]) - (-1.5 + 0.5)) < 1e-12


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(objective="sortino")
    with pytest.raises(ConfigError):
        TrainConfig(delta_d="benchmark:")
    with pytest.raises(ConfigError):
        TrainConfig(delta_d=float("nan"))
    with pytest.raises(ConfigError):
        TrainConfig(cost_rate=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_len=1)
    assert TrainConfig(delta_d="benchmark:SYN00").delta_d == "benchmark:SYN00"


@pytest.fixture(scope="module")
def tiny_ds():
    panel = drift_panel(n_assets=2, n_days=140, seed=77)
    ds = build_dataset(panel, 20, 1e-8, "correlation",
                       norm_start=panel.calendar[0], norm_end=panel.calendar[99])
    return ds


def test_evaluate_objective_natural_units(tiny_ds):
    ds = tiny_ds
    params = ModelParams(hidden=4, seed=0)
    params.load_state({k: np.zeros_like(v) for k, v in params.state().items()})
    idx = ds.decision_indices()[:30]
    cfg = TrainConfig(objective="maxcum", epochs=1)
    got = evaluate_objective(params, ds, idx, cfg)
    # uniform weights; natural maxcum is the wealth product, not its log
    rp = ds.targets(idx).mean(axis=1)
    assert abs(got - float(np.prod(1.0 + rp))) < 1e-12

    cfg = TrainConfig(objective="mindown", delta_d="benchmark:SYN01", epochs=1)
    got = evaluate_objective(params, ds, idx, cfg)
    bench = ds.benchmark(idx, "SYN01")
    want = -float(np.maximum(-rp + bench, 0.0).sum())
    assert abs(got - want) < 1e-12


def test_train_smoke_and_determinism(tiny_ds):
    panel = tiny_ds.panel
    cal = panel.calendar
    spec = SplitSpec(train_start=cal[0], train_end=cal[109],
                     test_start=cal[125], test_end=cal[139],
                     validation_end=cal[124])
    mcfg = ModelConfig(hidden=4, window=20)
    tcfg = TrainConfig(objective="maxsharpe", epochs=2, lr=1e-3,
                       batch_len=16, seed=3)

    res1 = train(panel, spec, mcfg, tcfg)
    assert not res1.aborted
    assert len(res1.log_rows) == 2
    row = res1.log_rows[0]
    for key in ("epoch", "loss_total", "loss_obj", "loss_pred", "loss_rank",
                "s_m", "s_p", "s_r", "val_metric"):
        assert key in row
    assert 1 <= res1.best_epoch <= 2
    assert res1.loss_weights is not None

    res2 = train(panel, spec, mcfg, tcfg)
    for (_, a), (_, b) in zip(res1.params.named(), res2.params.named()):
        assert np.array_equal(a.data, b.data)


def test_train_single_objective_baseline(tiny_ds):
    panel = tiny_ds.panel
    cal = panel.calendar
    spec = SplitSpec(train_start=cal[0], train_end=cal[109],
                     test_start=cal[125], test_end=cal[139],
                     validation_end=cal[124])
    mcfg = ModelConfig(hidden=4, window=20)
    tcfg = TrainConfig(objective="maxcum", epochs=1, lr=1e-3,
                       batch_len=32, seed=1, auxiliary=False)
    res = train(panel, spec, mcfg, tcfg)
    assert res.loss_weights is None
    assert res.log_rows[0]["loss_pred"] == ""
    assert res.log_rows[0]["s_m"] == ""
