"""Risk targeting: simplex projection, interpolation, min-variance, improve."""

import numpy as np
import pytest

from riskport.covariance import portfolio_risk
from riskport.errors import NumericalError
from riskport.risk_control import (
    adjust_to_risk,
    improve,
    interpolate,
    interpolation_coeff,
    min_variance,
    project_simplex,
)

from helpers import random_psd, random_simplex, softmax_rows
import oracles


def test_project_simplex_two_asset_closed_form():
    rng = np.random.default_rng(1)
    for _ in range(100):
        v = rng.normal(0.0, 2.0, size=2)
        got = project_simplex(v)
        t = float(np.clip((v[0] - v[1] + 1.0) / 2.0, 0.0, 1.0))
        assert np.allclose(got, [t, 1.0 - t], atol=1e-12)


def test_project_simplex_properties():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = rng.integers(2, 8)
        v = rng.normal(0.0, 3.0, size=n)
        p = project_simplex(v)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= 0.0)
        # projection is idempotent
        assert np.allclose(project_simplex(p), p, atol=1e-12)
        # no grid point beats it
        best = np.inf
        for _ in range(200):
            q = random_simplex(rng, n)
            best = min(best, np.sum((q - v) ** 2))
        assert np.sum((p - v) ** 2) <= best + 1e-12
    with pytest.raises(ValueError):
        project_simplex(np.zeros((2, 2)))


def test_interpolate_segment():
    b = np.array([1.0, 0.0])
    b_m = np.array([0.2, 0.8])
    assert np.array_equal(interpolate(b, b_m, 0.0), b)
    assert np.array_equal(interpolate(b, b_m, 1.0), b_m)
    assert np.allclose(interpolate(b, b_m, 0.5), [0.6, 0.4], atol=1e-16)
    with pytest.raises(ValueError):
        interpolate(b, b_m, 1.5)
    with pytest.raises(ValueError):
        interpolate(b, b_m, -0.1)


def test_coeff_known_two_asset_instance():
    # diag(0.04, 0.01): min-variance is (0.2, 0.8); target 0.02 sits between
    # the endpoint risks 0.04 and 0.008, root 1 - sqrt(0.375)
    b = np.array([1.0, 0.0])
    b_m = np.array([0.2, 0.8])
    sigma = np.diag([0.04, 0.01])
    gamma, clamped = interpolation_coeff(b, b_m, sigma, 0.02)
    assert not clamped
    assert abs(gamma - (1.0 - np.sqrt(0.375))) < 1e-14
    ref = oracles.bisect_gamma(b.tolist(), b_m.tolist(), sigma.tolist(), 0.02)
    assert abs(gamma - ref) < 1e-10
    w = interpolate(b, b_m, gamma)
    assert abs(portfolio_risk(w, sigma) - 0.02) < 1e-14


def test_coeff_matches_bisection_oracle():
    rng = np.random.default_rng(5)
    for trial in range(60):
        n = int(rng.choice([2, 3, 5]))
        sigma = random_psd(rng, n, scale=0.01)
        b = random_simplex(rng, n)
        mv = min_variance(sigma)
        sigma_t = portfolio_risk(b, sigma)
        sigma_m = mv.risk
        if sigma_t - sigma_m < 1e-10:
            continue
        u = rng.uniform(0.05, 0.95)
        sigma_g = sigma_m + u * (sigma_t - sigma_m)
        gamma, clamped = interpolation_coeff(b, mv.weights, sigma, sigma_g)
        assert not clamped, trial
        ref = oracles.bisect_gamma(b.tolist(), mv.weights.tolist(),
                                   sigma.tolist(), sigma_g)
        assert abs(gamma - ref) < 1e-9, trial
        w = interpolate(b, mv.weights, gamma)
        assert abs(portfolio_risk(w, sigma) - sigma_g) <= 1e-10 * max(1.0, sigma_g)


def test_coeff_clamps_and_flags():
    b = np.array([1.0, 0.0])
    b_m = np.array([0.2, 0.8])
    sigma = np.diag([0.04, 0.01])
    gamma, clamped = interpolation_coeff(b, b_m, sigma, 0.05)
    assert gamma == 0.0 and clamped
    gamma, clamped = interpolation_coeff(b, b_m, sigma, 0.001)
    assert gamma == 1.0 and clamped
    # exact endpoints are reachable, not clamps
    gamma, clamped = interpolation_coeff(b, b_m, sigma, 0.04)
    assert gamma == 0.0 and not clamped
    gamma, clamped = interpolation_coeff(b, b_m, sigma, 0.008)
    assert gamma == 1.0 and not clamped


def test_coeff_degenerate_endpoints():
    b = np.array([0.2, 0.8])
    sigma = np.diag([0.04, 0.01])
    with pytest.raises(NumericalError, match="degenerate interpolation"):
        interpolation_coeff(b, b, sigma, 0.5)
    # same risk at both ends and at the target: gamma 0 works
    risk = portfolio_risk(b, sigma)
    gamma, clamped = interpolation_coeff(b, b, sigma, risk)
    assert gamma == 0.0 and not clamped


def test_adjust_to_risk_hits_target():
    rng = np.random.default_rng(7)
    for _ in range(30):
        sigma = random_psd(rng, 4, scale=0.02)
        b = random_simplex(rng, 4)
        mv = min_variance(sigma)
        lo, hi = mv.risk, portfolio_risk(b, sigma)
        if hi - lo < 1e-10:
            continue
        target = lo + 0.5 * (hi - lo)
        adj = adjust_to_risk(b, mv.weights, sigma, target)
        assert not adj.clamped
        assert abs(adj.achieved_risk - target) <= 1e-10 * max(1.0, target)
        assert abs(adj.weights.sum() - 1.0) < 1e-12
        assert np.all(adj.weights >= -1e-15)


def test_min_variance_diagonal_closed_form():
    rng = np.random.default_rng(9)
    for _ in range(10):
        d = rng.uniform(0.01, 0.2, size=4)
        sigma = np.diag(d)
        mv = min_variance(sigma)
        want = (1.0 / d) / (1.0 / d).sum()
        assert mv.converged
        assert np.allclose(mv.weights, want, atol=1e-8)


def test_min_variance_beats_grid_search():
    rng = np.random.default_rng(11)
    for _ in range(15):
        sigma = random_psd(rng, 3, scale=0.05)
        mv = min_variance(sigma)
        grid = oracles.grid_minvar_risk_3(sigma.tolist(), step=0.01)
        assert mv.risk <= grid + 1e-6


def test_min_variance_validation():
    with pytest.raises(ValueError, match="square"):
        min_variance(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="symmetric"):
        min_variance(np.array([[1.0, 0.5], [0.0, 1.0]]))


def improve_instance(seed, t_len=6, n=4):
    """Common-covariance instance whose target binds on every day."""
    rng = np.random.default_rng(seed)
    sigma = random_psd(rng, n, scale=0.01)
    mv = min_variance(sigma)
    logits = rng.normal(0.0, 1.0, size=(t_len, n))
    b = softmax_rows(logits)
    tops = np.einsum("ti,ij,tj->t", b, sigma, b)
    lo = mv.risk
    hi = tops.min()
    assert hi - lo > 1e-9, "instance degenerate, pick another seed"
    sigma_g = lo + 0.45 * (hi - lo)
    sigmas = np.repeat(sigma[None, :, :], t_len, axis=0)
    b_m = np.repeat(mv.weights[None, :], t_len, axis=0)
    return logits, b_m, sigmas, sigma_g


def worst_iterate_risk(result, b_m, sigmas, sigma_g):
    worst = 0.0
    for logits in result.logits_history:
        rows = softmax_rows(logits)
        for t in range(rows.shape[0]):
            adj = adjust_to_risk(rows[t], b_m[t], sigmas[t], sigma_g)
            if not adj.clamped:
                worst = max(worst, abs(adj.achieved_risk - sigma_g))
    return worst


def test_improve_monotone_and_risk_pinned():
    for seed in (21, 22, 23):
        logits, b_m, sigmas, sigma_g = improve_instance(seed)
        res = improve(logits, b_m, sigmas, sigma_g, steps=25, lr=0.1)
        assert res.warning is None
        assert res.steps_accepted > 0
        hist = res.objective_history
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
        assert res.gamma_history[-1] <= res.gamma_history[0] + 1e-12
        assert worst_iterate_risk(res, b_m, sigmas, sigma_g) <= 1e-10 * max(1.0, sigma_g)
        for adj in res.adjustments:
            assert not adj.clamped
            assert abs(adj.achieved_risk - sigma_g) <= 1e-10 * max(1.0, sigma_g)


def test_improve_zero_steps_is_pure_interpolation():
    logits, b_m, sigmas, sigma_g = improve_instance(31)
    res = improve(logits, b_m, sigmas, sigma_g, steps=0)
    assert np.array_equal(res.logits, logits)
    assert res.steps_accepted == 0
    rows = softmax_rows(logits)
    for t, adj in enumerate(res.adjustments):
        ref = adjust_to_risk(rows[t], b_m[t], sigmas[t], sigma_g)
        assert np.array_equal(adj.weights, ref.weights)
        assert adj.gamma == ref.gamma
        assert adj.achieved_risk == ref.achieved_risk


def test_improve_single_day_reaches_grid_optimum():
    # one day, two assets: sweep the logit gap to locate the smallest
    # reachable gamma, then check gradient descent lands on it
    sigma = np.diag([0.04, 0.01])
    mv = min_variance(sigma)
    b_m = mv.weights[None, :]
    sigmas = sigma[None, :, :]
    logits = np.array([[1.5, 0.0]])
    b0 = softmax_rows(logits)[0]
    top = portfolio_risk(b0, sigma)
    sigma_g = mv.risk + 0.5 * (top - mv.risk)

    best = np.inf
    for gap in np.linspace(-6.0, 6.0, 4001):
        b = softmax_rows(np.array([[gap, 0.0]]))[0]
        try:
            g, clamped = interpolation_coeff(b, mv.weights, sigma, sigma_g)
        except NumericalError:
            continue
        if not clamped:
            best = min(best, g)

    res = improve(logits, b_m, sigmas, sigma_g, steps=120, lr=0.5)
    final = res.gamma_history[-1]
    assert final <= res.gamma_history[0]
    assert final <= best + 1e-2


def test_improve_no_binding_day_returns_interpolation():
    logits, b_m, sigmas, _ = improve_instance(41)
    # every day's reachable band lies far below this target
    res = improve(logits, b_m, sigmas, 1e3, steps=10, lr=0.1)
    assert res.warning is not None
    assert "binds on no day" in res.warning
    assert np.array_equal(res.logits, logits)
    assert res.steps_accepted == 0
    assert np.isnan(res.objective_history[0])
    for adj in res.adjustments:
        assert adj.clamped and adj.gamma == 0.0


def test_improve_partial_binding_freezes_excluded_days():
    rng = np.random.default_rng(51)
    sigma = random_psd(rng, 3, scale=0.01)
    mv = min_variance(sigma)
    logits = rng.normal(0.0, 1.0, size=(3, 3))
    b = softmax_rows(logits)
    tops = np.einsum("ti,ij,tj->t", b, sigma, b)
    order = np.argsort(tops)
    # target above the lowest day's band top but inside the others'
    sigma_g = tops[order[0]] * 1.02
    assert sigma_g < tops[order[1]]
    sigmas = np.repeat(sigma[None, :, :], 3, axis=0)
    b_m = np.repeat(mv.weights[None, :], 3, axis=0)

    res = improve(logits, b_m, sigmas, sigma_g, steps=15, lr=0.1)
    assert res.warning is None
    assert res.steps_accepted > 0
    frozen = order[0]
    assert np.array_equal(res.logits[frozen], logits[frozen])
    assert res.adjustments[frozen].clamped
    assert res.adjustments[frozen].gamma == 0.0
    moved = [t for t in range(3) if t != frozen]
    assert any(not np.array_equal(res.logits[t], logits[t]) for t in moved)
    for t in moved:
        adj = res.adjustments[t]
        assert not adj.clamped
        assert abs(adj.achieved_risk - sigma_g) <= 1e-10 * max(1.0, sigma_g)


def test_improve_return_term_changes_solution():
    logits, b_m, sigmas, sigma_g = improve_instance(61)
    t_len, n = logits.shape
    rng = np.random.default_rng(62)
    predicted = rng.uniform(0.0, 0.02, size=(t_len, n))
    plain = improve(logits, b_m, sigmas, sigma_g, steps=20, lr=0.1)
    tilted = improve(logits, b_m, sigmas, sigma_g, steps=20, lr=0.1,
                     return_weight=5.0, predicted_returns=predicted)
    literal = improve(logits, b_m, sigmas, sigma_g, steps=20, lr=0.1,
                      return_weight=5.0, predicted_returns=predicted,
                      literal_product=True)
    for res in (tilted, literal):
        assert res.steps_accepted > 0
        hist = res.objective_history
        assert all(y <= x + 1e-12 for x, y in zip(hist, hist[1:]))
        assert worst_iterate_risk(res, b_m, sigmas, sigma_g) <= 1e-10 * max(1.0, sigma_g)
    assert not np.array_equal(plain.logits, tilted.logits)


def test_improve_input_validation():
    logits, b_m, sigmas, sigma_g = improve_instance(71)
    with pytest.raises(ValueError, match="shapes"):
        improve(logits, b_m[:2], sigmas, sigma_g)
    with pytest.raises(ValueError, match="predicted_returns"):
        improve(logits, b_m, sigmas, sigma_g, return_weight=1.0)
    with pytest.raises(ValueError, match="steps"):
        improve(logits, b_m, sigmas, sigma_g, steps=-1)
