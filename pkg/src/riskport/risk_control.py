"""Risk targeting by interpolation toward the minimum-variance portfolio.

Moving a portfolio b along the segment toward the min-variance portfolio
b_m gives b(gamma) = (1-gamma) b + gamma b_m. Its risk is the quadratic

    risk(gamma) = A gamma^2 + B gamma + C,
    A = b'Sb - 2 b'Sb_m + b_m'Sb_m   (= (b-b_m)'S(b-b_m) >= 0),
    B = 2 (b'Sb_m - b'Sb),
    C = b'Sb,

which decreases monotonically from C at gamma=0 to the min-variance risk
at gamma=1, so any target in between is hit exactly by the closed-form
root. A gradient loop can further trade the per-period gamma against
predicted returns while re-solving gamma keeps risk pinned at the target.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, no_grad
from .covariance import portfolio_risk
from .errors import NumericalError

log = logging.getLogger(__name__)

_DISC_EPS = 1e-24


@dataclass(frozen=True)
class MinVarPortfolio:
    weights: np.ndarray
    risk: float
    converged: bool


@dataclass(frozen=True)
class RiskAdjustment:
    gamma: float
    weights: np.ndarray
    achieved_risk: float
    clamped: bool


@dataclass
class ImproveResult:
    logits: np.ndarray                 # (T, N) final pre-softmax logits
    adjustments: List[RiskAdjustment]  # per timestep, at the requested target
    objective_history: List[float]     # accepted iterates, initial first
    gamma_history: List[float]         # sum of gammas at each accepted iterate
    logits_history: List[np.ndarray]   # logits at each accepted iterate
    steps_accepted: int = 0
    warning: Optional[str] = None


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Exact Euclidean projection onto the probability simplex (sort-based)."""
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("project_simplex expects a vector")
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, x.size + 1)
    mask = u - css / ks > 0.0
    rho = int(np.nonzero(mask)[0][-1])
    theta = css[rho] / (rho + 1.0)
    return np.maximum(x - theta, 0.0)


def min_variance(
    sigma: np.ndarray,
    tol: float = 1e-10,
    max_iters: int = 50000,
) -> MinVarPortfolio:
    """Long-only minimum-variance weights by projected gradient descent.

    Step size 1/L with L = 2 lambda_max(sigma) (power iteration); stops
    when the projected-gradient step moves less than tol.
    """
    s = np.asarray(sigma, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n):
        raise ValueError("sigma must be square")
    if not np.allclose(s, s.T, atol=1e-10):
        raise ValueError("sigma must be symmetric")

    lam = _power_iteration(s)
    b = np.full(n, 1.0 / n)
    if lam <= 0.0:
        return MinVarPortfolio(weights=b, risk=portfolio_risk(b, s), converged=True)
    step = 1.0 / (2.0 * lam)

    converged = False
    for _ in range(max_iters):
        grad = 2.0 * (s @ b)
        nxt = project_simplex(b - step * grad)
        if np.linalg.norm(nxt - b) < tol:
            b = nxt
            converged = True
            break
        b = nxt
    if not converged:
        log.warning("min_variance hit max_iters=%d without tol=%g", max_iters, tol)
    return MinVarPortfolio(weights=b, risk=portfolio_risk(b, s), converged=converged)


def _power_iteration(s: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(s.shape[0])
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return 0.0
    v /= norm
    lam = 0.0
    for _ in range(iters):
        w = s @ v
        norm = np.linalg.norm(w)
        if norm <= 1e-300:
            return 0.0
        v = w / norm
        lam = norm
    return float(lam)


def interpolation_coeff(
    b: np.ndarray,
    b_m: np.ndarray,
    sigma: np.ndarray,
    sigma_g: float,
    eps: float = 1e-12,
):
    """The unique gamma in [0, 1] with risk((1-gamma) b + gamma b_m) = sigma_g.

    Returns (gamma, clamped). Targets outside the reachable interval clamp
    to the nearest endpoint with clamped=True.
    """
    b = np.asarray(b, dtype=np.float64)
    b_m = np.asarray(b_m, dtype=np.float64)
    sb = sigma @ b
    sbm = sigma @ b_m
    c_coef = float(b @ sb)
    cross = float(b @ sbm)
    smm = float(b_m @ sbm)
    a_coef = c_coef - 2.0 * cross + smm
    b_coef = 2.0 * (cross - c_coef)
    sigma_t = c_coef
    sigma_m = a_coef + b_coef + c_coef

    if abs(sigma_t - sigma_m) <= eps and abs(sigma_g - sigma_t) > eps:
        raise NumericalError(
            f"degenerate interpolation: endpoint risks coincide at {sigma_t:.3e} "
            f"but target is {sigma_g:.3e}"
        )
    if sigma_g >= sigma_t:
        return 0.0, bool(sigma_g > sigma_t)
    if sigma_g <= sigma_m:
        return 1.0, bool(sigma_g < sigma_m)

    disc = b_coef * b_coef - 4.0 * a_coef * (c_coef - sigma_g)
    disc = max(disc, 0.0)
    denom = -b_coef + np.sqrt(disc)
    if denom <= 0.0:
        raise NumericalError("interpolation root is indeterminate (flat risk curve)")
    # Conjugate form of the smaller quadratic root; exact for A -> 0 too,
    # where it reduces to the linear solution (sigma_g - C) / B.
    gamma = 2.0 * (c_coef - sigma_g) / denom
    return float(np.clip(gamma, 0.0, 1.0)), False


def interpolate(b: np.ndarray, b_m: np.ndarray, gamma: float) -> np.ndarray:
    """Convex combination (1-gamma) b + gamma b_m; gamma must be in [0, 1]."""
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma {gamma} outside [0, 1]")
    return (1.0 - gamma) * np.asarray(b, dtype=np.float64) + gamma * np.asarray(b_m, dtype=np.float64)


def adjust_to_risk(
    b: np.ndarray,
    b_m: np.ndarray,
    sigma: np.ndarray,
    sigma_g: float,
) -> RiskAdjustment:
    """Interpolate one portfolio to the target risk level."""
    gamma, clamped = interpolation_coeff(b, b_m, sigma, sigma_g)
    weights = interpolate(b, b_m, gamma)
    return RiskAdjustment(
        gamma=gamma,
        weights=weights,
        achieved_risk=portfolio_risk(weights, sigma),
        clamped=clamped,
    )


def _softmax_rows(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def improve(
    logits: np.ndarray,
    b_m: np.ndarray,
    sigmas: np.ndarray,
    sigma_g: float,
    steps: int = 30,
    lr: float = 0.05,
    return_weight: float = 0.0,
    predicted_returns: Optional[np.ndarray] = None,
    literal_product: bool = False,
    max_halvings: int = 40,
) -> ImproveResult:
    """Gradient-improve a logit series against the interpolation burden.

    Minimizes sum_t gamma_t(v_t) (gamma through its differentiable
    closed-form root), optionally minus return_weight times a predicted
    growth term, over the pre-softmax logits with everything else frozen.
    Each iteration backtracks (halving the step, persistently) until the
    objective does not increase; a step is rejected the same way when its
    discriminant degenerates or when it would push a day whose root is
    currently inside [0, 1] out of that interval (leaving would break the
    exact-risk guarantee for that day). Days already outside [0, 1] at the
    starting point are exempt; their output is clamped as usual.

    The objective sums over the days where the target actually binds at
    the starting point (root defined and inside [0, 1]). On every other
    day the target is outside the reachable band, the adjusted output is
    a clamped endpoint, and minimizing an out-of-range root would only
    drag the portfolio away from the target, so those days take no
    gradient and keep their initial logits. If the target binds on no
    day, or no step is ever accepted, the initial portfolio is returned
    unchanged with a warning.
    """
    v = np.array(logits, dtype=np.float64)
    t_len, n = v.shape
    if b_m.shape != (t_len, n) or sigmas.shape != (t_len, n, n):
        raise ValueError("improve inputs have inconsistent shapes")
    if return_weight != 0.0 and predicted_returns is None:
        raise ValueError("return_weight > 0 needs predicted_returns")
    if steps < 0:
        raise ValueError("steps must be >= 0")

    sig_bm = np.einsum("tij,tj->ti", sigmas, b_m)           # (T, N)
    smm = np.einsum("ti,ti->t", b_m, sig_bm)                # (T,)

    # The set of optimized days is frozen at the starting point: root
    # defined (positive discriminant) and inside [0, 1].
    b0 = _softmax_rows(v)
    sbb0 = np.einsum("ti,tij,tj->t", b0, sigmas, b0)
    sbm0 = np.einsum("ti,ti->t", b0, sig_bm)
    bc0 = 2.0 * (sbm0 - sbb0)
    disc0 = bc0 * bc0 - 4.0 * (sbb0 - 2.0 * sbm0 + smm) * (sbb0 - sigma_g)
    with np.errstate(invalid="ignore", divide="ignore"):
        denom0 = -bc0 + np.sqrt(np.maximum(disc0, 0.0))
        gamma0 = np.where(denom0 > 0.0, 2.0 * (sbb0 - sigma_g) / np.where(denom0 > 0.0, denom0, 1.0), np.nan)
    defined = (disc0 >= _DISC_EPS) & (gamma0 >= 0.0) & (gamma0 <= 1.0)
    mask = defined.astype(np.float64)

    def build(v_arr: np.ndarray, need_grad: bool):
        vt = Tensor(v_arr, requires_grad=need_grad)
        b = ad.softmax(vt, axis=-1)
        sb = (Tensor(sigmas) @ b.reshape((t_len, n, 1))).reshape((t_len, n))
        sbb = (b * sb).sum(axis=1)
        sbm = (b * sig_bm).sum(axis=1)
        a_coef = sbb - 2.0 * sbm + smm
        b_coef = 2.0 * (sbm - sbb)
        disc = b_coef * b_coef - 4.0 * a_coef * (sbb - sigma_g)
        if float(disc.data[defined].min(initial=np.inf)) < _DISC_EPS:
            raise NumericalError("interpolation discriminant degenerated during a step")
        # Excluded days get a positive stand-in under the square root so the
        # graph stays finite; their gamma is zeroed by the mask either way.
        disc_safe = disc * mask + (1.0 - mask) * (b_coef * b_coef + 1.0)
        gamma = (2.0 * (sbb - sigma_g) / (-b_coef + ad.sqrt(disc_safe))) * mask
        loss = gamma.sum()
        if return_weight != 0.0:
            dots = (b * predicted_returns).sum(axis=1) * mask
            if literal_product:
                # Plain product of dot products; excluded days contribute a
                # neutral factor of one.
                growth = dots[0] + (1.0 - mask[0])
                for k in range(1, t_len):
                    growth = growth * (dots[k] + (1.0 - mask[k]))
            else:
                growth = ad.log(dots + 1.0).sum()
            loss = loss - return_weight * growth
        return vt, loss, gamma.data.copy()

    def evaluate(v_arr: np.ndarray):
        with no_grad():
            _, loss, gammas = build(v_arr, need_grad=False)
        return float(loss.data), gammas

    def in_range(gammas: np.ndarray) -> bool:
        g = gammas[defined]
        return bool(np.all((g >= 0.0) & (g <= 1.0)))

    # With the target binding nowhere there is nothing to optimize; fall
    # back to pure interpolation with a warning instead of failing (the
    # per-day adjustments below still clamp correctly).
    start_error = None
    if defined.any():
        cur_obj, cur_gammas = evaluate(v)
        if not defined.all():
            log.info("the target binds on %d of %d days; optimizing those",
                     int(defined.sum()), t_len)
    else:
        start_error = "the risk target binds on no day"
        cur_obj, cur_gammas = float("nan"), np.full(t_len, np.nan)

    result = ImproveResult(
        logits=v,
        adjustments=[],
        objective_history=[cur_obj],
        gamma_history=[float(np.sum(cur_gammas))],
        logits_history=[v.copy()],
    )

    step_size = float(lr)
    any_accepted = False
    for _ in range(steps if start_error is None else 0):
        vt, loss, _ = build(v, need_grad=True)
        grads = backward(loss, params=[vt])
        grad = grads[vt]
        accepted = False
        for _ in range(max_halvings):
            candidate = v - step_size * grad
            try:
                cand_obj, cand_gammas = evaluate(candidate)
            except NumericalError:
                step_size *= 0.5
                continue
            if cand_obj <= cur_obj and in_range(cand_gammas):
                v = candidate
                cur_obj, cur_gammas = cand_obj, cand_gammas
                accepted = True
                any_accepted = True
                break
            step_size *= 0.5
        if not accepted:
            break
        result.steps_accepted += 1
        result.objective_history.append(cur_obj)
        result.gamma_history.append(float(np.sum(cur_gammas)))
        result.logits_history.append(v.copy())

    if start_error is not None:
        result.warning = (f"objective undefined at the initial portfolio "
                          f"({start_error}); returning pure interpolation")
        log.warning("%s", result.warning)
    elif steps > 0 and not any_accepted:
        result.warning = "no improvement step accepted; returning the initial portfolio"
        log.warning("%s", result.warning)

    result.logits = v
    b_rows = _softmax_rows(v)
    for t in range(t_len):
        result.adjustments.append(adjust_to_risk(b_rows[t], b_m[t], sigmas[t], sigma_g))
    return result
