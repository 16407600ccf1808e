"""Exact economic dispatch by bisection on the system marginal price, with KKT checks.

With strictly convex separable costs, one balance equality and box limits,
generator i's best response to a price lam is clamp((lam - c1_i) / (2 c2_i)).
The clamp is continuous in lam, so total output is continuous and
nondecreasing and the balancing price is found by bisection with no
tie-breaking needed at bound-entry points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import PowerSystem, cost, marginal_cost

BALANCE_TOL = 1e-10
MAX_ITER = 200


class InfeasibleLoadError(ValueError):
    def __init__(self, total: float, limit: float, direction: str):
        self.total, self.limit, self.direction = total, limit, direction
        side = "below total p_min" if direction == "below" else "above total p_max"
        super().__init__(f"total load {total:.6f} MW is {side} ({limit:.6f} MW)")


class OracleConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class KKTReport:
    lam: float
    mu_min: np.ndarray
    mu_max: np.ndarray
    stationarity_residual: float
    complementarity_residual: float
    dual_feasibility_residual: float
    balance_residual: float
    bound_residual: float

    def max_residual(self) -> float:
        return max(
            self.stationarity_residual,
            self.complementarity_residual,
            self.dual_feasibility_residual,
        )


@dataclass(frozen=True)
class OracleSolution:
    dispatch: np.ndarray
    cost: float
    kkt: KKTReport


def _total(loads) -> np.ndarray:
    loads = np.asarray(loads, dtype=float)
    return loads if loads.ndim == 0 else loads.sum(-1)


def dispatch_at_price(system: PowerSystem, lam) -> np.ndarray:
    """Best-response dispatch at price(s) ``lam``; broadcasts over leading axes."""
    lam = np.asarray(lam, dtype=float)[..., None]
    return np.clip((lam - system.c1) / (2.0 * system.c2), system.p_min, system.p_max)


def price_bracket(system: PowerSystem) -> tuple[float, float]:
    lo = marginal_cost(system, system.p_min).min()
    hi = marginal_cost(system, system.p_max).max()
    return float(lo), float(hi)


def solve_totals(system: PowerSystem, totals, tol: float = BALANCE_TOL, max_iter: int = MAX_ITER):
    """Vectorised solve for an array of total demands.

    Returns ``(dispatch, lam)`` with shapes ``(n, n_g)`` and ``(n,)``.
    """
    totals = np.atleast_1d(np.asarray(totals, dtype=float))
    lo_cap, hi_cap = system.capacity_range()
    # Relative slack so a demand equal to a capacity sum up to rounding is accepted.
    slack = 1e-12 * max(1.0, hi_cap)
    if np.any(totals < lo_cap - slack):
        bad = float(totals[totals < lo_cap - slack][0])
        raise InfeasibleLoadError(bad, lo_cap, "below")
    if np.any(totals > hi_cap + slack):
        bad = float(totals[totals > hi_cap + slack][0])
        raise InfeasibleLoadError(bad, hi_cap, "above")

    lam_lo0, lam_hi0 = price_bracket(system)
    lam_lo = np.full(totals.shape, lam_lo0)
    lam_hi = np.full(totals.shape, lam_hi0)
    lam = 0.5 * (lam_lo + lam_hi)
    scale = np.maximum(1.0, totals)
    done = np.zeros(totals.shape, dtype=bool)
    for _ in range(max_iter):
        lam = 0.5 * (lam_lo + lam_hi)
        resid = dispatch_at_price(system, lam).sum(-1) - totals
        done = np.abs(resid) < tol * scale
        if done.all():
            break
        lam_hi = np.where(resid > 0, lam, lam_hi)
        lam_lo = np.where(resid <= 0, lam, lam_lo)
        if np.all((lam_hi - lam_lo) <= 4 * np.spacing(lam_hi)):
            break
    dispatch = dispatch_at_price(system, lam)
    dispatch, lam = _polish(system, dispatch, lam, totals)
    resid = np.abs(dispatch.sum(-1) - totals)
    if np.any(resid >= tol * scale):
        raise OracleConvergenceError(
            f"bisection failed to balance within {tol} MW (worst residual {resid.max():.3e})"
        )
    return dispatch, lam


def _polish(system, dispatch, lam, totals):
    # Solve the interior generators' linear system exactly for the active set found by bisection.
    at_bound = (dispatch <= system.p_min) | (dispatch >= system.p_max)
    inv2c2 = 1.0 / (2.0 * system.c2)
    free_gain = np.where(at_bound, 0.0, inv2c2).sum(-1)
    fixed = np.where(at_bound, dispatch, 0.0).sum(-1)
    free_offset = np.where(at_bound, 0.0, system.c1 * inv2c2).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_exact = (totals - fixed + free_offset) / free_gain
    ok = free_gain > 0
    cand = np.where(at_bound, dispatch, (lam_exact[..., None] - system.c1) * inv2c2)
    inside = np.all((cand >= system.p_min) & (cand <= system.p_max), axis=-1)
    better = ok & inside & (
        np.abs(cand.sum(-1) - totals) <= np.abs(dispatch.sum(-1) - totals)
    )
    dispatch = np.where(better[..., None], cand, dispatch)
    lam = np.where(better, lam_exact, lam)
    return dispatch, lam


def solve_economic_dispatch(system: PowerSystem, loads) -> OracleSolution:
    """Global optimum of min sum C_i(p_i) s.t. sum p = sum loads, p_min <= p <= p_max.

    ``loads`` is a per-bus vector (or a scalar total demand).
    """
    total = float(_total(loads))
    dispatch, lam = solve_totals(system, total)
    dispatch = dispatch[0]
    report = verify_kkt(system, dispatch, total)
    return OracleSolution(dispatch=dispatch, cost=float(cost(system, dispatch)), kkt=report)


def verify_kkt(system: PowerSystem, dispatch, loads, tol: float = 1e-6) -> KKTReport:
    """KKT residuals of a dispatch. Never raises on bad input; it reports."""
    p = np.asarray(dispatch, dtype=float)
    total = float(_total(loads))
    mc = marginal_cost(system, p)
    at_min = p <= system.p_min + tol
    at_max = p >= system.p_max - tol
    interior = ~(at_min | at_max)
    if interior.any():
        lam = float(mc[interior].mean())
    else:
        # Feasible price interval: generators at max need mc <= lam, at min need mc >= lam.
        lo = mc[at_max].max() if at_max.any() else mc.min()
        hi = mc[at_min].min() if at_min.any() else mc.max()
        lam = 0.5 * (float(lo) + float(hi))
    mu_min = np.where(at_min & ~at_max, np.maximum(mc - lam, 0.0), 0.0)
    mu_max = np.where(at_max & ~at_min, np.maximum(lam - mc, 0.0), 0.0)
    stationarity = np.abs(mc - lam + mu_max - mu_min)
    complementarity = np.maximum(
        np.abs(mu_min * (p - system.p_min)), np.abs(mu_max * (system.p_max - p))
    )
    dual = np.maximum(np.maximum(-mu_min, -mu_max), 0.0)
    bound = np.maximum(np.maximum(system.p_min - p, p - system.p_max), 0.0)
    return KKTReport(
        lam=lam,
        mu_min=mu_min,
        mu_max=mu_max,
        stationarity_residual=float(stationarity.max()),
        complementarity_residual=float(complementarity.max()),
        dual_feasibility_residual=float(dual.max()),
        balance_residual=abs(float(p.sum()) - total),
        bound_residual=float(bound.max()),
    )
