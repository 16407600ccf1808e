"""Soft (differentiable) and hard (iterative) projection onto the dispatch constraints.

All functions accept numpy arrays or torch tensors with generators on the
last axis and arbitrary leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import expit

from .grid import PowerSystem, compute_ptdf, line_flows


class ProjectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProjectionConfig:
    tau: float = 0.05
    hard_tol: float = 0.005
    hard_max_iters: int = 15
    feas_tol: float = 0.1
    # Renormalise the rebalancing weights over generators that can still move in
    # the direction of the imbalance. With False the loop is the plain
    # fixed-weight version, which can stall when several units saturate.
    redistribute_saturated: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.hard_tol > 0:
            raise ValueError("hard_tol must be > 0")
        if self.hard_max_iters < 1:
            raise ValueError("hard_max_iters must be >= 1")


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def _like(value, ref):
    if _is_torch(ref):
        return ref.new_tensor(np.asarray(value))
    return np.asarray(value, dtype=float)


def _sigmoid(x):
    return torch.sigmoid(x) if _is_torch(x) else expit(x)


def _where(cond, a, b):
    return torch.where(cond, a, b) if _is_torch(a) or _is_torch(b) else np.where(cond, a, b)


def _clamp(x, lo, hi):
    if _is_torch(x):
        return torch.minimum(torch.maximum(x, lo), hi)
    return np.clip(x, lo, hi)


def soft_clamp(x, x_min, x_max, tau: float = 0.05):
    """Logistic squashing of ``x`` into (x_min, x_max); identity at the midpoint.

    A degenerate range (x_min == x_max) returns the constant.
    """
    if not _is_torch(x):
        x = np.asarray(x, dtype=float)
    lo, hi = _like(x_min, x), _like(x_max, x)
    if (lo > hi).any():
        raise ValueError("soft_clamp requires x_min <= x_max")
    width = hi - lo
    degenerate = width == 0
    safe = _where(degenerate, _like(1.0, x), width)
    out = lo + width * _sigmoid(((x - lo) / safe - 0.5) / tau)
    return _where(degenerate, lo + 0 * x, out)


def capacity_weights(system: PowerSystem) -> np.ndarray:
    rng = system.p_max - system.p_min
    return rng / rng.sum()


def _totals(loads, ref):
    if _is_torch(ref) and not _is_torch(loads):
        loads = ref.new_tensor(np.asarray(loads, dtype=float))
    return loads.sum(-1)


def soft_balance_project(dispatch, loads, system: PowerSystem, tau: float = 0.05):
    """Capacity-weighted balance correction followed by a soft clamp. Branch-free."""
    w = _like(capacity_weights(system), dispatch)
    delta = _totals(loads, dispatch) - dispatch.sum(-1)
    shifted = dispatch + delta[..., None] * w
    return soft_clamp(shifted, system.p_min, system.p_max, tau)


def hard_project(dispatch, loads, system: PowerSystem, cfg: ProjectionConfig | None = None):
    """Clamp, then capacity-weighted rebalancing + clamp until |imbalance| < hard_tol.

    ``loads`` are per-bus demands; use :func:`hard_project_totals` when only
    the total demand is at hand. Raises ProjectionError if the loop runs out
    of iterations.
    """
    return hard_project_totals(dispatch, _totals(loads, dispatch), system, cfg)


def hard_project_totals(dispatch, totals, system: PowerSystem, cfg: ProjectionConfig | None = None):
    cfg = cfg or ProjectionConfig()
    torch_mode = _is_torch(dispatch)
    if not torch_mode:
        dispatch = np.asarray(dispatch, dtype=float)
        totals = np.asarray(totals, dtype=float)
    elif not _is_torch(totals):
        totals = dispatch.new_tensor(np.asarray(totals, dtype=float))
    lo, hi = _like(system.p_min, dispatch), _like(system.p_max, dispatch)
    rng = hi - lo
    p = _clamp(dispatch, lo, hi)
    converged = None
    for _ in range(cfg.hard_max_iters):
        delta = totals - p.sum(-1)
        converged = abs(delta) < cfg.hard_tol
        if converged.all():
            break
        if cfg.redistribute_saturated:
            up = (delta > 0)[..., None]
            movable = _where(up, p < hi, p > lo)
            w = rng * movable
            denom = w.sum(-1, keepdims=True)
            w = w / _where(denom > 0, denom, _like(1.0, denom))
        else:
            w = rng / rng.sum()
        step = delta[..., None] * w
        step = _where(converged[..., None], 0 * step, step)
        p = _clamp(p + step, lo, hi)
    delta = totals - p.sum(-1)
    if not (abs(delta) < cfg.hard_tol).all():
        worst = float(abs(delta).max())
        raise ProjectionError(
            f"hard projection did not converge in {cfg.hard_max_iters} iterations "
            f"(worst imbalance {worst:.4g} MW)"
        )
    return p


@dataclass
class Violation:
    kind: str  # "p_min", "p_max", "balance", "line"
    index: int | None
    magnitude: float


@dataclass
class FeasibilityReport:
    feasible: bool
    violations: list[Violation] = field(default_factory=list)
    balance_error: float = 0.0
    line_flows: np.ndarray | None = None


def check_feasibility(dispatch, loads, system: PowerSystem, feas_tol: float = 0.1) -> FeasibilityReport:
    p = np.asarray(dispatch, dtype=float)
    d = np.asarray(loads, dtype=float)
    violations = []
    for i in range(system.n_generators):
        under = system.p_min[i] - p[i]
        over = p[i] - system.p_max[i]
        if under > feas_tol:
            violations.append(Violation("p_min", i, float(under)))
        if over > feas_tol:
            violations.append(Violation("p_max", i, float(over)))
    balance = float(p.sum() - d.sum())
    if abs(balance) > feas_tol:
        violations.append(Violation("balance", None, abs(balance)))
    flows = None
    limits = np.array([ln.flow_limit for ln in system.lines])
    if np.isfinite(limits).any():
        flows = line_flows(compute_ptdf(system), system, p, d)
        # Informational only: line limits are not part of the feasibility verdict.
        for k in np.flatnonzero(np.abs(flows) > limits + feas_tol):
            violations.append(Violation("line", int(k), float(abs(flows[k]) - limits[k])))
    feasible = not any(v.kind != "line" for v in violations)
    return FeasibilityReport(feasible, violations, balance, flows)


def feasible_mask(dispatch, loads, system: PowerSystem, feas_tol: float = 0.1) -> np.ndarray:
    """Vectorised feasibility verdict for a batch (same rule as check_feasibility)."""
    p = np.asarray(dispatch, dtype=float)
    d = np.asarray(loads, dtype=float)
    bounds_ok = np.all((p >= system.p_min - feas_tol) & (p <= system.p_max + feas_tol), axis=-1)
    balance_ok = np.abs(p.sum(-1) - d.sum(-1)) <= feas_tol
    return bounds_ok & balance_ok
