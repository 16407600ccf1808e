"""Power-system data model, quadratic generator costs and DC power flow.

Bus and generator indices are 0-based internally. The embedded case file
uses the 1-based numbering of the published test cases.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np


class GridError(ValueError):
    """Raised for malformed systems or dimension mismatches."""


class DisconnectedGridError(GridError):
    """Raised when the line graph is not connected (reduced B is singular)."""


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float
    p_max: float
    c2: float
    c1: float
    c0: float = 0.0

    def __post_init__(self):
        if not self.p_min < self.p_max:
            raise GridError(f"generator {self.id}: p_min={self.p_min} must be < p_max={self.p_max}")
        if not self.c2 > 0:
            raise GridError(f"generator {self.id}: c2={self.c2} must be > 0 (strict convexity)")


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    reactance: float
    flow_limit: float = math.inf

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise GridError(f"line {self.from_bus}-{self.to_bus} is a self-loop")
        if not self.reactance > 0:
            raise GridError(f"line {self.from_bus}-{self.to_bus}: reactance must be > 0")


@dataclass(frozen=True, eq=False)
class PowerSystem:
    n_buses: int
    generators: tuple[Generator, ...]
    lines: tuple[Line, ...]
    base_load: np.ndarray
    slack_bus: int = 0
    name: str = "custom"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        base = np.array(self.base_load, dtype=float)
        if base.shape != (self.n_buses,):
            raise GridError(f"base_load has shape {base.shape}, expected ({self.n_buses},)")
        if np.any(base < 0):
            raise GridError("base loads must be non-negative")
        base.flags.writeable = False
        object.__setattr__(self, "base_load", base)
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "lines", tuple(self.lines))
        if not 0 <= self.slack_bus < self.n_buses:
            raise GridError(f"slack bus {self.slack_bus} out of range")
        for g in self.generators:
            if not 0 <= g.bus < self.n_buses:
                raise GridError(f"generator {g.id} sits on unknown bus {g.bus}")
        for ln in self.lines:
            if not (0 <= ln.from_bus < self.n_buses and 0 <= ln.to_bus < self.n_buses):
                raise GridError(f"line {ln.from_bus}-{ln.to_bus} references an unknown bus")

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def _vec(self, attr: str) -> np.ndarray:
        if attr not in self._cache:
            v = np.array([getattr(g, attr) for g in self.generators], dtype=float)
            v.flags.writeable = False
            self._cache[attr] = v
        return self._cache[attr]

    @property
    def p_min(self) -> np.ndarray:
        return self._vec("p_min")

    @property
    def p_max(self) -> np.ndarray:
        return self._vec("p_max")

    @property
    def c2(self) -> np.ndarray:
        return self._vec("c2")

    @property
    def c1(self) -> np.ndarray:
        return self._vec("c1")

    @property
    def c0(self) -> np.ndarray:
        return self._vec("c0")

    @property
    def gen_bus(self) -> np.ndarray:
        return np.array([g.bus for g in self.generators], dtype=int)

    @cached_property
    def gen_incidence(self) -> np.ndarray:
        """A_g, shape (n_buses, n_generators): 1 where generator i sits on bus b."""
        a = np.zeros((self.n_buses, self.n_generators))
        a[self.gen_bus, np.arange(self.n_generators)] = 1.0
        return a

    @cached_property
    def branch_incidence(self) -> np.ndarray:
        """Shape (n_lines, n_buses): +1 at from bus, -1 at to bus."""
        a = np.zeros((self.n_lines, self.n_buses))
        for k, ln in enumerate(self.lines):
            a[k, ln.from_bus] = 1.0
            a[k, ln.to_bus] = -1.0
        return a

    def adjacency(self, self_loops: bool = True) -> np.ndarray:
        adj = np.zeros((self.n_buses, self.n_buses))
        for ln in self.lines:
            adj[ln.from_bus, ln.to_bus] = adj[ln.to_bus, ln.from_bus] = 1.0
        if self_loops:
            adj += np.eye(self.n_buses)
        return adj

    def is_connected(self) -> bool:
        adj = self.adjacency(self_loops=False)
        seen = {self.slack_bus}
        stack = [self.slack_bus]
        while stack:
            b = stack.pop()
            for nb in np.flatnonzero(adj[b]):
                if nb not in seen:
                    seen.add(int(nb))
                    stack.append(int(nb))
        return len(seen) == self.n_buses

    def capacity_range(self) -> tuple[float, float]:
        return float(self.p_min.sum()), float(self.p_max.sum())

    def check_servable(self, scale_lo: float, scale_hi: float) -> None:
        """Raise unless every uniform scaling of base load in [lo, hi] is feasible."""
        total = float(self.base_load.sum())
        lo, hi = self.capacity_range()
        if lo > scale_lo * total or hi < scale_hi * total:
            raise GridError(
                f"capacity [{lo:.1f}, {hi:.1f}] MW cannot serve "
                f"[{scale_lo * total:.1f}, {scale_hi * total:.1f}] MW"
            )

    def subsystem(self, gen_indices: Sequence[int]) -> "PowerSystem":
        """Same network restricted to a subset of generators."""
        gens = tuple(self.generators[i] for i in gen_indices)
        return PowerSystem(self.n_buses, gens, self.lines, self.base_load, self.slack_bus, self.name)

    def permuted(self, perm: Sequence[int]) -> "PowerSystem":
        """Relabel buses: old bus ``perm[k]`` becomes new bus ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        gens = tuple(
            Generator(g.id, int(inv[g.bus]), g.p_min, g.p_max, g.c2, g.c1, g.c0) for g in self.generators
        )
        lines = tuple(
            Line(int(inv[ln.from_bus]), int(inv[ln.to_bus]), ln.reactance, ln.flow_limit) for ln in self.lines
        )
        return PowerSystem(
            self.n_buses, gens, lines, self.base_load[perm], int(inv[self.slack_bus]), self.name
        )


def load_case(path: str | Path) -> PowerSystem:
    """Read a case file (see ``data/ieee30.json`` for the schema)."""
    with open(path) as fh:
        doc = json.load(fh)
    return _from_doc(doc)


def _from_doc(doc: dict) -> PowerSystem:
    try:
        ids = [b["id"] for b in doc["buses"]]
        index = {bid: k for k, bid in enumerate(ids)}
        gens = tuple(
            Generator(
                id=k + 1,
                bus=index[g["bus"]],
                p_min=float(g["p_min"]),
                p_max=float(g["p_max"]),
                c2=float(g["c2"]),
                c1=float(g["c1"]),
                c0=float(g.get("c0", 0.0)),
            )
            for k, g in enumerate(doc["generators"])
        )
        lines = tuple(
            Line(
                index[ln["from"]],
                index[ln["to"]],
                float(ln["x"]),
                math.inf if ln.get("limit_mw") is None else float(ln["limit_mw"]),
            )
            for ln in doc["lines"]
        )
        base = np.array([float(b["load_mw"]) for b in doc["buses"]])
        slack = index[doc.get("slack_bus", ids[0])]
    except KeyError as exc:
        raise GridError(f"case file is missing key or references unknown bus: {exc}") from exc
    return PowerSystem(len(ids), gens, lines, base, slack, doc.get("name", "custom"))


def build_case30() -> PowerSystem:
    """IEEE 30-bus system with the six-generator economic-dispatch table."""
    text = resources.files("flowdispatch").joinpath("data/ieee30.json").read_text()
    system = _from_doc(json.loads(text))
    system.check_servable(0.70, 1.30)
    return system


def _check_len(system: PowerSystem, dispatch) -> None:
    if dispatch.shape[-1] != system.n_generators:
        raise GridError(
            f"dispatch has {dispatch.shape[-1]} entries, system has {system.n_generators} generators"
        )


def _coeffs(system: PowerSystem, like):
    # Coefficients as the same array type/dtype as ``like`` (numpy or torch).
    if hasattr(like, "new_tensor"):
        return tuple(like.new_tensor(v) for v in (system.c2, system.c1, system.c0))
    return system.c2, system.c1, system.c0


def cost(system: PowerSystem, dispatch):
    """Total generation cost, summed over the last axis. Works on numpy and torch."""
    if not hasattr(dispatch, "shape"):
        dispatch = np.asarray(dispatch, dtype=float)
    _check_len(system, dispatch)
    c2, c1, c0 = _coeffs(system, dispatch)
    return (c2 * dispatch**2 + c1 * dispatch + c0).sum(-1)


def marginal_cost(system: PowerSystem, dispatch):
    """dC_i/dp_i = 2 c2_i p_i + c1_i, elementwise."""
    if not hasattr(dispatch, "shape"):
        dispatch = np.asarray(dispatch, dtype=float)
    _check_len(system, dispatch)
    c2, c1, _ = _coeffs(system, dispatch)
    return 2.0 * c2 * dispatch + c1


def compute_ptdf(system: PowerSystem) -> np.ndarray:
    """DC PTDF matrix, shape (n_lines, n_buses), slack column zero."""
    if not system.is_connected():
        raise DisconnectedGridError(f"system {system.name!r} is not connected")
    a = system.branch_incidence
    b_line = 1.0 / np.array([ln.reactance for ln in system.lines])
    b_bus = a.T @ (b_line[:, None] * a)
    keep = np.array([k for k in range(system.n_buses) if k != system.slack_bus])
    try:
        b_red_inv = np.linalg.inv(b_bus[np.ix_(keep, keep)])
    except np.linalg.LinAlgError as exc:
        raise DisconnectedGridError("reduced susceptance matrix is singular") from exc
    ptdf = np.zeros((system.n_lines, system.n_buses))
    ptdf[:, keep] = (b_line[:, None] * a[:, keep]) @ b_red_inv
    return ptdf


def net_injection(system: PowerSystem, dispatch, loads) -> np.ndarray:
    dispatch = np.asarray(dispatch, dtype=float)
    loads = np.asarray(loads, dtype=float)
    _check_len(system, dispatch)
    if loads.shape[-1] != system.n_buses:
        raise GridError(f"loads have {loads.shape[-1]} entries, system has {system.n_buses} buses")
    return dispatch @ system.gen_incidence.T - loads


def line_flows(ptdf: np.ndarray, system: PowerSystem, dispatch, loads) -> np.ndarray:
    """Branch flows in MW; any imbalance is absorbed at the slack bus."""
    if ptdf.shape != (system.n_lines, system.n_buses):
        raise GridError(f"PTDF shape {ptdf.shape} does not match system")
    return net_injection(system, dispatch, loads) @ ptdf.T
