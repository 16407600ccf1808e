"""Scenario sampling, oracle labelling and the columnar dataset file format.

File layout: one header row, then one row per sample with ``n_buses`` load
columns (``load_1`` ...), ``n_generators`` dispatch columns (``pg_1`` ...)
and a final ``cost`` column. Comma separated, values written with 17
significant digits so a save/load round trip is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import PowerSystem, cost
from .oracle import solve_totals, verify_kkt


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path, self.line = path, line
        super().__init__(f"{path}:{line}: {message}")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    scale_lo: float
    scale_hi: float
    n_samples: int

    def __post_init__(self):
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ValueError(f"scenario {self.name}: need 0 < scale_lo <= scale_hi")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")


TRAINING = ScenarioSpec("train", 0.70, 1.00, 20000)

EVALUATION_SCENARIOS = (
    ScenarioSpec("very_low", 0.70, 0.75, 100),
    ScenarioSpec("low", 0.83, 0.88, 100),
    ScenarioSpec("nominal", 0.95, 1.00, 100),
    ScenarioSpec("high", 1.10, 1.15, 100),
    ScenarioSpec("very_high", 1.25, 1.30, 100),
)

# Seed namespaces keep training and evaluation draws disjoint for the same user seed.
SEED_NAMESPACES = {"train": 0, "eval": 1, "stage1": 2, "stage2": 3}


def derive_seed(seed: int, purpose: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, SEED_NAMESPACES[purpose], *extra])


@dataclass
class Sample:
    loads: np.ndarray
    optimal_dispatch: np.ndarray
    optimal_cost: float


@dataclass
class SampleSet:
    """Column-stacked samples; the form the training loops consume."""

    loads: np.ndarray
    dispatch: np.ndarray
    cost: np.ndarray

    def __len__(self) -> int:
        return len(self.loads)

    def __getitem__(self, i) -> Sample:
        return Sample(self.loads[i], self.dispatch[i], float(self.cost[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def as_dict(self) -> dict:
        return {"loads": self.loads, "dispatch": self.dispatch, "cost": self.cost}

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.loads[idx], self.dispatch[idx], self.cost[idx])


def sample_loads(system: PowerSystem, spec: ScenarioSpec, seed) -> np.ndarray:
    """One uniform scale factor per sample applied to the whole base-load vector."""
    rng = np.random.default_rng(seed)
    factors = rng.uniform(spec.scale_lo, spec.scale_hi, spec.n_samples)
    return factors[:, None] * system.base_load[None, :]


def label(system: PowerSystem, loads: np.ndarray) -> SampleSet:
    dispatch, _ = solve_totals(system, loads.sum(-1))
    return SampleSet(loads, dispatch, np.asarray(cost(system, dispatch)))


def generate(system: PowerSystem, spec: ScenarioSpec, seed) -> SampleSet:
    """Sample ``spec.n_samples`` load vectors and solve each to optimality."""
    loads = sample_loads(system, spec, seed)
    if len(loads) == 0:
        return SampleSet(loads.reshape(0, system.n_buses), np.zeros((0, system.n_generators)), np.zeros(0))
    return label(system, loads)


def header(n_buses: int, n_generators: int) -> list[str]:
    return (
        [f"load_{i + 1}" for i in range(n_buses)]
        + [f"pg_{i + 1}" for i in range(n_generators)]
        + ["cost"]
    )


def save(samples: SampleSet, path: str | Path) -> None:
    n_b, n_g = samples.loads.shape[1], samples.dispatch.shape[1]
    rows = np.hstack([samples.loads, samples.dispatch, samples.cost[:, None]])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header(n_b, n_g)) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load(path: str | Path, system: PowerSystem | None = None, verify_fraction: float = 0.01,
         kkt_tol: float = 1e-6, seed: int = 0) -> SampleSet:
    """Parse a dataset file; with ``system`` given, re-verify KKT on a random ``verify_fraction`` of rows."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(path, 1, "empty file (missing header row)")
    cols = lines[0].split(",")
    n_b = sum(c.startswith("load_") for c in cols)
    n_g = sum(c.startswith("pg_") for c in cols)
    expected = header(n_b, n_g)
    if system is not None and (n_b, n_g) != (system.n_buses, system.n_generators):
        raise DatasetFormatError(
            path, 1, f"file has {n_b} load / {n_g} dispatch columns, system needs "
                     f"{system.n_buses} / {system.n_generators}"
        )
    for k, (got, want) in enumerate(zip(cols, expected)):
        if got != want:
            raise DatasetFormatError(path, 1, f"column {k + 1} is {got!r}, expected {want!r}")
    if len(cols) != len(expected):
        raise DatasetFormatError(path, 1, f"expected {len(expected)} columns, found {len(cols)}")
    body = [ln for ln in lines[1:]]
    if not body:
        raise DatasetFormatError(path, 2, "no data rows")
    data = np.empty((len(body), len(cols)))
    for i, ln in enumerate(body):
        fields = ln.split(",")
        if len(fields) != len(cols):
            raise DatasetFormatError(path, i + 2, f"expected {len(cols)} fields, found {len(fields)}")
        try:
            data[i] = [float(f) for f in fields]
        except ValueError as exc:
            raise DatasetFormatError(path, i + 2, str(exc)) from None
    out = SampleSet(data[:, :n_b], data[:, n_b:n_b + n_g], data[:, -1].copy())
    if system is not None and verify_fraction > 0:
        rng = np.random.default_rng(seed)
        k = max(1, int(round(verify_fraction * len(out))))
        for i in sorted(rng.choice(len(out), size=min(k, len(out)), replace=False)):
            rep = verify_kkt(system, out.dispatch[i], out.loads[i])
            bad = max(rep.max_residual(), rep.bound_residual)
            if bad >= kkt_tol or rep.balance_residual > 1e-9 * max(1.0, out.loads[i].sum()):
                raise DatasetFormatError(path, i + 2, f"row fails KKT verification (residual {bad:.3e})")
            c = float(cost(system, out.dispatch[i]))
            if abs(c - out.cost[i]) > 1e-9 * max(1.0, abs(c)):
                raise DatasetFormatError(path, i + 2, f"cost column {out.cost[i]} != recomputed {c}")
    return out
