"""Five-scenario evaluation of the GNN-only and refined pipelines against the oracle."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as ds
from .cfm import refine
from .gnn import forward as gnn_forward
from .grid import PowerSystem, cost
from .projection import ProjectionConfig, feasible_mask

RECORD_FIELDS = [
    "scenario", "index", "total_load", "optimal_cost",
    "gnn_cost", "gnn_feasible", "cfm_cost", "cfm_feasible",
]


@dataclass
class ScenarioRow:
    scenario: str
    n_samples: int
    optimal_mean: float
    optimal_std: float
    gnn_cost: float
    gnn_gap: float
    gnn_feasibility: float
    gnn_worst_gap: float
    cfm_cost: float
    cfm_gap: float
    cfm_feasibility: float
    cfm_worst_gap: float

    @property
    def cost_reduction(self) -> float:
        """Percent cost saved by refinement relative to the GNN-only dispatch."""
        return 100.0 * (self.gnn_cost - self.cfm_cost) / self.gnn_cost

    @property
    def gap_reduction(self) -> float:
        """Gap reduction in percentage points."""
        return self.gnn_gap - self.cfm_gap


@dataclass
class EvaluationReport:
    rows: list[ScenarioRow]
    meta: dict = field(default_factory=dict)

    def row(self, name: str) -> ScenarioRow:
        for r in self.rows:
            if r.scenario == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "scenarios": [asdict(r) for r in self.rows],
            "improvement": [
                {"scenario": r.scenario, "cost_reduction_pct": r.cost_reduction,
                 "gap_reduction_pp": r.gap_reduction}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(asdict(self.rows[0])) + ["cost_reduction_pct", "gap_reduction_pp"] if self.rows else []
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for r in self.rows:
            writer.writerow([*(repr(v) if isinstance(v, float) else v for v in asdict(r).values()),
                             repr(r.cost_reduction), repr(r.gap_reduction)])
        return buf.getvalue()

    def format_table(self) -> str:
        head = (f"{'Scenario':<10} {'Optimal ($)':>16} {'GNN ($)':>9} {'GNN gap':>8} "
                f"{'CFM ($)':>9} {'CFM gap':>8} {'Feas.':>6} {'Worst':>7}")
        lines = ["Performance summary", head, "-" * len(head)]
        for r in self.rows:
            opt = f"{r.optimal_mean:.2f}±{r.optimal_std:.2f}"
            lines.append(
                f"{r.scenario:<10} {opt:>16} {r.gnn_cost:>9.2f} {r.gnn_gap:>7.2f}% "
                f"{r.cfm_cost:>9.2f} {r.cfm_gap:>7.2f}% {r.cfm_feasibility:>5.1f}% {r.cfm_worst_gap:>6.2f}%"
            )
        lines += ["", "Refinement improvement", f"{'Scenario':<10} {'Cost red.':>10} {'Gap red.':>10}"]
        for r in self.rows:
            lines.append(f"{r.scenario:<10} {r.cost_reduction:>9.2f}% {r.gap_reduction:>7.2f} pp")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"{stem}.json", "csv": out / f"{stem}.csv", "txt": out / f"{stem}.txt"}
        paths["json"].write_text(self.to_json())
        paths["csv"].write_text(self.to_csv())
        paths["txt"].write_text(self.format_table())
        return paths


def _gap(c, opt):
    return 100.0 * (np.asarray(c) - opt) / opt


def summarize(records: Sequence[dict], meta: dict | None = None) -> EvaluationReport:
    """Aggregate per-sample records into scenario rows, keeping first-seen scenario order."""
    order: list[str] = []
    groups: dict[str, list[dict]] = {}
    for rec in records:
        name = rec["scenario"]
        if name not in groups:
            order.append(name)
            groups[name] = []
        groups[name].append(rec)
    rows = []
    for name in order:
        g = groups[name]
        opt = np.array([float(r["optimal_cost"]) for r in g])
        gc = np.array([float(r["gnn_cost"]) for r in g])
        cc = np.array([float(r["cfm_cost"]) for r in g])
        gg, cg = _gap(gc, opt), _gap(cc, opt)
        rows.append(ScenarioRow(
            scenario=name,
            n_samples=len(g),
            optimal_mean=float(opt.mean()),
            optimal_std=float(opt.std()),
            gnn_cost=float(gc.mean()),
            gnn_gap=float(gg.mean()),
            gnn_feasibility=100.0 * float(np.mean([_truthy(r["gnn_feasible"]) for r in g])),
            gnn_worst_gap=float(gg.max()),
            cfm_cost=float(cc.mean()),
            cfm_gap=float(cg.mean()),
            cfm_feasibility=100.0 * float(np.mean([_truthy(r["cfm_feasible"]) for r in g])),
            cfm_worst_gap=float(cg.max()),
        ))
    return EvaluationReport(rows, meta or {})


def _truthy(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes")
    return bool(v)


def evaluate_models(gnn, cfm, system: PowerSystem,
                    scenarios: Sequence[ds.ScenarioSpec] = ds.EVALUATION_SCENARIOS,
                    seed: int = 0, n_steps: int = 30, proj: ProjectionConfig | None = None,
                    records: list | None = None) -> EvaluationReport:
    """Oracle, GNN-only (hard-projected) and refined (hard projection each Euler step) on each scenario.

    Scenario k draws its loads from ``derive_seed(seed, "eval", k)``. Per-sample
    rows are appended to ``records`` when given.
    """
    proj = proj or ProjectionConfig()
    recs = [] if records is None else records
    start = len(recs)
    for k, spec in enumerate(scenarios):
        data = ds.generate(system, spec, ds.derive_seed(seed, "eval", k))
        p_gnn = gnn_forward(gnn, data.loads, system, "infer", proj).numpy()
        p_cfm = refine(cfm, p_gnn, data.loads, system, n_steps, proj)
        c_gnn = np.asarray(cost(system, p_gnn))
        c_cfm = np.asarray(cost(system, p_cfm))
        ok_gnn = feasible_mask(p_gnn, data.loads, system, proj.feas_tol)
        ok_cfm = feasible_mask(p_cfm, data.loads, system, proj.feas_tol)
        for i in range(len(data)):
            recs.append({
                "scenario": spec.name,
                "index": i,
                "total_load": float(data.loads[i].sum()),
                "optimal_cost": float(data.cost[i]),
                "gnn_cost": float(c_gnn[i]),
                "gnn_feasible": bool(ok_gnn[i]),
                "cfm_cost": float(c_cfm[i]),
                "cfm_feasible": bool(ok_cfm[i]),
            })
    meta = {"seed": seed, "n_steps": n_steps, "feas_tol": proj.feas_tol,
            "scenarios": [asdict(s) for s in scenarios]}
    return summarize(recs[start:], meta)


def save_records(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in RECORD_FIELDS])


def load_records(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in RECORD_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}; expected a samples file written by 'evaluate'")
        return list(reader)
