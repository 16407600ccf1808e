"""Command-line entry point: generate, train-gnn, train-cfm, solve, evaluate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from .cfm import save_cfm, train_stage2
from .config import ConfigError, RunConfig, load_bundle, write_bundle
from .evaluation import evaluate_models, load_records, save_records, summarize
from .gnn import load_gnn, save_gnn, train_stage1
from .grid import GridError
from .oracle import InfeasibleLoadError, solve_economic_dispatch

log = logging.getLogger("flowdispatch")


class CliError(Exception):
    def __init__(self, message: str, hint: str = ""):
        self.hint = hint
        super().__init__(message)


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "case", None):
        cfg.case = args.case
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.stage1 = replace(cfg.stage1, seed=args.seed)
        cfg.stage2 = replace(cfg.stage2, seed=args.seed)
    return cfg


def _training_data(cfg: RunConfig, system, path):
    path = path or cfg.train_data
    if path:
        if not Path(path).exists():
            raise CliError(f"dataset {path} not found", "create it with 'flowdispatch generate --out <file>'")
        return ds.load(path, system)
    spec = ds.ScenarioSpec("train", cfg.train_scale_lo, cfg.train_scale_hi, cfg.n_train)
    log.info("no --data given: generating %d training samples", cfg.n_train)
    return ds.generate(system, spec, ds.derive_seed(cfg.seed, "train"))


def _log_writer(path: Path):
    fh = open(path, "w")

    def write(record):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    return fh, write


def cmd_generate(args) -> int:
    cfg = _config(args)
    system = cfg.system()
    spec = ds.ScenarioSpec("generated", args.scale_lo, args.scale_hi, args.n)
    lo, hi = system.capacity_range()
    total = system.base_load.sum()
    if args.scale_lo * total < lo or args.scale_hi * total > hi:
        raise CliError(
            f"scale range [{args.scale_lo}, {args.scale_hi}] gives totals outside the servable "
            f"range [{lo:.1f}, {hi:.1f}] MW",
            f"choose scales within [{lo / total:.3f}, {hi / total:.3f}]",
        )
    data = ds.generate(system, spec, ds.derive_seed(cfg.seed, args.namespace))
    ds.save(data, args.out)
    print(f"wrote {len(data)} samples to {args.out}")
    return 0


def cmd_train_gnn(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.stage1 = replace(cfg.stage1, epochs=args.epochs)
    system = cfg.system()
    data = _training_data(cfg, system, args.data)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fh, write = _log_writer(out / "stage1_log.jsonl")
    with fh:
        model, history = train_stage1(data.as_dict(), system, cfg.stage1, write)
    save_gnn(out / "gnn.npz", model)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    last = history[-1]
    print(f"stage 1 done: {last['epoch']} epochs, train gap {last['mean_gap_pct']:.3f}%, "
          f"checkpoint {out / 'gnn.npz'}")
    return 0


def cmd_train_cfm(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.stage2 = replace(cfg.stage2, epochs=args.epochs)
    system = cfg.system()
    out = Path(cfg.out_dir)
    gnn_path = Path(args.gnn) if args.gnn else out / "gnn.npz"
    if not gnn_path.exists():
        raise CliError(f"stage-1 checkpoint {gnn_path} not found",
                       "run 'flowdispatch train-gnn' first, or pass --gnn <checkpoint>")
    gnn = load_gnn(gnn_path, system)
    data = _training_data(cfg, system, args.data)
    out.mkdir(parents=True, exist_ok=True)
    fh, write = _log_writer(out / "stage2_log.jsonl")
    with fh:
        model, history = train_stage2(data.as_dict(), system, gnn, cfg.stage2, write)
    save_cfm(out / "cfm.npz", model)
    if gnn_path.resolve() != (out / "gnn.npz").resolve():
        save_gnn(out / "gnn.npz", gnn)
    bundle = write_bundle(out, gnn, model, cfg.case)
    print(f"stage 2 done: {history[-1]['epoch']} epochs, refined gap {history[-1]['refined_gap_pct']:.3f}%, "
          f"bundle {bundle}")
    return 0


def _read_loads(path: str) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise CliError(f"loads file {path} not found") from None
    try:
        values = [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", "the loads file holds numbers separated by commas or whitespace") from None
    if not values:
        raise CliError(f"{path} is empty", "give one value per bus, or a single total in MW")
    return np.array(values)


def cmd_solve(args) -> int:
    cfg = _config(args)
    system = cfg.system()
    loads = _read_loads(args.loads)
    if len(loads) == 1:
        loads = float(loads[0])
    elif len(loads) != system.n_buses:
        raise CliError(f"{args.loads} has {len(loads)} values, system has {system.n_buses} buses",
                       "give one value per bus, or a single total in MW")
    try:
        sol = solve_economic_dispatch(system, loads)
    except InfeasibleLoadError as exc:
        lo, hi = system.capacity_range()
        raise CliError(str(exc), f"total load must lie in [{lo:.1f}, {hi:.1f}] MW") from None
    k = sol.kkt
    result = {
        "dispatch_mw": sol.dispatch.tolist(),
        "cost": sol.cost,
        "lambda": k.lam,
        "kkt": {
            "stationarity": k.stationarity_residual,
            "complementarity": k.complementarity_residual,
            "dual_feasibility": k.dual_feasibility_residual,
            "balance": k.balance_residual,
        },
    }
    if args.json:
        print(json.dumps(result, indent=2))
        return 0
    for g, p in zip(system.generators, sol.dispatch):
        print(f"G{g.id} (bus {g.bus + 1}): {p:10.4f} MW")
    print(f"cost      {sol.cost:.4f} $/h")
    print(f"lambda    {k.lam:.6f} $/MWh")
    for name, v in result["kkt"].items():
        print(f"{name:<18}{v:.3e}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    bundle = args.bundle or cfg.out_dir
    try:
        system, gnn, cfm = load_bundle(bundle)
    except ConfigError as exc:
        raise CliError(str(exc), exc.hint) from None
    records: list[dict] = []
    report = evaluate_models(gnn, cfm, system, ds.EVALUATION_SCENARIOS, cfg.seed,
                             cfg.stage2.n_steps_eval, records=records)
    out = Path(args.report_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_records(records, out / "samples.csv")
    paths = report.write(out)
    print(report.format_table(), end="")
    print(f"wrote {paths['json']}, {paths['csv']}, {paths['txt']} and {out / 'samples.csv'}")
    return 0


def cmd_report(args) -> int:
    if not Path(args.samples).exists():
        raise CliError(f"samples file {args.samples} not found", "run 'flowdispatch evaluate' to produce samples.csv")
    report = summarize(load_records(args.samples), {"source": str(args.samples)})
    if args.out_dir:
        report.write(args.out_dir)
    print(report.format_table(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowdispatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run configuration (see README for keys)")
        p.add_argument("--case", help="case JSON file (default: built-in IEEE 30-bus)")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        if out:
            p.add_argument("--out-dir", help="run directory for checkpoints, logs and reports")

    p = sub.add_parser("generate", help="sample loads and solve them to optimality")
    common(p, out=False)
    p.add_argument("--scale-lo", type=float, default=0.70)
    p.add_argument("--scale-hi", type=float, default=1.00)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--namespace", choices=sorted(ds.SEED_NAMESPACES), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-gnn", help="stage 1: train the graph network")
    common(p)
    p.add_argument("--data", help="training CSV (default: generate per config)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_gnn)

    p = sub.add_parser("train-cfm", help="stage 2: train the flow-matching refiner")
    common(p)
    p.add_argument("--data", help="training CSV (default: generate per config)")
    p.add_argument("--gnn", help="stage-1 checkpoint (default: <out-dir>/gnn.npz)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_cfm)

    p = sub.add_parser("solve", help="exact economic dispatch for one load vector")
    common(p, out=False)
    p.add_argument("--loads", required=True, help="file with per-bus loads or a single total (MW)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("evaluate", help="five-scenario evaluation of a trained bundle")
    common(p)
    p.add_argument("--bundle", help="bundle.json or its directory (default: <out-dir>)")
    p.add_argument("--report-dir", help="where to write reports (default: <out-dir>)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-aggregate a samples.csv into report tables")
    p.add_argument("samples")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.hint:
            print(f"hint: {exc.hint}", file=sys.stderr)
        return 2
    except (GridError, ds.DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
