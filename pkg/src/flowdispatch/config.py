"""Run configuration (JSON file plus CLI overrides) and the trained-model bundle."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cfm import Stage2Config, VectorFieldModel, load_cfm
from .gnn import GNNModel, Stage1Config, load_gnn
from .grid import PowerSystem, build_case30, load_case

BUNDLE_FORMAT = "flowdispatch-bundle"
BUNDLE_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message: str, hint: str = ""):
        self.hint = hint
        super().__init__(message)


@dataclass
class RunConfig:
    """Everything a full run needs. Defaults reproduce the reference setup.

    Keys: case (path to a case JSON, null for the built-in IEEE 30-bus),
    train_data (CSV path, null to generate), n_train, train_scale_lo,
    train_scale_hi, seed, out_dir, stage1 {epochs, lr, batch_size, seed,
    hidden, head_hidden, kkt_eps, tau}, stage2 {epochs, lr, weight_decay,
    batch_size, n_steps_train, n_steps_eval, clip_norm, rho_epochs, seed,
    hidden, n_blocks, train_projection, monitor_samples}.
    """

    case: str | None = None
    train_data: str | None = None
    n_train: int = 20000
    train_scale_lo: float = 0.70
    train_scale_hi: float = 1.00
    seed: int = 0
    out_dir: str = "run"
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        s1 = _build(Stage1Config, doc.pop("stage1", {}), "stage1")
        s2 = _build(Stage2Config, doc.pop("stage2", {}), "stage2")
        top = _build(cls, doc, "top level", skip={"stage1", "stage2"})
        top.stage1, top.stage2 = s1, s2
        return top

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found", "check the --config path") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}",
                              "the config file is a JSON object; see README for the key list") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(doc)

    def system(self) -> PowerSystem:
        return build_case30() if self.case is None else load_case(self.case)


def _build(kind, doc, where: str, skip=frozenset()):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {where} must be an object")
    known = {f.name for f in fields(kind)} - set(skip)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} in {where}", f"valid keys: {sorted(known)}")
    try:
        return kind(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from None


def write_bundle(out_dir: str | Path, gnn: GNNModel, cfm: VectorFieldModel, case: str | None,
                 gnn_file: str = "gnn.npz", cfm_file: str = "cfm.npz") -> Path:
    """Write ``bundle.json`` pointing at both checkpoints (paths relative to the bundle)."""
    doc = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "case": case,
        "gnn": gnn_file,
        "cfm": cfm_file,
        "normalization": {
            "load_min": gnn.load_min.tolist(),
            "load_max": gnn.load_max.tolist(),
            "total_load_scale": float(cfm.load_scale),
        },
    }
    path = Path(out_dir) / "bundle.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_bundle(path: str | Path) -> tuple[PowerSystem, GNNModel, VectorFieldModel]:
    path = Path(path)
    if path.is_dir():
        path = path / "bundle.json"
    if not path.exists():
        raise ConfigError(f"model bundle {path} not found",
                          "run 'flowdispatch train-gnn' then 'flowdispatch train-cfm' with the same --out-dir")
    doc = json.loads(path.read_text())
    if doc.get("format") != BUNDLE_FORMAT or doc.get("version") != BUNDLE_VERSION:
        raise ConfigError(f"{path} is not a version-{BUNDLE_VERSION} model bundle")
    system = build_case30() if doc.get("case") is None else load_case(doc["case"])
    base = path.parent
    for key in ("gnn", "cfm"):
        if not (base / doc[key]).exists():
            raise ConfigError(f"checkpoint {base / doc[key]} referenced by {path} is missing",
                              f"retrain with 'flowdispatch train-{key}'")
    gnn = load_gnn(base / doc["gnn"], system)
    cfm = load_cfm(base / doc["cfm"], system)
    return system, gnn, cfm
