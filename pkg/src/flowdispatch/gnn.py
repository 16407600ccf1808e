"""Stage 1: physics-informed graph network producing an initial dispatch."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import autodiff
from .grid import PowerSystem, cost, marginal_cost
from .projection import ProjectionConfig, hard_project, soft_balance_project, soft_clamp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CurriculumWeights:
    w_gap: float
    w_econ: float
    w_kkt: float
    w_balance: float
    w_limits: float
    w_direct: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class NearBoundConfig:
    kkt_eps: float = 0.5

    def __post_init__(self):
        if not self.kkt_eps > 0:
            raise ValueError("kkt_eps must be > 0")


def curriculum(rho: float) -> CurriculumWeights:
    """Stage-1 loss weights at training progress ``rho`` = epoch / max_epochs."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho={rho} outside [0, 1]")
    late = rho > 0.33
    return CurriculumWeights(
        w_gap=30.0 * (1.0 - 0.7 * rho),
        w_econ=20.0 if late else 5.0,
        w_kkt=10.0 if late else 0.0,
        w_balance=500.0,
        w_limits=250.0,
        w_direct=5.0 * (1.0 + 9.0 * rho),
    )


def normalized_adjacency(adj: torch.Tensor) -> torch.Tensor:
    """D^-1/2 A D^-1/2 with degrees taken from ``adj`` (which must carry self-loops)."""
    deg = adj.sum(-1)
    inv_sqrt = deg.rsqrt()
    return inv_sqrt[:, None] * adj * inv_sqrt[None, :]


def gcn_layer(h, adjacency, weight, ln_weight, ln_bias, eps: float = 1e-5):
    """ReLU(LN(sum_j A_ij / sqrt(d_i d_j) W h_j)).

    ``h`` is (..., n_nodes, d_in), ``weight`` is (d_out, d_in).
    """
    if h.shape[-1] != weight.shape[1] or h.shape[-2] != adjacency.shape[0]:
        raise ValueError(f"gcn_layer: features {tuple(h.shape)} vs W {tuple(weight.shape)}, A {tuple(adjacency.shape)}")
    agg = normalized_adjacency(adjacency) @ (h @ weight.T)
    return torch.relu(autodiff.layer_norm(agg, eps) * ln_weight + ln_bias)


class GNNModel(nn.Module):
    """Load embedding -> 2 GCN layers -> per-generator MLP head (128 -> 64 -> 1)."""

    def __init__(self, system: PowerSystem, hidden: int = 128, head_hidden: int = 64,
                 load_min=None, load_max=None):
        super().__init__()
        self.hidden, self.head_hidden = hidden, head_hidden
        self.embed = nn.Linear(1, hidden)
        self.gcn = nn.ParameterList(
            [nn.Parameter(torch.empty(hidden, hidden)) for _ in range(2)]
        )
        self.ln_weight = nn.ParameterList([nn.Parameter(torch.ones(hidden)) for _ in range(2)])
        self.ln_bias = nn.ParameterList([nn.Parameter(torch.zeros(hidden)) for _ in range(2)])
        self.head = nn.Sequential(nn.Linear(hidden, head_hidden), nn.ReLU(), nn.Linear(head_hidden, 1))
        for w in self.gcn:
            nn.init.kaiming_uniform_(w, a=5**0.5)
        self.register_buffer("adjacency", torch.tensor(system.adjacency(self_loops=True)))
        self.register_buffer("gen_bus", torch.tensor(system.gen_bus, dtype=torch.long))
        lo = np.zeros(system.n_buses) if load_min is None else np.asarray(load_min, dtype=float)
        hi = np.ones(system.n_buses) if load_max is None else np.asarray(load_max, dtype=float)
        self.register_buffer("load_min", torch.tensor(lo))
        self.register_buffer("load_max", torch.tensor(hi))
        self.to(torch.get_default_dtype())

    def set_normalization(self, loads: np.ndarray) -> None:
        self.load_min.copy_(torch.as_tensor(loads.min(0)))
        self.load_max.copy_(torch.as_tensor(loads.max(0)))

    def normalize(self, loads: torch.Tensor) -> torch.Tensor:
        span = self.load_max - self.load_min
        span = torch.where(span > 0, span, torch.ones_like(span))
        return (loads - self.load_min) / span

    def forward(self, loads: torch.Tensor) -> torch.Tensor:
        """Head output per generator, in units of that generator's range about its midpoint."""
        h = self.embed(self.normalize(loads)[..., None])
        for k in range(2):
            h = gcn_layer(h, self.adjacency, self.gcn[k], self.ln_weight[k], self.ln_bias[k])
        return self.head(h[..., self.gen_bus, :])[..., 0]

    def config(self) -> dict:
        return {"hidden": self.hidden, "head_hidden": self.head_hidden}


def raw_dispatch(head_out: torch.Tensor, system: PowerSystem) -> torch.Tensor:
    """Map head output to MW: 0 is the range midpoint, +-0.5 the limits."""
    lo = head_out.new_tensor(system.p_min)
    rng = head_out.new_tensor(system.p_max - system.p_min)
    return lo + rng * (0.5 + head_out)


def soft_project(raw: torch.Tensor, loads: torch.Tensor, system: PowerSystem, tau: float = 0.05):
    """Soft clamp, proportional balance shift, soft clamp again."""
    clamped = soft_clamp(raw, system.p_min, system.p_max, tau)
    return soft_balance_project(clamped, loads, system, tau)


def forward(model: GNNModel, loads, system: PowerSystem, mode: str = "infer",
            proj: ProjectionConfig | None = None) -> torch.Tensor:
    """Dispatch in MW: soft-projected in ``train`` mode, hard-projected in ``infer`` mode."""
    proj = proj or ProjectionConfig()
    dtype = next(model.parameters()).dtype
    loads = torch.as_tensor(loads, dtype=dtype)
    if loads.shape[-1] != system.n_buses:
        raise ValueError(f"loads have {loads.shape[-1]} entries, system has {system.n_buses} buses")
    raw = raw_dispatch(model(loads), system)
    if mode == "train":
        return soft_project(raw, loads, system, proj.tau)
    if mode == "raw":
        return raw
    if mode == "infer":
        with torch.no_grad():
            return hard_project(raw.detach().double(), loads.double(), system, proj)
    raise ValueError(f"unknown mode {mode!r}")


def stage1_loss(dispatch, optimal_dispatch, optimal_cost, loads, system: PowerSystem,
                weights: CurriculumWeights, near_bound: NearBoundConfig | None = None):
    """Weighted six-term Stage-1 loss. Returns (total, {term: value}).

    ``optimal_dispatch`` is accepted for interface symmetry; the terms only
    need the optimal cost.
    """
    near_bound = near_bound or NearBoundConfig()
    optimal_cost = torch.as_tensor(optimal_cost, dtype=dispatch.dtype)
    if (optimal_cost <= 0).any():
        raise ValueError("optimal cost must be positive")
    loads = torch.as_tensor(loads, dtype=dispatch.dtype)
    lo, hi = dispatch.new_tensor(system.p_min), dispatch.new_tensor(system.p_max)

    c = cost(system, dispatch)
    mc = marginal_cost(system, dispatch)
    lam_bar = mc.mean(-1, keepdim=True)
    near_min = (dispatch - lo).abs() < near_bound.kkt_eps
    near_max = (hi - dispatch).abs() < near_bound.kkt_eps
    kkt_min = (torch.relu(mc - lam_bar) * near_min).sum(-1)
    kkt_max = (torch.relu(lam_bar - mc) * near_max).sum(-1)
    imbalance = dispatch.sum(-1) - loads.sum(-1)
    violation = torch.relu(lo - dispatch) + torch.relu(dispatch - hi)

    terms = {
        "gap": (((c - optimal_cost) / optimal_cost) ** 2).mean(),
        "econ": autodiff.population_variance(mc).mean(),
        "kkt": (kkt_min + kkt_max).mean(),
        "balance": (imbalance**2).mean(),
        "limits": (violation**2).sum(-1).mean(),
        "direct": c.mean(),
    }
    w = weights.as_dict()
    total = sum(w["w_" + k] * v for k, v in terms.items())
    return total, terms


@dataclass
class Stage1Config:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    hidden: int = 128
    head_hidden: int = 64
    kkt_eps: float = 0.5
    tau: float = 0.05


def _as_arrays(dataset):
    if isinstance(dataset, dict):
        return dataset["loads"], dataset["dispatch"], dataset["cost"]
    loads = np.stack([s.loads for s in dataset])
    disp = np.stack([s.optimal_dispatch for s in dataset])
    costs = np.array([s.optimal_cost for s in dataset])
    return loads, disp, costs


def cost_gap_percent(system: PowerSystem, dispatch, optimal_cost) -> np.ndarray:
    c = np.asarray(cost(system, np.asarray(dispatch, dtype=float)))
    return 100.0 * (c - optimal_cost) / optimal_cost


def train_stage1(dataset, system: PowerSystem, config: Stage1Config | None = None, callback=None):
    """Train the GNN with the curriculum loss. Returns (model, per-epoch log records)."""
    cfg = config or Stage1Config()
    loads, opt_disp, opt_cost = _as_arrays(dataset)
    if len(loads) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(cfg.seed)
    model = GNNModel(system, cfg.hidden, cfg.head_hidden)
    model.set_normalization(loads)
    dtype = torch.get_default_dtype()
    L = torch.as_tensor(loads, dtype=dtype)
    P = torch.as_tensor(opt_disp, dtype=dtype)
    C = torch.as_tensor(opt_cost, dtype=dtype)
    proj = ProjectionConfig(tau=cfg.tau)
    near = NearBoundConfig(cfg.kkt_eps)
    state = autodiff.OptimizerState(lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = list(model.parameters())
    history = []
    n = len(L)
    for epoch in range(1, cfg.epochs + 1):
        rho = epoch / cfg.epochs
        weights = curriculum(rho)
        order = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        total_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred = forward(model, L[idx], system, "train", proj)
            total, terms = stage1_loss(pred, P[idx], C[idx], L[idx], system, weights, near)
            autodiff.check_finite({"total": total, **terms})
            for p in params:
                p.grad = None
            total.backward()
            autodiff.adam_step(params, state)
            k = len(idx)
            total_sum += total.item() * k
            for name, v in terms.items():
                sums[name] = sums.get(name, 0.0) + v.item() * k
        with torch.no_grad():
            pred = forward(model, L, system, "infer", proj).numpy()
        gap = cost_gap_percent(system, pred, opt_cost)
        record = {
            "epoch": epoch,
            "rho": rho,
            "lr": state.lr,
            "loss": total_sum / n,
            "terms": {k: v / n for k, v in sums.items()},
            "weights": weights.as_dict(),
            "mean_gap_pct": float(gap.mean()),
            "feasible_rate": float(_feasible_rate(pred, loads, system, proj.feas_tol)),
        }
        history.append(record)
        log.info("stage1 epoch %d loss %.4f gap %.3f%%", epoch, record["loss"], record["mean_gap_pct"])
        if callback is not None:
            callback(record)
    return model, history


def _feasible_rate(pred, loads, system, tol):
    from .projection import feasible_mask

    return feasible_mask(pred, loads, system, tol).mean()


def model_params(model: nn.Module) -> dict[str, torch.Tensor]:
    return dict(model.state_dict())


def save_gnn(path, model: GNNModel) -> None:
    autodiff.save_checkpoint(path, model_params(model), {"kind": "gnn", **model.config()})


def load_gnn(path, system: PowerSystem) -> GNNModel:
    params, meta = autodiff.load_checkpoint(path)
    if meta.get("kind") != "gnn":
        raise ValueError(f"{path} is not a GNN checkpoint (kind={meta.get('kind')!r})")
    model = GNNModel(system, meta["hidden"], meta["head_hidden"])
    model.load_state_dict({k: v.to(model.adjacency.dtype) if v.is_floating_point() else v
                           for k, v in params.items()})
    return model
