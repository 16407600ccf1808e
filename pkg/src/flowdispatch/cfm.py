"""Stage 2: conditional flow matching refiner and its Euler rollout."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import autodiff
from .grid import PowerSystem, cost
from .projection import ProjectionConfig, hard_project_totals, soft_balance_project

log = logging.getLogger(__name__)

TIME_FREQS = 32


def time_embed(t) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1]: sin(2^k pi t) for k < 32, then the matching cosines.

    Computed in double precision (2^31 pi t needs it), returned in the
    default dtype. Output shape is ``t.shape + (64,)``.
    """
    t = torch.as_tensor(t, dtype=torch.float64)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("time must lie in [0, 1]")
    freqs = (2.0 ** torch.arange(TIME_FREQS, dtype=torch.float64)) * math.pi
    ang = t[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], -1).to(torch.get_default_dtype())


def interpolate(p0, p1, t):
    t = torch.as_tensor(t, dtype=p0.dtype)
    if t.ndim == p0.ndim - 1:
        t = t[..., None]
    return (1 - t) * p0 + t * p1


def path_velocity(p0, p1):
    return p1 - p0


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h):
        return h + self.fc2(nn.functional.silu(self.fc1(nn.functional.silu(self.norm(h)))))


class VectorFieldModel(nn.Module):
    """v(p, t, P_total) = ResNet([p_norm, time_embed(t), P_total / sum p_max]) * (p_max - p_min)."""

    def __init__(self, system: PowerSystem, hidden: int = 256, n_blocks: int = 3):
        super().__init__()
        n_g = system.n_generators
        self.hidden, self.n_blocks = hidden, n_blocks
        self.inp = nn.Linear(n_g + 2 * TIME_FREQS + 1, hidden)
        self.blocks = nn.ModuleList([ResidualBlock(hidden) for _ in range(n_blocks)])
        self.out_norm = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, n_g)
        # Zero field at initialisation: the untrained refiner leaves p0 in place.
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.register_buffer("p_min", torch.tensor(system.p_min))
        self.register_buffer("p_range", torch.tensor(system.p_max - system.p_min))
        self.register_buffer("load_scale", torch.tensor(float(system.p_max.sum())))
        self.to(torch.get_default_dtype())

    def forward(self, p, t, total_load):
        p_norm = (p - self.p_min) / self.p_range
        t = torch.as_tensor(t, dtype=torch.float64)
        if t.ndim == 0:
            t = t.expand(p.shape[:-1])
        temb = time_embed(t).to(p.dtype)
        z = torch.cat([p_norm, temb, (total_load / self.load_scale)[..., None]], -1)
        h = self.inp(z)
        for block in self.blocks:
            h = block(h)
        return self.out(nn.functional.silu(self.out_norm(h))) * self.p_range

    def config(self) -> dict:
        return {"hidden": self.hidden, "n_blocks": self.n_blocks}


def fm_loss(model, p0, p1, t, total_load):
    """Batch mean of ||v(p_t, t) - (p1 - p0)||^2 along the straight path."""
    pt = interpolate(p0, p1, t)
    err = model(pt, t, total_load) - path_velocity(p0, p1)
    return (err**2).sum(-1).mean()


def ode_refine(model, p0, loads, system: PowerSystem, n_steps: int = 30,
               project_each_step: bool = True, projection: str = "hard",
               cfg: ProjectionConfig | None = None, trajectory: list | None = None):
    """Forward Euler from t=0 to t=1 with dt = 1/n_steps.

    ``projection`` selects the per-step operator: ``"hard"`` (the iterative
    clamp-and-rebalance) or ``"soft"`` (differentiable balance shift + soft
    clamp). Intermediate states are appended to ``trajectory`` if given.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    cfg = cfg or ProjectionConfig()
    loads = torch.as_tensor(loads, dtype=p0.dtype)
    total = loads.sum(-1)
    dt = 1.0 / n_steps
    p = p0
    for n in range(n_steps):
        t = torch.full(p.shape[:-1], n * dt, dtype=torch.float64)
        p = p + dt * model(p, t, total)
        if project_each_step:
            if projection == "hard":
                p = hard_project_totals(p, total, system, cfg)
            elif projection == "soft":
                p = soft_balance_project(p, loads, system, cfg.tau)
            else:
                raise ValueError(f"unknown projection {projection!r}")
        if trajectory is not None:
            trajectory.append(p.detach().clone())
    return p


@dataclass(frozen=True)
class Stage2Weights:
    w_fm: float
    w_cost: float
    w_improve: float
    w_distance: float
    w_balance: float
    w_limits: float
    delta: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def stage2_weights(rho: float) -> Stage2Weights:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho={rho} outside [0, 1]")
    return Stage2Weights(
        w_fm=max(10.0 * (1.0 - rho), 1.0),
        w_cost=100.0 * (1.0 + 2.0 * rho),
        w_improve=50.0 * rho,
        w_distance=30.0 * rho,
        w_balance=50.0,
        w_limits=25.0,
    )


def stage2_loss(model, p0, p1, loads, system: PowerSystem, weights: Stage2Weights, t,
                n_steps: int = 20, projection: str = "soft", cfg: ProjectionConfig | None = None):
    """Flow matching plus physics terms on the rolled-out refined dispatch.

    Returns (total, {term: value}, refined).
    """
    loads = torch.as_tensor(loads, dtype=p0.dtype)
    total_load = loads.sum(-1)
    refined = ode_refine(model, p0, loads, system, n_steps, True, projection, cfg)
    lo, hi = p0.new_tensor(system.p_min), p0.new_tensor(system.p_max)
    c_ref = cost(system, refined)
    c0 = cost(system, p0)
    violation = torch.relu(lo - refined) + torch.relu(refined - hi)
    terms = {
        "fm": fm_loss(model, p0, p1, t, total_load),
        "cost": c_ref.mean(),
        "improve": torch.relu(c_ref - c0 + weights.delta).mean(),
        "distance": ((refined - p1) ** 2).sum(-1).mean(),
        "balance": ((refined.sum(-1) - total_load) ** 2).mean(),
        "limits": (violation**2).sum(-1).mean(),
    }
    w = weights.as_dict()
    total = sum(w["w_" + k] * v for k, v in terms.items())
    return total, terms, refined


@dataclass
class Stage2Config:
    epochs: int = 100
    lr: float = 3e-3
    weight_decay: float = 1e-5
    batch_size: int = 256
    n_steps_train: int = 20
    n_steps_eval: int = 30
    clip_norm: float = 0.5
    rho_epochs: int = 20
    seed: int = 0
    hidden: int = 256
    n_blocks: int = 3
    train_projection: str = "hard"
    monitor_samples: int = 256


def train_stage2(dataset, system: PowerSystem, gnn, config: Stage2Config | None = None, callback=None):
    """Train the refiner against a frozen Stage-1 model. Returns (model, per-epoch log records)."""
    from .gnn import _as_arrays, forward as gnn_forward

    cfg = config or Stage2Config()
    loads, opt_disp, opt_cost = _as_arrays(dataset)
    if len(loads) == 0:
        raise ValueError("empty dataset")
    for prm in gnn.parameters():
        prm.requires_grad_(False)
    dtype = torch.get_default_dtype()
    L = torch.as_tensor(loads, dtype=dtype)
    P1 = torch.as_tensor(opt_disp, dtype=dtype)
    C = torch.as_tensor(opt_cost, dtype=dtype)
    proj = ProjectionConfig()
    with torch.no_grad():
        P0 = torch.cat([gnn_forward(gnn, L[i:i + 1024], system, "infer", proj)
                        for i in range(0, len(L), 1024)]).to(dtype)

    torch.manual_seed(cfg.seed)
    model = VectorFieldModel(system, cfg.hidden, cfg.n_blocks)
    state = autodiff.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = list(model.parameters())
    n = len(L)
    mon = slice(0, min(cfg.monitor_samples, n))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        rho = min(epoch / cfg.rho_epochs, 1.0)
        weights = stage2_weights(rho)
        state.lr = autodiff.cosine_anneal(cfg.lr, epoch - 1, cfg.epochs)
        order = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        total_sum = 0.0
        gap_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            t = 0.1 + 0.8 * torch.rand(len(idx), generator=gen, dtype=torch.float64)
            total, terms, refined = stage2_loss(
                model, P0[idx], P1[idx], L[idx], system, weights, t,
                cfg.n_steps_train, cfg.train_projection, proj,
            )
            autodiff.check_finite({"total": total, **terms})
            for prm in params:
                prm.grad = None
            total.backward()
            autodiff.clip_grad_norm(params, cfg.clip_norm)
            autodiff.adamw_step(params, state)
            k = len(idx)
            total_sum += total.item() * k
            for name, v in terms.items():
                sums[name] = sums.get(name, 0.0) + v.item() * k
            with torch.no_grad():
                gap_sum += (100 * (cost(system, refined) - C[idx]) / C[idx]).sum().item()
        with torch.no_grad():
            ref = ode_refine(model, P0[mon], L[mon], system, cfg.n_steps_eval, True, "hard", proj)
        mon_gap = 100 * (cost(system, ref.double().numpy()) - opt_cost[mon]) / opt_cost[mon]
        record = {
            "epoch": epoch,
            "rho": rho,
            "lr": state.lr,
            "loss": total_sum / n,
            "terms": {k: v / n for k, v in sums.items()},
            "weights": weights.as_dict(),
            "train_rollout_gap_pct": gap_sum / n,
            "refined_gap_pct": float(np.mean(mon_gap)),
        }
        history.append(record)
        log.info("stage2 epoch %d loss %.4f fm %.4f gap %.3f%%", epoch, record["loss"],
                 record["terms"]["fm"], record["refined_gap_pct"])
        if callback is not None:
            callback(record)
    return model, history


def save_cfm(path, model: VectorFieldModel) -> None:
    autodiff.save_checkpoint(path, dict(model.state_dict()), {"kind": "cfm", **model.config()})


def load_cfm(path, system: PowerSystem) -> VectorFieldModel:
    params, meta = autodiff.load_checkpoint(path)
    if meta.get("kind") != "cfm":
        raise ValueError(f"{path} is not a CFM checkpoint (kind={meta.get('kind')!r})")
    model = VectorFieldModel(system, meta["hidden"], meta["n_blocks"])
    model.load_state_dict({k: v.to(model.p_min.dtype) for k, v in params.items()})
    return model


def refine(model: VectorFieldModel, p0, loads, system: PowerSystem, n_steps: int = 30,
           cfg: ProjectionConfig | None = None) -> np.ndarray:
    """Inference path: double-precision rollout with hard projection after every step."""
    if next(model.parameters()).dtype != torch.float64:
        model = copy.deepcopy(model).double()
    with torch.no_grad():
        p0 = torch.tensor(np.asarray(p0, dtype=float))
        loads = torch.tensor(np.asarray(loads, dtype=float))
        p = ode_refine(model, p0, loads, system, n_steps, True, "hard", cfg)
    return p.numpy()
