"""Differentiation plumbing: a few tensor ops, Adam/AdamW, LR schedule, clipping, checkpoints.

Reverse-mode differentiation itself is torch autograd; this module adds the
pieces the training loops need on top of it.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_FORMAT = "flowdispatch-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


def population_variance(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    mean = x.mean(dim, keepdim=True)
    return ((x - mean) ** 2).mean(dim)


def layer_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalise over the last axis, no affine transform."""
    mean = x.mean(-1, keepdim=True)
    var = ((x - mean) ** 2).mean(-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def check_finite(terms: dict[str, torch.Tensor]) -> None:
    """Raise NonFiniteError naming the first non-finite loss term."""
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NonFiniteError(f"loss term {name!r} is not finite ({value.detach().cpu().numpy()})")


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


@torch.no_grad()
def _adam(params, state: OptimizerState, decoupled: bool) -> None:
    params = list(params)
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for p, m, v in zip(params, state.exp_avg, state.exp_avg_sq):
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if decoupled and state.weight_decay:
            p.mul_(1 - state.lr * state.weight_decay)
        elif state.weight_decay:
            g = g + state.weight_decay * p
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)


def adam_step(params, state: OptimizerState) -> None:
    """In-place Adam update from ``p.grad`` (L2-coupled weight decay if set)."""
    _adam(params, state, decoupled=False)


def adamw_step(params, state: OptimizerState) -> None:
    """In-place AdamW update (decoupled weight decay)."""
    _adam(params, state, decoupled=True)


def cosine_anneal(lr_base: float, epoch: float, total_epochs: float, lr_min: float = 0.0) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr_base - lr_min) * (1 + math.cos(math.pi * epoch / total_epochs))


@torch.no_grad()
def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
    if norm > max_norm:
        for g in grads:
            g.mul_(max_norm / norm)
    return norm


def save_checkpoint(path: str | Path, params: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write named arrays to an ``.npz`` archive with a JSON header entry.

    The header records format name, version, shapes and dtypes plus free-form
    ``meta`` (model hyperparameters, normalisation statistics).
    """
    arrays = {name: t.detach().cpu().numpy() for name, t in params.items()}
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": {k: {"shape": list(a.shape), "dtype": str(a.dtype)} for k, a in arrays.items()},
        "meta": meta or {},
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
            params = {}
            for name, info in header["params"].items():
                arr = data[name]
                if list(arr.shape) != info["shape"]:
                    raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, header says {info['shape']}")
                params[name] = torch.from_numpy(arr.copy())
    except (OSError, KeyError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    return params, header["meta"]


def numerical_grad(fn, x: torch.Tensor, h: float = 1e-6, index=None) -> torch.Tensor:
    """Central finite differences of scalar ``fn`` w.r.t. ``x`` (all entries or a list of flat indices)."""
    x = x.detach().clone()
    flat = x.view(-1)
    idx = range(flat.numel()) if index is None else index
    out = torch.zeros_like(flat)
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.view_as(x)
