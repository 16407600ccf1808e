import numpy as np
import pytest
import torch

from flowdispatch.autodiff import (
    NonFiniteError,
    OptimizerState,
    adam_step,
    adamw_step,
    check_finite,
    clip_grad_norm,
    cosine_anneal,
    layer_norm,
    load_checkpoint,
    numerical_grad,
    population_variance,
    save_checkpoint,
)

OPS = {
    "layer_norm": lambda x: (layer_norm(x) * torch.arange(1.0, x.shape[-1] + 1, dtype=x.dtype)).sum(),
    "variance": lambda x: population_variance(x).sum(),
    "silu": lambda x: torch.nn.functional.silu(x).sum(),
    "sigmoid": lambda x: (torch.sigmoid(x) ** 2).sum(),
    "softplus_mix": lambda x: (torch.nn.functional.softplus(x) * torch.tanh(x)).sum(),
}


def _rel_err(a, b):
    return float((a - b).abs().max() / max(float(b.abs().max()), 1e-12))


@pytest.mark.parametrize("name", sorted(OPS))
def test_ops_match_finite_differences_double(name):
    fn = OPS[name]
    gen = torch.Generator().manual_seed(5)
    x = torch.randn(3, 7, generator=gen, dtype=torch.float64, requires_grad=True)
    fn(x).backward()
    fd = numerical_grad(fn, x, h=1e-5)
    assert _rel_err(x.grad, fd) < 1e-7


@pytest.mark.parametrize("name", sorted(OPS))
def test_ops_match_finite_differences_single(name):
    fn = OPS[name]
    gen = torch.Generator().manual_seed(6)
    x64 = torch.randn(3, 7, generator=gen, dtype=torch.float64)
    x32 = x64.float().requires_grad_(True)
    fn(x32).backward()
    fd = numerical_grad(fn, x64, h=1e-5)
    assert _rel_err(x32.grad.double(), fd) < 1e-4


def test_relu_examples():
    x = torch.tensor([-1.0, 2.0], requires_grad=True)
    y = torch.relu(x)
    y.sum().backward()
    assert y.tolist() == [0.0, 2.0]
    assert x.grad.tolist() == [0.0, 1.0]


def test_layer_norm_constant_vector():
    x = torch.full((5,), 3.0, requires_grad=True)
    y = layer_norm(x)
    assert torch.equal(y, torch.zeros(5))
    y.sum().backward()
    assert torch.isfinite(x.grad).all()


def test_layer_norm_standardises():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=torch.float64)
    y = layer_norm(x, eps=0.0)
    assert float(y.mean()) == pytest.approx(0.0, abs=1e-15)
    assert float((y**2).mean()) == pytest.approx(1.0)


def test_variance_of_constant():
    x = torch.tensor([2.0, 2.0, 2.0], requires_grad=True)
    v = population_variance(x)
    v.backward()
    assert v.item() == 0.0
    assert torch.equal(x.grad, torch.zeros(3))


def test_adam_zero_gradient_is_noop():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    p.grad = torch.zeros(2)
    state = OptimizerState(lr=1e-3)
    adam_step([p], state)
    assert p.tolist() == [1.0, -2.0]


def test_adamw_zero_gradient_only_decays():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    p.grad = torch.zeros(2, dtype=torch.float64)
    state = OptimizerState(lr=3e-3, weight_decay=1e-5)
    adamw_step([p], state)
    np.testing.assert_allclose(p.detach().numpy(), np.array([1.0, -2.0]) * (1 - 3e-3 * 1e-5), rtol=1e-15)


@pytest.mark.parametrize("step_fn", [adam_step, adamw_step])
def test_first_step_magnitude_is_lr(step_fn):
    p = torch.nn.Parameter(torch.zeros(4, dtype=torch.float64))
    p.grad = torch.ones(4, dtype=torch.float64)
    state = OptimizerState(lr=1e-3)
    step_fn([p], state)
    # m_hat = 1, v_hat = 1 after bias correction: step = lr / (1 + eps).
    np.testing.assert_allclose(p.detach().numpy(), -1e-3 / (1 + 1e-8), rtol=1e-12)


def test_step_count_increments():
    p = torch.nn.Parameter(torch.zeros(2))
    p.grad = torch.ones(2)
    state = OptimizerState(lr=0.1)
    for k in range(1, 4):
        adam_step([p], state)
        assert state.step == k


def test_adam_matches_torch():
    torch.manual_seed(0)
    a = torch.nn.Parameter(torch.randn(5, dtype=torch.float64))
    b = torch.nn.Parameter(a.detach().clone())
    ref = torch.optim.AdamW([b], lr=3e-3, weight_decay=1e-5)
    state = OptimizerState(lr=3e-3, weight_decay=1e-5)
    for _ in range(10):
        g = torch.randn(5, dtype=torch.float64)
        a.grad, b.grad = g.clone(), g.clone()
        adamw_step([a], state)
        ref.step()
    np.testing.assert_allclose(a.detach().numpy(), b.detach().numpy(), rtol=1e-12)


def test_cosine_anneal():
    assert cosine_anneal(1e-3, 0, 40) == 1e-3
    assert cosine_anneal(1e-3, 40, 40, 1e-5) == pytest.approx(1e-5)
    assert cosine_anneal(1e-3, 20, 40, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    lrs = [cosine_anneal(1.0, e, 10) for e in range(11)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_anneal(1.0, 11, 10)


def _with_grad(values):
    p = torch.nn.Parameter(torch.zeros(len(values), dtype=torch.float64))
    p.grad = torch.tensor(values, dtype=torch.float64)
    return p


def test_clip_below_threshold_unchanged():
    p = _with_grad([0.3, 0.0])
    assert clip_grad_norm([p], 0.5) == pytest.approx(0.3)
    assert p.grad.tolist() == [0.3, 0.0]


def test_clip_scales_to_max_norm():
    p, q = _with_grad([1.2, 0.0]), _with_grad([1.6])
    assert clip_grad_norm([p, q], 0.5) == pytest.approx(2.0)
    np.testing.assert_allclose(p.grad.numpy(), [0.3, 0.0])
    np.testing.assert_allclose(q.grad.numpy(), [0.4])


def test_clip_zero_gradient():
    p = _with_grad([0.0, 0.0])
    assert clip_grad_norm([p], 0.5) == 0.0
    assert p.grad.tolist() == [0.0, 0.0]


def test_check_finite_names_term():
    check_finite({"a": torch.tensor(1.0)})
    with pytest.raises(NonFiniteError, match="'bad'"):
        check_finite({"a": torch.tensor(1.0), "bad": torch.tensor(float("nan"))})


def test_checkpoint_roundtrip(tmp_path):
    params = {"w": torch.randn(3, 4), "b": torch.arange(5, dtype=torch.float64)}
    path = tmp_path / "m.npz"
    save_checkpoint(path, params, {"hidden": 128, "note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"hidden": 128, "note": "x"}
    for k, v in params.items():
        assert torch.equal(loaded[k], v) and loaded[k].dtype == v.dtype


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, w=np.zeros(3))
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_bytes(b"not a zip")
    with pytest.raises(ValueError):
        load_checkpoint(path)
