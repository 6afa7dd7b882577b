import numpy as np
import pytest
import torch

from convexp import autodiff
from convexp import exponential as ex
from convexp.linop import Conv2dOperator
from convexp.verify import gradcheck_model, randomize_


def test_grad_of_quadratic():
    a = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64, requires_grad=True)
    (g,) = autodiff.grad((a ** 2).sum() + 3 * a[0], [a])
    np.testing.assert_allclose(g.numpy(), [5.0, -4.0, 6.0])


def test_grad_detached_parameter_warns_and_is_zero():
    a = torch.ones(2, dtype=torch.float64, requires_grad=True)
    b = torch.ones(3, dtype=torch.float64, requires_grad=True)
    with pytest.warns(autodiff.DetachedParameterWarning):
        ga, gb = autodiff.grad(a.sum(), [a, b])
    assert torch.equal(gb, torch.zeros(3, dtype=torch.float64))


def test_grad_requires_scalar():
    a = torch.ones(2, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError):
        autodiff.grad(a * 2, [a])


def test_gradcheck_exact_on_smooth_function(rng):
    w = torch.tensor(rng.standard_normal(4), requires_grad=True)
    err = autodiff.gradcheck(lambda: torch.tanh(w).prod() + (w ** 3).sum(), [w])
    assert err < 1e-7


def test_gradcheck_detects_wrong_backward():
    class BadSquare(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x * x

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2.2 * x                   # should be 2 x

    w = torch.tensor([0.7, -1.3], dtype=torch.float64, requires_grad=True)
    assert autodiff.gradcheck(lambda: BadSquare.apply(w).sum(), [w]) > 0.05


def test_gradcheck_rejects_bad_eps():
    w = torch.ones(1, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError):
        autodiff.gradcheck(lambda: w.sum(), [w], eps=0)


def test_gradient_through_exponential_series_matches_dense(rng):
    """d/dW of <y, exp(M(W)) x> against the Frechet derivative from the dense oracle."""
    w = torch.tensor(0.3 * rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
    x = torch.tensor(rng.standard_normal((1, 3, 3)))
    y = torch.tensor(rng.standard_normal((1, 3, 3)))
    cfg = ex.ExpConfig.terms(20)
    err = autodiff.gradcheck(lambda: (ex.expv(Conv2dOperator(w), x, cfg) * y).sum(), [w])
    assert err < 1e-6


def test_gradcheck_full_model(rng):
    model = gradcheck_model(seed=1)
    randomize_(model, rng, std=0.2).eval()
    x = torch.tensor(rng.standard_normal((3, 1, 4, 4)))
    params = [p for p in model.parameters()][:6]
    assert autodiff.gradcheck(lambda: model.nll(x), params) < 1e-4


def test_optimizer_betas_and_decay():
    p = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
    opt = autodiff.make_optimizer([p], lr=0.1)
    assert opt.defaults["betas"] == (0.9, 0.99)
    sched = autodiff.step_decay(opt, total_iters=30)
    lrs = []
    for _ in range(30):
        lrs.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    assert lrs[0] == pytest.approx(0.1)
    assert lrs[10] == pytest.approx(0.01)
    assert lrs[20] == pytest.approx(0.001)
    assert lrs[9] == pytest.approx(0.1)


def test_optimizer_minimizes_quadratic():
    p = torch.nn.Parameter(torch.tensor([3.0, -2.0], dtype=torch.float64))
    opt = autodiff.make_optimizer([p], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        ((p - 1) ** 2).sum().backward()
        opt.step()
    np.testing.assert_allclose(p.detach().numpy(), [1.0, 1.0], atol=1e-3)
