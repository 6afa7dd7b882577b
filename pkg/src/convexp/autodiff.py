"""Reverse-mode gradients, finite-difference checking and the optimizer.

The tape is torch.autograd's: every flow operation here is composed from
differentiable torch primitives, and the truncated exponential series is
differentiated term by term exactly as it is evaluated.
"""
import warnings

import torch

BETAS = (0.9, 0.99)


class DetachedParameterWarning(UserWarning):
    pass


def grad(loss, params):
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters the loss does not depend on get a zero gradient and a warning.
    """
    params = list(params)
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            warnings.warn(f"parameter {k} is detached from the loss", DetachedParameterWarning,
                          stacklevel=2)
            g = torch.zeros_like(p)
        out.append(g)
    return out


def gradcheck(f, params, eps=1e-5, floor=1e-8):
    """Largest relative error between tape and central-difference gradients.

    ``f()`` re-evaluates the scalar objective from the current values of
    ``params``. The relative error uses ``max(|analytic|, |numeric|, floor)``
    as denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    loss = f()
    if not torch.isfinite(loss):
        raise FloatingPointError("objective is not finite")
    analytic = grad(loss, params)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (abs(fp) < float("inf") and abs(fm) < float("inf")):
                    raise FloatingPointError("objective is not finite")
                numeric = (fp - fm) / (2 * eps)
                a = gflat[i].item()
                denom = max(abs(a), abs(numeric), floor)
                worst = max(worst, abs(a - numeric) / denom)
    return worst


def make_optimizer(params, lr=1e-3, betas=BETAS):
    """Adaptive-moment optimizer with decay rates (0.9, 0.99)."""
    return torch.optim.Adam(params, lr=lr, betas=betas)


def step_decay(optimizer, total_iters, factor=0.1, phases=3):
    """Multiply the learning rate by ``factor`` after each ``1/phases`` of the run."""
    every = max(total_iters // phases, 1)
    return torch.optim.lr_scheduler.StepLR(optimizer, step_size=every, gamma=factor)
