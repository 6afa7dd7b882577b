"""Generalized and Convolutional Sylvester flows.

``z = x + W^{-1} f_AR(W x)`` with an invertible basis ``W`` and an
autoregressive ``f_AR`` whose Jacobian diagonal stays inside ``(-1, 1)``.
The log-determinant only needs that diagonal; the inverse is a fixed-point
iteration in the ``u = W x`` basis.
"""
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import exponential as ex
from .flows import FlowLayer, SpectralCap
from .linop import Conv2dOperator, householder_apply


@dataclass(frozen=True)
class FixedPointConfig:
    abs_tolerance: float = 1e-4
    max_iters: int = 50

    def __post_init__(self):
        if self.abs_tolerance <= 0:
            raise ValueError("abs_tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


class FixedPointWarning(RuntimeWarning):
    pass


class FixedPointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# masked autoregressive convolutions


def conv_mask(in_channels, out_channels, data_channels, kernel_size, strict):
    """Raster-order mask, channel-major within a pixel.

    Hidden channel ``k`` is tied to data channel ``k % data_channels``. At the
    kernel centre a connection ``in -> out`` is kept when
    ``deg(in) < deg(out)`` (``strict``) or ``deg(in) <= deg(out)``.
    """
    kh, kw = kernel_size
    cy, cx = kh // 2, kw // 2
    mask = torch.zeros(out_channels, in_channels, kh, kw, dtype=torch.float64)
    mask[:, :, :cy, :] = 1.0
    mask[:, :, cy, :cx] = 1.0
    d_in = torch.arange(in_channels) % data_channels
    d_out = torch.arange(out_channels) % data_channels
    centre = d_in[None, :] < d_out[:, None] if strict else d_in[None, :] <= d_out[:, None]
    mask[:, :, cy, cx] = centre.to(torch.float64)
    return mask


class MaskedConv2d(nn.Module):
    """Masked 3x3 convolution with a spectral-norm cap (default 1.5)."""

    def __init__(self, in_channels, out_channels, data_channels, spatial, strict,
                 lipschitz=1.5, kernel_size=3, train_iters=5, seed=0, zero_init=False):
        super().__init__()
        k = (kernel_size, kernel_size)
        self.register_buffer("mask", conv_mask(in_channels, out_channels, data_channels, k,
                                               strict))
        w = torch.empty(out_channels, in_channels, *k, dtype=torch.float64)
        if zero_init:
            nn.init.zeros_(w)
        else:
            nn.init.kaiming_uniform_(w, a=5 ** 0.5)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=torch.float64))
        self.cap = SpectralCap((in_channels,) + tuple(spatial), lipschitz,
                               train_iters=train_iters, seed=seed)
        self.certify(50)

    def _raw_op(self):
        return Conv2dOperator(self.weight.detach() * self.mask, "zero")

    @torch.no_grad()
    def certify(self, iters=200):
        op = self._raw_op()
        self.cap.refresh(op.apply, op.transpose_apply, iters)

    def effective_weight(self):
        return self.weight * self.mask * self.cap.scale

    def refresh(self):
        self.certify(self.cap.train_iters)

    def forward(self, x):
        return F.conv2d(x, self.effective_weight(), self.bias, padding=self.mask.shape[-1] // 2)


class MaskedArNet(nn.Module):
    """Shared masked trunk with four strictly autoregressive heads.

    Returns ``(s1, s2, t1, t2)``, each shaped like the input; ``s1`` and
    ``s2`` are squashed by ``tanh``. Heads start at zero.
    """

    def __init__(self, shape, hidden_channels=32, depth=2, lipschitz=1.5, seed=0):
        super().__init__()
        c, h, w = shape
        self.shape = tuple(shape)
        convs = [MaskedConv2d(c, hidden_channels, c, (h, w), strict=True,
                              lipschitz=lipschitz, seed=seed)]
        for k in range(depth - 1):
            convs.append(MaskedConv2d(hidden_channels, hidden_channels, c, (h, w), strict=False,
                                      lipschitz=lipschitz, seed=seed + k + 1))
        self.trunk = nn.ModuleList(convs)
        self.heads = MaskedConv2d(hidden_channels, 4 * c, c, (h, w), strict=False,
                                  lipschitz=lipschitz, seed=seed + depth, zero_init=True)

    def certify(self, iters=200):
        for conv in list(self.trunk) + [self.heads]:
            conv.certify(iters)

    def refresh(self):
        for conv in list(self.trunk) + [self.heads]:
            conv.refresh()

    def forward(self, u):
        h = u
        for conv in self.trunk:
            h = F.elu(conv(h))
        # head block i occupies channels [i*c, (i+1)*c), so channel j has degree j
        s1, s2, t1, t2 = self.heads(h).chunk(4, dim=1)
        return torch.tanh(s1), torch.tanh(s2), t1, t2


class MaskedArFunction(nn.Module):
    """``f(u) = gamma * s2 * tanh(u * s1 + t1) + t2`` and its Jacobian diagonal."""

    def __init__(self, net, gamma=0.5):
        super().__init__()
        if not 0 < gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        self.net = net
        self.gamma = gamma

    def certify(self, iters=200):
        self.net.certify(iters)

    def refresh(self):
        self.net.refresh()

    def forward(self, u):
        s1, s2, t1, t2 = self.net(u)
        a = torch.tanh(u * s1 + t1)
        f = self.gamma * s2 * a + t2
        diag = self.gamma * s2 * (1 - a * a) * s1
        return f, diag


def f_ar_forward(net, gamma, u):
    return MaskedArFunction(net, gamma)(u)


class TriangularArFunction(nn.Module):
    """``f(x) = R~ h(R x + b)`` with upper-triangular ``R``, ``R~`` and ``h = tanh``.

    Diagonals are ``tanh`` of free parameters, so ``R_ii R~_ii > -1``.
    Operates on flat ``[B, d]`` vectors.
    """

    def __init__(self, d, init_std=0.5):
        super().__init__()
        self.d = d
        self.r_off = nn.Parameter(init_std * torch.randn(d, d, dtype=torch.float64))
        self.rt_off = nn.Parameter(init_std * torch.randn(d, d, dtype=torch.float64))
        self.r_diag = nn.Parameter(torch.randn(d, dtype=torch.float64))
        self.rt_diag = nn.Parameter(torch.randn(d, dtype=torch.float64))
        self.b = nn.Parameter(init_std * torch.randn(d, dtype=torch.float64))

    def matrices(self):
        strict_upper = torch.triu(torch.ones(self.d, self.d, dtype=torch.float64), 1)
        R = self.r_off * strict_upper + torch.diag(torch.tanh(self.r_diag))
        Rt = self.rt_off * strict_upper + torch.diag(torch.tanh(self.rt_diag))
        return R, Rt

    def forward(self, u):
        R, Rt = self.matrices()
        pre = u @ R.T + self.b
        f = torch.tanh(pre) @ Rt.T
        diag = torch.diagonal(Rt) * (1 - torch.tanh(pre) ** 2) * torch.diagonal(R)
        return f, diag


# ---------------------------------------------------------------------------
# bases


class ExpHouseholderBasis(nn.Module):
    """``W = exp(M) Q``: Householder 1x1 map followed by a convolution exponential."""

    def __init__(self, shape, n_reflections=2, kernel_size=3, coeff=0.9, exp_config=None,
                 init_std=1e-4, seed=0):
        super().__init__()
        c = shape[0]
        self.exp_config = exp_config or ex.TRAINING
        self.vectors = nn.Parameter(torch.randn(n_reflections, c, dtype=torch.float64))
        self.kernel = nn.Parameter(
            init_std * torch.randn(c, c, kernel_size, kernel_size, dtype=torch.float64))
        self.cap = SpectralCap(shape, coeff, seed=seed)
        self.certify(50)

    @torch.no_grad()
    def certify(self, iters=200):
        op = Conv2dOperator(self.kernel.detach())
        self.cap.refresh(op.apply, op.transpose_apply, iters)

    def refresh(self):
        self.certify(self.cap.train_iters)

    def operator(self):
        return Conv2dOperator(self.kernel * self.cap.scale)

    def forward(self, x):
        return ex.expv(self.operator(), householder_apply(self.vectors, x), self.exp_config,
                       event_ndim=3)

    def inverse(self, u):
        return householder_apply(
            self.vectors, ex.inverse_expv(self.operator(), u, self.exp_config, event_ndim=3),
            inverse=True)


class OrthogonalBasis(nn.Module):
    """Householder product on flat ``[B, d]`` vectors."""

    def __init__(self, d, n_reflections=None):
        super().__init__()
        self.vectors = nn.Parameter(torch.randn(n_reflections or d, d, dtype=torch.float64))

    def certify(self, iters=200):
        pass

    refresh = certify

    def forward(self, x):
        return householder_apply(self.vectors, x[..., None, None])[..., 0, 0]

    def inverse(self, u):
        return householder_apply(self.vectors, u[..., None, None], inverse=True)[..., 0, 0]


class IdentityBasis(nn.Module):
    def certify(self, iters=200):
        pass

    refresh = certify

    def forward(self, x):
        return x

    def inverse(self, u):
        return u


# ---------------------------------------------------------------------------
# the layer


@dataclass
class InverseInfo:
    iters: int
    converged: bool
    max_step: float


class SylvesterLayer(FlowLayer):
    """Generalized Sylvester flow ``z = x + W^{-1} f_AR(W x)``."""

    def __init__(self, basis, ar_function, fixed_point=None, strict_inverse=False):
        super().__init__()
        self.basis = basis
        self.ar = ar_function
        self.fixed_point = fixed_point or FixedPointConfig()
        self.strict_inverse = strict_inverse
        self.last_inverse = None

    @torch.no_grad()
    def certify(self, iters=200):
        self.basis.certify(iters)
        if hasattr(self.ar, "certify"):
            self.ar.certify(iters)

    def forward(self, x, context=None):
        if self.training:
            self.basis.refresh()
            if hasattr(self.ar, "refresh"):
                self.ar.refresh()
        u = self.basis(x)
        f, diag = self.ar(u)
        z = x + self.basis.inverse(f)
        logdet = torch.log1p(diag).flatten(1).sum(1)
        return z, logdet

    def solve(self, v, cfg=None):
        """Solve ``v = u + f_AR(u)`` by ``u <- v - f_AR(u)`` starting at ``u = v``."""
        cfg = cfg or self.fixed_point
        u = v
        step = float("inf")
        t = 0
        for t in range(1, cfg.max_iters + 1):
            u_next = v - self.ar(u)[0]
            step = float((u_next - u).detach().abs().max())
            u = u_next
            if step <= cfg.abs_tolerance:
                break
        return u, InverseInfo(iters=t, converged=step <= cfg.abs_tolerance, max_step=step)

    def inverse(self, z, context=None, cfg=None):
        v = self.basis(z)
        u, info = self.solve(v, cfg)
        self.last_inverse = info
        if not info.converged:
            msg = (f"fixed-point iteration did not converge in {info.iters} iterations "
                   f"(last step {info.max_step:.3e})")
            if self.strict_inverse:
                raise FixedPointError(msg)
            warnings.warn(msg, FixedPointWarning, stacklevel=2)
        return self.basis.inverse(u)


def conv_sylvester_layer(shape, hidden_channels=32, depth=2, gamma=0.5, n_reflections=2,
                         exp_config=None, lipschitz=1.5, seed=0):
    """Convolutional Sylvester layer: ``W = exp(M) Q`` with a masked-conv ``f_AR``."""
    basis = ExpHouseholderBasis(shape, n_reflections=n_reflections, exp_config=exp_config,
                                seed=seed)
    net = MaskedArNet(shape, hidden_channels=hidden_channels, depth=depth,
                      lipschitz=lipschitz, seed=seed + 1)
    return SylvesterLayer(basis, MaskedArFunction(net, gamma))


def original_sylvester_layer(d, n_reflections=None):
    """The fully connected Sylvester flow ``x + Q^T R~ h(R Q x + b)``."""
    return SylvesterLayer(OrthogonalBasis(d, n_reflections), TriangularArFunction(d))


def sylvester_forward(layer, x):
    return layer(x)


def sylvester_inverse(layer, z, cfg=None):
    x = layer.inverse(z, cfg=cfg)
    return x, layer.last_inverse.iters
