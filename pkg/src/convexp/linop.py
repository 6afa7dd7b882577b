"""Dimensionality-preserving linear operators.

Operators act on batched tensors: a convolution on ``[..., c, h, w]``, a graph
convolution on ``[..., N, nf]``. All of them expose ``apply``,
``transpose_apply`` and a closed-form ``trace`` where one exists.
"""
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

SIGMA_FLOOR = 1e-12


class TraceUnavailableError(NotImplementedError):
    pass


def as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class LinearOperator:
    """A linear map ``x -> M vec(x)`` that never materializes ``M``."""

    def apply(self, x):
        raise NotImplementedError

    def transpose_apply(self, y):
        raise NotImplementedError

    def trace(self, input_shape):
        raise TraceUnavailableError(f"{type(self).__name__} has no closed-form trace")

    def scaled(self, factor):
        raise NotImplementedError

    def __neg__(self):
        return self.scaled(-1.0)

    def __call__(self, x):
        return self.apply(x)


class ZeroOperator(LinearOperator):
    def apply(self, x):
        return torch.zeros_like(as_tensor(x))

    transpose_apply = apply

    def trace(self, input_shape):
        return torch.zeros((), dtype=torch.float64)

    def scaled(self, factor):
        return self


class ScaledIdentity(LinearOperator):
    """``a * I``; handy for equality cases of the power-series bound."""

    def __init__(self, a):
        self.a = a

    def apply(self, x):
        return self.a * as_tensor(x)

    transpose_apply = apply

    def trace(self, input_shape):
        return torch.as_tensor(self.a * float(np.prod(input_shape)), dtype=torch.float64)

    def scaled(self, factor):
        return ScaledIdentity(self.a * factor)


# ---------------------------------------------------------------------------
# 2-D convolution


def _conv_core(weight, x, padding_mode):
    c_out, c_in, kh, kw = weight.shape
    lead = x.shape[:-3]
    if x.shape[-3] != c_in:
        raise ValueError(f"expected {c_in} channels, got {x.shape[-3]}")
    xb = x.reshape((-1,) + tuple(x.shape[-3:]))
    ph, pw = kh // 2, kw // 2
    if padding_mode == "periodic":
        if ph or pw:
            xb = F.pad(xb, (pw, pw, ph, ph), mode="circular")
        out = F.conv2d(xb, weight)
    elif padding_mode == "zero":
        out = F.conv2d(xb, weight, padding=(ph, pw))
    else:
        raise ValueError(f"unknown padding mode {padding_mode!r}")
    return out.reshape(lead + tuple(out.shape[-3:]))


class Conv2dOperator(LinearOperator):
    """Same-size cross-correlation with an odd ``[c, c, k_h, k_w]`` kernel."""

    def __init__(self, weight, padding_mode="zero"):
        weight = as_tensor(weight)
        if weight.ndim != 4:
            raise ValueError("kernel must be 4-d [c_out, c_in, k_h, k_w]")
        if weight.shape[2] % 2 == 0 or weight.shape[3] % 2 == 0:
            raise ValueError("kernel spatial dims must be odd")
        if padding_mode not in ("zero", "periodic"):
            raise ValueError(f"unknown padding mode {padding_mode!r}")
        self.weight = weight
        self.padding_mode = padding_mode

    @property
    def square(self):
        return self.weight.shape[0] == self.weight.shape[1]

    def apply(self, x):
        return _conv_core(self.weight, as_tensor(x), self.padding_mode)

    def transpose_apply(self, y):
        # M^T is the cross-correlation with the spatially flipped,
        # channel-transposed kernel, for both padding modes.
        flipped = self.weight.flip(2, 3).transpose(0, 1)
        return _conv_core(flipped, as_tensor(y), self.padding_mode)

    def trace(self, input_shape):
        if not self.square:
            raise TraceUnavailableError("non-square channel map")
        c, h, w = input_shape[-3:]
        kh, kw = self.weight.shape[2:]
        cy, cx = kh // 2, kw // 2
        diag = torch.diagonal(self.weight, dim1=0, dim2=1)  # [kh, kw, c]
        if self.padding_mode == "zero":
            return h * w * diag[cy, cx].sum()
        # periodic: every tap whose offset wraps back onto the pixel itself
        total = torch.zeros((), dtype=self.weight.dtype)
        for ky in range(kh):
            for kx in range(kw):
                if (ky - cy) % h == 0 and (kx - cx) % w == 0:
                    total = total + diag[ky, kx].sum()
        return h * w * total

    def scaled(self, factor):
        return Conv2dOperator(self.weight * factor, self.padding_mode)


def conv2d_apply(kernel, x, padding_mode="zero"):
    op = kernel if isinstance(kernel, Conv2dOperator) else Conv2dOperator(kernel, padding_mode)
    return op.apply(x)


def conv2d_transpose_apply(kernel, y, padding_mode="zero"):
    op = kernel if isinstance(kernel, Conv2dOperator) else Conv2dOperator(kernel, padding_mode)
    return op.transpose_apply(y)


# ---------------------------------------------------------------------------
# graphs


def normalized_adjacency(adjacency):
    """``D^{-1/2} A D^{-1/2}`` with a zero entry for isolated nodes."""
    A = as_tensor(adjacency)
    deg = A.sum(-1)
    dinv = torch.where(deg > 0, deg.clamp_min(1e-300).rsqrt(), torch.zeros_like(deg))
    return dinv.unsqueeze(-1) * A * dinv.unsqueeze(-2)


def fully_connected_adjacency(n):
    return np.ones((n, n)) - np.eye(n)


@dataclass
class GraphInstance:
    node_features: np.ndarray
    adjacency: np.ndarray
    degree: np.ndarray = field(default=None)

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        A = self.adjacency
        n = self.node_features.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"adjacency shape {A.shape} does not match {n} nodes")
        if not np.allclose(A, A.T) or np.any(np.diag(A) != 0) or np.any(A < 0):
            raise ValueError("adjacency must be symmetric, nonnegative, zero-diagonal")
        self.degree = A.sum(axis=1)

    @property
    def num_nodes(self):
        return self.node_features.shape[0]

    @property
    def max_neighbours(self):
        return int((self.adjacency > 0).sum(axis=1).max()) if self.num_nodes else 0


@dataclass
class GclParams:
    theta0: torch.Tensor
    theta1: torch.Tensor

    def __post_init__(self):
        self.theta0 = as_tensor(self.theta0)
        self.theta1 = as_tensor(self.theta1)
        nf = self.theta0.shape[0]
        if self.theta0.shape != (nf, nf) or self.theta1.shape != (nf, nf):
            raise ValueError("theta0 and theta1 must be square with matching nf")


class GraphConvOperator(LinearOperator):
    """``X theta0 + A_hat X theta1`` on node features ``[..., N, nf]``."""

    def __init__(self, theta0, theta1, adjacency, normalize=True):
        self.theta0 = as_tensor(theta0)
        self.theta1 = as_tensor(theta1)
        A = as_tensor(adjacency)
        self.adj_hat = normalized_adjacency(A) if normalize else A

    @property
    def num_nodes(self):
        return self.adj_hat.shape[-1]

    def apply(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.theta0.shape[0] or x.shape[-2] != self.num_nodes:
            raise ValueError(f"graph features of shape {tuple(x.shape[-2:])} do not match "
                             f"({self.num_nodes}, {self.theta0.shape[0]})")
        return x @ self.theta0 + self.adj_hat @ x @ self.theta1

    def transpose_apply(self, y):
        y = as_tensor(y)
        return y @ self.theta0.T + self.adj_hat.transpose(-1, -2) @ y @ self.theta1.T

    def trace(self, input_shape=None):
        # A_hat has a zero diagonal, so only the self-connections count.
        return self.num_nodes * torch.diagonal(self.theta0).sum()

    def scaled(self, factor):
        op = GraphConvOperator.__new__(GraphConvOperator)
        op.theta0 = self.theta0 * factor
        op.theta1 = self.theta1 * factor
        op.adj_hat = self.adj_hat
        return op


def gcl_apply(params, g):
    return GraphConvOperator(params.theta0, params.theta1, g.adjacency).apply(g.node_features)


def operator_trace(op, input_shape):
    return op.trace(input_shape)


# ---------------------------------------------------------------------------
# Householder 1x1


class NearZeroVectorError(ValueError):
    pass


def householder_apply(vectors, x, inverse=False):
    """Apply ``Q = H_1 ... H_k`` (or ``Q^T``) along the channel axis ``-3``.

    Each ``H = I - 2 v v^T / v^T v`` acts per spatial position.
    """
    x = as_tensor(x)
    vs = [as_tensor(v) for v in vectors]
    order = vs if inverse else vs[::-1]
    for v in order:
        nrm = v.norm()
        if nrm <= 1e-8:
            raise NearZeroVectorError("Householder vector norm below 1e-8")
        v = v / nrm
        if v.shape[0] != x.shape[-3]:
            raise ValueError(f"vector length {v.shape[0]} != channel count {x.shape[-3]}")
        proj = torch.einsum("c,...chw->...hw", v, x)
        x = x - 2.0 * v.view(-1, 1, 1) * proj.unsqueeze(-3)
    return x


class HouseholderOperator(LinearOperator):
    def __init__(self, vectors):
        self.vectors = [as_tensor(v) for v in vectors]

    def apply(self, x):
        return householder_apply(self.vectors, x)

    def transpose_apply(self, y):
        return householder_apply(self.vectors, y, inverse=True)


# ---------------------------------------------------------------------------
# spectral normalization


class PowerIterState:
    """Persistent unit-norm right singular vector estimate."""

    def __init__(self, shape, seed=0):
        g = torch.Generator().manual_seed(seed)
        v = torch.randn(tuple(shape), generator=g, dtype=torch.float64)
        self.vector = v / v.norm()

    def __repr__(self):
        return f"PowerIterState(shape={tuple(self.vector.shape)})"


@torch.no_grad()
def power_iteration(apply, transpose_apply, v, iters):
    """Return ``(sigma, v)`` after ``iters`` steps of ``v <- M^T M v``."""
    sigma = torch.zeros((), dtype=torch.float64)
    for _ in range(iters):
        u = apply(v)
        w = transpose_apply(u)
        nrm = w.norm()
        if nrm <= SIGMA_FLOOR ** 2:
            return torch.zeros((), dtype=torch.float64), v
        v = w / nrm
    sigma = apply(v).norm()
    return sigma, v


def spectral_normalize(op, coeff, state, iters):
    """Scale ``op`` by ``coeff / sigma``; ``state`` is refined in place.

    A zero operator (``sigma < 1e-12``) is returned unscaled with sigma 0.
    """
    if coeff <= 0:
        raise ValueError("coeff must be positive")
    sigma, state.vector = power_iteration(op.apply, op.transpose_apply, state.vector, iters)
    sigma = float(sigma)
    if sigma < SIGMA_FLOOR:
        return op, 0.0
    return op.scaled(coeff / sigma), sigma


def estimate_sigma(op, input_shape, iters=200, seed=0):
    state = PowerIterState(input_shape, seed=seed)
    sigma, _ = power_iteration(op.apply, op.transpose_apply, state.vector, iters)
    return float(sigma)


def gcl_norm_rule(theta0, theta1, max_neighbours, states=None, iters=20):
    """Rescale so ``||theta0||_2 <= 1/max_neighbours`` and ``||theta1||_2 <= 1``.

    Parameters only shrink, never grow.
    """
    theta0, theta1 = as_tensor(theta0), as_tensor(theta1)
    nf = theta0.shape[0]
    if states is None:
        states = (PowerIterState((nf,), seed=1), PowerIterState((nf,), seed=2))
    out = []
    for theta, bound, st in ((theta0, 1.0 / max(max_neighbours, 1), states[0]),
                             (theta1, 1.0, states[1])):
        sigma, st.vector = power_iteration(
            lambda v, t=theta: t.detach() @ v, lambda v, t=theta: t.detach().T @ v,
            st.vector, iters)
        factor = min(1.0, bound / float(sigma)) if float(sigma) > SIGMA_FLOOR else 1.0
        out.append(theta * factor)
    return tuple(out)
