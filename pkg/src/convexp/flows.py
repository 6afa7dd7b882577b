"""Invertible layers, their composition and the exact likelihood.

Tensor layouts: images are ``[B, c, h, w]``, graphs and flat vectors are
``[B, N, nf]`` (a flat ``d``-vector is a single node with ``nf = d``).
Every layer returns ``(z, logdet)`` with ``logdet`` of shape ``[B]``.
"""
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import exponential as ex
from .linop import (Conv2dOperator, GraphConvOperator, fully_connected_adjacency,
                    power_iteration)

LOG_2PI = math.log(2 * math.pi)
LOG4 = math.log(4.0)


class NonFiniteError(FloatingPointError):
    def __init__(self, layer_index, what="output"):
        self.layer_index = layer_index
        super().__init__(f"non-finite {what} at layer {layer_index}")


class FlowLayer(nn.Module):
    def forward(self, x, context=None):
        raise NotImplementedError

    def inverse(self, z, context=None):
        raise NotImplementedError

    @torch.no_grad()
    def certify(self, iters=200):
        """Refresh any spectral-norm certificate with ``iters`` power steps."""


class SpectralCap(nn.Module):
    """Holds a persistent power-iteration vector and the resulting scale.

    The scale is ``min(1, coeff / sigma)``: weights are only ever shrunk, so a
    near-zero initialization stays near zero. It is a buffer, i.e. constant
    for the backward pass.
    """

    def __init__(self, input_shape, coeff, train_iters=1, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        v = torch.randn(tuple(input_shape), generator=g, dtype=torch.float64)
        self.register_buffer("vector", v / v.norm())
        self.register_buffer("scale", torch.ones((), dtype=torch.float64))
        self.register_buffer("sigma", torch.zeros((), dtype=torch.float64))
        self.coeff = coeff
        self.train_iters = train_iters

    @torch.no_grad()
    def refresh(self, apply, transpose_apply, iters=None):
        iters = self.train_iters if iters is None else iters
        sigma, v = power_iteration(apply, transpose_apply, self.vector, iters)
        s = float(sigma)
        # fresh tensors, so graphs that already captured the old scale stay valid
        self.vector = v.clone()
        self.sigma = sigma.clone()
        self.scale = torch.tensor(min(1.0, self.coeff / s) if s > 1e-12 else 1.0,
                                  dtype=torch.float64)


# ---------------------------------------------------------------------------
# exponential layers


class ConvExpLayer(FlowLayer):
    """``z = m *_e x`` with a spectrally capped kernel; ``logdet = Tr M``."""

    def __init__(self, shape, kernel_size=3, padding_mode="zero", coeff=0.9,
                 exp_config=None, init_std=1e-4, seed=0):
        super().__init__()
        c = shape[0]
        self.shape = tuple(shape)
        self.padding_mode = padding_mode
        self.exp_config = exp_config or ex.TRAINING
        self.weight = nn.Parameter(
            init_std * torch.randn(c, c, kernel_size, kernel_size, dtype=torch.float64))
        self.cap = SpectralCap(shape, coeff, seed=seed)
        self.certify(iters=50)

    def _raw_op(self):
        return Conv2dOperator(self.weight.detach(), self.padding_mode)

    def operator(self):
        return Conv2dOperator(self.weight * self.cap.scale, self.padding_mode)

    @torch.no_grad()
    def certify(self, iters=200):
        op = self._raw_op()
        self.cap.refresh(op.apply, op.transpose_apply, iters)

    def forward(self, x, context=None):
        if self.training:
            self.certify(self.cap.train_iters)
        op = self.operator()
        z = ex.expv(op, x, self.exp_config, event_ndim=3)
        logdet = op.trace(x.shape[-3:]).expand(x.shape[0])
        return z, logdet

    def inverse(self, z, context=None):
        op = self.operator()
        return ex.inverse_expv(op, z, self.exp_config, event_ndim=3)


class GraphConvExpLayer(FlowLayer):
    """Graph convolution exponential on ``[B, N, nf]`` node features.

    ``theta0`` is capped to ``1 / max_neighbours`` and ``theta1`` to 1 in
    spectral norm.
    """

    def __init__(self, nf, max_neighbours=1, exp_config=None, init_std=1e-4, seed=0):
        super().__init__()
        self.nf = nf
        self.exp_config = exp_config or ex.TRAINING
        self.theta0 = nn.Parameter(init_std * torch.randn(nf, nf, dtype=torch.float64))
        self.theta1 = nn.Parameter(init_std * torch.randn(nf, nf, dtype=torch.float64))
        self.cap0 = SpectralCap((nf,), 1.0 / max(max_neighbours, 1), seed=seed)
        self.cap1 = SpectralCap((nf,), 1.0, seed=seed + 1)
        self.certify(iters=50)

    @torch.no_grad()
    def certify(self, iters=200, max_neighbours=None):
        if max_neighbours is not None:
            self.cap0.coeff = 1.0 / max(max_neighbours, 1)
        t0, t1 = self.theta0.detach(), self.theta1.detach()
        self.cap0.refresh(lambda v: t0 @ v, lambda v: t0.T @ v, iters)
        self.cap1.refresh(lambda v: t1 @ v, lambda v: t1.T @ v, iters)

    def operator(self, adjacency):
        A = torch.as_tensor(adjacency, dtype=torch.float64)
        return GraphConvOperator(self.theta0 * self.cap0.scale, self.theta1 * self.cap1.scale, A)

    def forward(self, x, context=None):
        A = _adjacency(context, x)
        if self.training:
            max_nb = int((A > 0).sum(-1).max()) if A.numel() else 1
            self.certify(iters=self.cap0.train_iters, max_neighbours=max_nb)
        op = self.operator(A)
        z = ex.expv(op, x, self.exp_config, event_ndim=2)
        return z, op.trace().expand(x.shape[0])

    def inverse(self, z, context=None):
        op = self.operator(_adjacency(context, z))
        return ex.inverse_expv(op, z, self.exp_config, event_ndim=2)


def _adjacency(context, x):
    if context is not None:
        return context
    return torch.as_tensor(fully_connected_adjacency(x.shape[-2]), dtype=torch.float64)


# ---------------------------------------------------------------------------
# standard layers


def _feature_axis(layout):
    return -3 if layout == "image" else -1


def _positions(x, layout):
    if layout == "image":
        return x.shape[-1] * x.shape[-2]
    return x.shape[-2]


class ActNorm(FlowLayer):
    """Per-channel (image) or per-feature (graph) affine map with data init.

    Initialization happens on the first forward pass in training mode; an
    uninitialized layer is the identity.
    """

    def __init__(self, num_features, layout="image"):
        super().__init__()
        self.layout = layout
        self.log_scale = nn.Parameter(torch.zeros(num_features, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(num_features, dtype=torch.float64))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    def _view(self, p):
        return p.view(-1, 1, 1) if self.layout == "image" else p

    @torch.no_grad()
    def initialize(self, x):
        axis = x.ndim + _feature_axis(self.layout)
        dims = [d for d in range(x.ndim) if d != axis]
        mean = x.mean(dim=dims)
        std = x.std(dim=dims, unbiased=False).clamp_min(1e-12)
        self.bias.copy_(-mean)
        self.log_scale.copy_(-std.log())
        self.initialized.fill_(True)

    def forward(self, x, context=None):
        if self.training and not bool(self.initialized):
            self.initialize(x)
        z = (x + self._view(self.bias)) * self._view(self.log_scale.exp())
        logdet = _positions(x, self.layout) * self.log_scale.sum()
        return z, logdet.expand(x.shape[0])

    def inverse(self, z, context=None):
        return z * self._view((-self.log_scale).exp()) - self._view(self.bias)


class Invertible1x1(FlowLayer):
    """Channel (or per-node feature) mixing by a dense square matrix."""

    def __init__(self, num_features, layout="image"):
        super().__init__()
        self.layout = layout
        q, _ = torch.linalg.qr(torch.randn(num_features, num_features, dtype=torch.float64))
        self.weight = nn.Parameter(q)

    def _mix(self, x, W):
        if self.layout == "image":
            return torch.einsum("ij,...jhw->...ihw", W, x)
        return x @ W.T

    def forward(self, x, context=None):
        _, logabs = torch.linalg.slogdet(self.weight)
        z = self._mix(x, self.weight)
        return z, (_positions(x, self.layout) * logabs).expand(x.shape[0])

    def inverse(self, z, context=None):
        return self._mix(z, torch.linalg.inv(self.weight))


def squash_log_scale(raw):
    """Bounded log-scale in ``(-log 4, log 4)``."""
    return LOG4 * (2.0 * torch.sigmoid(raw) - 1.0)


class AffineCoupling(FlowLayer):
    """Half of the features pass through; the other half gets ``x * e^s + t``.

    ``split="channel"`` halves the feature axis; ``split="checkerboard"``
    (images only) alternates pixels. ``conditioner`` maps the passive part to
    ``2 * n_active`` outputs on the feature axis.
    """

    def __init__(self, conditioner, num_features, layout="image", split="channel",
                 parity=0):
        super().__init__()
        self.conditioner = conditioner
        self.layout = layout
        self.split = split
        self.parity = parity
        self.n_pass = num_features // 2 if split == "channel" else num_features

    def _mask(self, x):
        h, w = x.shape[-2:]
        yy, xx = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
        return ((yy + xx + self.parity) % 2).to(torch.float64)

    def _params(self, x_pass, context):
        out = self.conditioner(x_pass, context) if _wants_context(self.conditioner) \
            else self.conditioner(x_pass)
        axis = _feature_axis(self.layout)
        raw_s, t = out.chunk(2, dim=axis)
        return squash_log_scale(raw_s), t

    def _sides(self, x):
        axis = _feature_axis(self.layout)
        if self.parity:
            x_b, x_a = x.split([x.shape[axis] - self.n_pass, self.n_pass], dim=axis)
        else:
            x_a, x_b = x.split([self.n_pass, x.shape[axis] - self.n_pass], dim=axis)
        return x_a, x_b

    def _join(self, x_a, x_b):
        axis = _feature_axis(self.layout)
        return torch.cat([x_b, x_a] if self.parity else [x_a, x_b], dim=axis)

    def forward(self, x, context=None):
        if self.split == "checkerboard":
            b = self._mask(x)
            s, t = self._params(x * b, context)
            s, t = s * (1 - b), t * (1 - b)
            z = x * b + (1 - b) * (x * s.exp() + t)
            return z, s.flatten(1).sum(1)
        x_a, x_b = self._sides(x)
        s, t = self._params(x_a, context)
        return self._join(x_a, x_b * s.exp() + t), s.flatten(1).sum(1)

    def inverse(self, z, context=None):
        if self.split == "checkerboard":
            b = self._mask(z)
            s, t = self._params(z * b, context)
            s, t = s * (1 - b), t * (1 - b)
            return z * b + (1 - b) * (z - t) * (-s).exp()
        z_a, z_b = self._sides(z)
        s, t = self._params(z_a, context)
        return self._join(z_a, (z_b - t) * (-s).exp())


def _wants_context(module):
    return getattr(module, "uses_context", False)


# ---------------------------------------------------------------------------
# conditioners


def _zero_last(layer):
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class ConvConditioner(nn.Module):
    """3x3 -> 1x1 -> 3x3 convolutional net, last layer zero-initialized."""

    def __init__(self, in_channels, out_channels, hidden=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 1),
            nn.ReLU(),
            _zero_last(nn.Conv2d(hidden, out_channels, 3, padding=1)),
        ).double()

    def forward(self, x):
        return self.net(x)


_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class MLPConditioner(nn.Module):
    """Structure-blind conditioner: flattens all nodes, 4 linear layers."""

    def __init__(self, num_nodes, n_in, n_out, hidden=64, depth=4, precision="float64"):
        super().__init__()
        self.dtype = _DTYPES[precision]
        self.num_nodes = num_nodes
        self.n_out = n_out
        layers = []
        width = num_nodes * n_in
        for _ in range(depth - 1):
            layers += [nn.Linear(width, hidden), nn.LeakyReLU(0.01)]
            width = hidden
        layers.append(_zero_last(nn.Linear(width, num_nodes * n_out)))
        self.net = nn.Sequential(*layers).to(self.dtype)

    def forward(self, x):
        out = self.net(x.flatten(-2).to(self.dtype)).to(torch.float64)
        return out.view(x.shape[:-2] + (self.num_nodes, self.n_out))


class GNNConditioner(nn.Module):
    """Message passing with a 3-layer edge MLP and a 2-layer node MLP.

    Messages are summed over neighbours weighted by the adjacency, so the map
    is permutation equivariant. ``precision="float32"`` runs the network in
    single precision; the coupling arithmetic around it stays in float64 and
    remains exactly invertible because the conditioner sees identical inputs
    in both directions.
    """

    uses_context = True

    def __init__(self, n_in, n_out, hidden=64, rounds=1, precision="float64", edge_hidden=None):
        super().__init__()
        self.dtype = _DTYPES[precision]
        eh = hidden if edge_hidden is None else edge_hidden
        self.embed = nn.Linear(n_in, hidden)
        self.rounds = nn.ModuleList()
        for _ in range(rounds):
            self.rounds.append(nn.ModuleDict({
                # first edge layer on [h_i, h_j], split into its two halves
                "edge_src": nn.Linear(hidden, eh),
                "edge_dst": nn.Linear(hidden, eh, bias=False),
                "edge_mlp": nn.Sequential(nn.ReLU(), nn.Linear(eh, eh), nn.ReLU(),
                                          nn.Linear(eh, eh)),
                "node_mlp": nn.Sequential(nn.Linear(hidden + eh, hidden), nn.ReLU(),
                                          nn.Linear(hidden, hidden)),
            }))
        self.out = _zero_last(nn.Linear(hidden, n_out))
        self.to(self.dtype)

    def forward(self, x, context=None):
        A = _adjacency(context, x).to(self.dtype)
        h = self.embed(x.to(self.dtype))
        for r in self.rounds:
            e = r["edge_src"](h).unsqueeze(-2) + r["edge_dst"](h).unsqueeze(-3)
            m = r["edge_mlp"](e)                          # [B, N(i), N(j), H]
            agg = torch.einsum("...ij,...ijh->...ih", A, m)
            h = h + r["node_mlp"](torch.cat([h, agg], dim=-1))
        return self.out(F.relu(h)).to(torch.float64)


# ---------------------------------------------------------------------------
# composition


class FlowModel(nn.Module):
    """Ordered stack of flow layers over a standard-normal base."""

    def __init__(self, layers, event_shape, layout="image"):
        super().__init__()
        self.layers = nn.ModuleList(layers)
        self.event_shape = tuple(event_shape)
        self.layout = layout

    @property
    def dim(self):
        return int(np.prod(self.event_shape))

    @property
    def nodes(self):
        return self.event_shape[0] if self.layout == "graph" else 1

    def _check(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        if tuple(x.shape[1:]) != self.event_shape:
            raise ValueError(f"expected per-sample shape {self.event_shape}, "
                             f"got {tuple(x.shape[1:])}")
        return x

    def forward(self, x, context=None):
        x = self._check(x)
        logdet = torch.zeros(x.shape[0], dtype=torch.float64)
        for k, layer in enumerate(self.layers):
            x, ld = layer(x, context)
            logdet = logdet + ld
            if not (torch.isfinite(x).all() and torch.isfinite(ld).all()):
                raise NonFiniteError(k)
        return x, logdet

    def inverse(self, z, context=None):
        z = self._check(z)
        for layer in reversed(self.layers):
            z = layer.inverse(z, context)
        return z

    def log_prob(self, x, context=None):
        z, logdet = self(x, context)
        base = -0.5 * (z.flatten(1) ** 2).sum(1) - 0.5 * self.dim * LOG_2PI
        return base + logdet

    def nll(self, x, context=None):
        """Mean negative log-likelihood in nats (per node for graph data)."""
        if len(x) == 0:
            raise ValueError("empty batch")
        return -self.log_prob(x, context).mean() / self.nodes

    @torch.no_grad()
    def sample(self, n, generator=None, context=None):
        z = torch.randn((n,) + self.event_shape, generator=generator, dtype=torch.float64)
        return self.inverse(z, context)

    @torch.no_grad()
    def certify(self, iters=200):
        for layer in self.modules():
            if isinstance(layer, FlowLayer) and layer is not self:
                layer.certify(iters)
        return self

    def set_exp_config(self, cfg):
        """Use ``cfg`` for every exponential series in the model."""
        for m in self.modules():
            if hasattr(m, "exp_config"):
                m.exp_config = cfg
        return self


def flow_forward(model, x, context=None):
    return model(x, context)


def flow_inverse(model, z, context=None):
    return model.inverse(z, context)


def nll(model, batch, context=None):
    return model.nll(batch, context)
