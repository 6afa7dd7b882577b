"""Synthetic graph densities (MoG-K, MoG-Ring), 2-D moons, entropy oracles.

Every graph sample places its ``N = K`` nodes on ``K`` distinct mixture
components via a uniform random permutation, so the density is a mixture
over all ``K!`` assignments and is invariant under node permutations.
"""
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .linop import GraphInstance, fully_connected_adjacency

LOG_2PI = math.log(2 * math.pi)
EXACT_PERMUTATION_LIMIT = 8


@dataclass(frozen=True)
class MogSpec:
    K: int = 4
    spacing: float = 2.0
    sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        r = math.isqrt(self.K)
        if r * r != self.K:
            raise ValueError(f"K={self.K} is not a perfect square")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def num_nodes(self):
        return self.K

    def means(self):
        r = math.isqrt(self.K)
        g = (np.arange(r) - (r - 1) / 2.0) * self.spacing
        yy, xx = np.meshgrid(g, g, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass(frozen=True)
class MogRingSpec:
    K: int = 4
    radius: float = 2.0
    sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.radius <= 0 or self.sigma <= 0:
            raise ValueError("radius and sigma must be positive")

    @property
    def num_nodes(self):
        return self.K

    def means(self, angle=0.0):
        a = angle + 2 * math.pi * np.arange(self.K) / self.K
        return self.radius * np.stack([np.cos(a), np.sin(a)], axis=-1)


@dataclass(frozen=True)
class MoonsSpec:
    noise: float = 0.05
    seed: int = 0


@dataclass
class GraphBatch:
    node_features: np.ndarray   # [count, N, 2]
    adjacency: np.ndarray       # [N, N], shared by all samples

    def __len__(self):
        return self.node_features.shape[0]

    def __getitem__(self, i):
        return GraphInstance(self.node_features[i], self.adjacency)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _rng(spec, rng):
    return np.random.default_rng(spec.seed) if rng is None else rng


def _permuted_means(means, count, rng):
    K = means.shape[0]
    perms = np.argsort(rng.random((count, K)), axis=1)
    return means[perms]


def sample_mog(spec, count, rng=None):
    """Draw ``count`` graphs; pass ``rng`` to continue a seeded stream."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = _rng(spec, rng)
    centres = _permuted_means(spec.means(), count, rng)
    x = centres + spec.sigma * rng.standard_normal(centres.shape)
    return GraphBatch(x, fully_connected_adjacency(spec.K))


def sample_mog_ring(spec, count, rng=None):
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = _rng(spec, rng)
    theta = rng.uniform(0, 2 * math.pi, size=count)
    base = spec.means()
    c, s = np.cos(theta), np.sin(theta)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)   # [count, 2, 2]
    perms = np.argsort(rng.random((count, spec.K)), axis=1)
    centres = np.einsum("nij,nkj->nki", rot, base[perms])
    x = centres + spec.sigma * rng.standard_normal(centres.shape)
    return GraphBatch(x, fully_connected_adjacency(spec.K))


def sample_moons(spec, count, rng=None):
    from sklearn.datasets import make_moons

    rng = _rng(spec, rng)
    x, _ = make_moons(count, noise=spec.noise, random_state=int(rng.integers(2 ** 31)))
    return x


def sample(spec, count, rng=None):
    if isinstance(spec, MogSpec):
        return sample_mog(spec, count, rng)
    if isinstance(spec, MogRingSpec):
        return sample_mog_ring(spec, count, rng)
    if isinstance(spec, MoonsSpec):
        return sample_moons(spec, count, rng)
    raise TypeError(f"unknown dataset spec {spec!r}")


# ---------------------------------------------------------------------------
# log-densities


def _gauss_loglik(x, means, sigma):
    """``L[..., n, k] = log N(x_n; mu_k, sigma^2 I)`` in 2-D."""
    d2 = ((x[..., :, None, :] - means[..., None, :, :]) ** 2).sum(-1)
    return -0.5 * d2 / sigma ** 2 - math.log(2 * math.pi * sigma ** 2)


def log_permanent(L):
    """``log perm(exp(L))`` for one ``K x K`` matrix by Ryser's formula."""
    K = L.shape[0]
    shift = L.max(axis=1, keepdims=True)
    A = np.exp(L - shift)
    total = 0.0
    for mask in range(1, 1 << K):
        cols = [k for k in range(K) if mask >> k & 1]
        prod = np.prod(A[:, cols].sum(axis=1))
        total += (-1) ** len(cols) * prod
    total *= (-1) ** K
    return math.log(total) + shift.sum()


def _log_perm_exact(L):
    """Batched ``log sum_pi exp(sum_n L[n, pi(n)])`` by enumeration."""
    K = L.shape[-1]
    perms = np.array(list(itertools.permutations(range(K))))
    terms = L[..., np.arange(K), perms].sum(-1)     # [..., K!]
    return logsumexp(terms, axis=-1)


def _log_perm_importance(L, rng, proposals=16):
    """Importance-sampled ``log perm`` with sequential-assignment proposals.

    Each node in turn picks an unused component with probability
    proportional to its likelihood; the weight is target over proposal.
    """
    S, K, _ = L.shape
    logw = np.zeros((S, proposals))
    used = np.zeros((S, proposals, K), dtype=bool)
    for n in range(K):
        row = np.broadcast_to(L[:, None, n, :], (S, proposals, K))
        row = np.where(used, -np.inf, row)
        lse = logsumexp(row, axis=-1, keepdims=True)
        prob = np.exp(row - lse)
        u = rng.random((S, proposals, 1))
        choice = (np.cumsum(prob, axis=-1) < u).sum(-1)
        choice = np.minimum(choice, K - 1)
        # guard against landing on a used slot from round-off
        bad = np.take_along_axis(used, choice[..., None], -1)[..., 0]
        if bad.any():
            choice[bad] = np.argmax(np.where(used, -np.inf, prob), axis=-1)[bad]
        used[np.arange(S)[:, None], np.arange(proposals)[None, :], choice] = True
        logw += lse[..., 0]
    # target / proposal telescopes to the product of the per-step normalizers
    return logsumexp(logw, axis=1) - math.log(proposals)


def log_density(spec, x, rng=None, rotations=256, proposals=16):
    """``log p(X)`` per graph sample ``x`` of shape ``[S, K, 2]``."""
    x = np.asarray(x, dtype=np.float64)
    logk = math.lgamma(spec.K + 1)
    if isinstance(spec, MogSpec):
        L = _gauss_loglik(x, spec.means(), spec.sigma)
        if spec.K <= EXACT_PERMUTATION_LIMIT:
            return _log_perm_exact(L) - logk
        return _log_perm_importance(L, rng or np.random.default_rng(0), proposals) - logk
    if isinstance(spec, MogRingSpec):
        rng = rng or np.random.default_rng(0)
        # stratified rotation grid, jittered within each stratum
        angles = 2 * math.pi * (np.arange(rotations) + rng.random(rotations)) / rotations
        out = np.empty(x.shape[0])
        for lo in range(0, x.shape[0], 512):
            xb = x[lo:lo + 512]
            L = _gauss_loglik(xb[:, None], spec.means(angles[:, None]), spec.sigma)
            lp = _log_perm_exact(L) if spec.K <= EXACT_PERMUTATION_LIMIT else \
                _log_perm_importance(L.reshape(-1, spec.K, spec.K), rng, proposals).reshape(
                    L.shape[:2])
            out[lo:lo + 512] = logsumexp(lp, axis=1) - math.log(rotations)
        return out - logk
    raise TypeError(f"no density for {spec!r}")


def mc_entropy(spec, samples=10_000, rng=None, rotations=256):
    """Per-node entropy estimate ``-E[log p(X)] / N`` and its standard error.

    MoG with ``K <= 8`` is exact per sample; larger ``K`` uses importance
    sampling over assignments. MoG-Ring marginalizes the rotation with a
    finite stratified grid, which by Jensen biases the estimate upward,
    so it is an upper bound.
    """
    if samples < 10_000:
        raise ValueError(f"need at least 10000 samples, got {samples}")
    rng = rng or np.random.default_rng(spec.seed + 7919)
    x = sample(spec, samples, rng).node_features
    lp = log_density(spec, x, rng=rng, rotations=rotations)
    per_node = -lp / spec.K
    return float(per_node.mean()), float(per_node.std(ddof=1) / math.sqrt(samples))


def gaussian_entropy_2d(sigma):
    return math.log(2 * math.pi * math.e * sigma ** 2)


def batch_to_csv(batch):
    x = batch.node_features if isinstance(batch, GraphBatch) else np.asarray(batch)
    if x.ndim == 2:
        x = x[:, None, :]
    buf = io.StringIO()
    buf.write("sample_id,node_id,x,y\n")
    for s in range(x.shape[0]):
        for n in range(x.shape[1]):
            buf.write(f"{s},{n},{x[s, n, 0]!r},{x[s, n, 1]!r}\n")
    return buf.getvalue()


DATASETS = {
    "mog4": lambda seed=0: MogSpec(K=4, seed=seed),
    "mog9": lambda seed=0: MogSpec(K=9, seed=seed),
    "mog16": lambda seed=0: MogSpec(K=16, seed=seed),
    "mogring": lambda seed=0: MogRingSpec(K=4, seed=seed),
    "moons2d": lambda seed=0: MoonsSpec(seed=seed),
}


def get_spec(name, seed=0):
    try:
        return DATASETS[name](seed)
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}") from None
