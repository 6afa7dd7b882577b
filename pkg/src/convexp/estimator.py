"""scikit-learn style wrapper around the flow models."""
import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import make_optimizer, step_decay
from .models import build_model
from .training import evaluate


class FlowDensityEstimator(TransformerMixin, BaseEstimator):
    """Normalizing-flow density estimator.

    ``X`` is ``[n_samples, N, 2]`` for the graph models (a 2-D ``[n, 2]``
    array is read as ``N = 1``) and ``[n_samples, 2]`` for
    ``convsylvester2d``. ``transform`` maps data to the latent space,
    ``score_samples`` returns per-sample log-densities in nats.

    Parameters
    ----------
    model : {"coupling", "graphflow", "graphflow+exp", "convsylvester2d"}
    iters, batch_size, lr : training budget. Each step draws a minibatch
        with replacement from ``X``.
    subflows, hidden, terms : architecture size and exponential series terms.
    precision : dtype of the conditioner networks.
    random_state : seed for weights and minibatch order.
    """

    def __init__(self, model="graphflow+exp", iters=1000, batch_size=256, lr=3e-3,
                 subflows=3, hidden=64, terms=6, precision="float64", random_state=0):
        self.model = model
        self.iters = iters
        self.batch_size = batch_size
        self.lr = lr
        self.subflows = subflows
        self.hidden = hidden
        self.terms = terms
        self.precision = precision
        self.random_state = random_state

    def _layout(self, X, fitting=False):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if self.model == "convsylvester2d":
            if X.ndim != 2 or X.shape[1] != 2:
                raise ValueError(f"convsylvester2d expects [n, 2] input, got {X.shape}")
            shape = (1, 1, 2)
        else:
            if X.ndim == 2:
                X = X[:, None, :]
            if X.ndim != 3:
                raise ValueError(f"expected [n, N, features] input, got {X.shape}")
            shape = X.shape[1:]
        if not fitting and tuple(shape) != tuple(self.event_shape_):
            raise ValueError(f"expected per-sample shape {self.event_shape_}, got {tuple(shape)}")
        return torch.from_numpy(X.reshape((X.shape[0],) + tuple(shape)).copy()), tuple(shape)

    def fit(self, X, y=None):
        x, shape = self._layout(X, fitting=True)
        seed = int(self.random_state or 0)
        kw = {} if self.model == "convsylvester2d" else {"precision": self.precision}
        self.flow_ = build_model(self.model, shape, subflows=self.subflows, hidden=self.hidden,
                                 terms=self.terms, seed=seed, **kw)
        self.event_shape_ = shape
        rng = np.random.default_rng(seed)
        opt = make_optimizer(self.flow_.parameters(), lr=self.lr)
        sched = step_decay(opt, self.iters)
        self.flow_.train()
        self.loss_curve_ = []
        for _ in range(self.iters):
            idx = rng.integers(0, x.shape[0], size=min(self.batch_size, x.shape[0]))
            loss = self.flow_.nll(x[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss after {len(self.loss_curve_)} steps")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            self.loss_curve_.append(loss.item())
        self.flow_.eval()
        self.n_features_in_ = int(np.prod(shape))
        return self

    @torch.no_grad()
    def transform(self, X):
        check_is_fitted(self, "flow_")
        x, _ = self._layout(X)
        z, _ = self.flow_(x)
        return z.reshape(x.shape[0], -1).numpy()

    @torch.no_grad()
    def inverse_transform(self, Z):
        check_is_fitted(self, "flow_")
        Z = check_array(Z, allow_nd=True, dtype=np.float64)
        z = torch.from_numpy(Z.reshape((Z.shape[0],) + self.event_shape_).copy())
        return self._output(self.flow_.inverse(z))

    def _output(self, x):
        x = x.numpy()
        if self.model == "convsylvester2d":
            return x.reshape(x.shape[0], 2)
        return x.reshape((x.shape[0],) + self.event_shape_)

    @torch.no_grad()
    def score_samples(self, X):
        check_is_fitted(self, "flow_")
        x, _ = self._layout(X)
        return self.flow_.log_prob(x).numpy()

    def score(self, X, y=None):
        """Mean log-likelihood per sample, in nats."""
        return float(np.mean(self.score_samples(X)))

    def nll(self, X):
        """Mean NLL in nats, per node for the graph models."""
        check_is_fitted(self, "flow_")
        x, _ = self._layout(X)
        return evaluate(self.flow_, x)

    @torch.no_grad()
    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "flow_")
        g = torch.Generator().manual_seed(int(random_state or 0))
        z = torch.randn((n_samples,) + self.event_shape_, generator=g, dtype=torch.float64)
        return self._output(self.flow_.inverse(z))
