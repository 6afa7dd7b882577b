"""Implicit operator exponential ``exp(M) x`` by its power series."""
import io
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import torch

from .linop import as_tensor


class SeriesTruncationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ExpConfig:
    max_terms: int = 20
    fixed_terms: Optional[int] = 6
    tail_tolerance: float = 1e-8
    mode: str = "fixed"

    def __post_init__(self):
        if self.max_terms < 1:
            raise ValueError("max_terms must be >= 1")
        if self.tail_tolerance <= 0:
            raise ValueError("tail_tolerance must be positive")
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "fixed" and self.fixed_terms is not None and self.fixed_terms < 0:
            raise ValueError("fixed_terms must be >= 0")

    @classmethod
    def terms(cls, n):
        """Fixed truncation after ``n`` terms."""
        return cls(max_terms=max(n, 1), fixed_terms=n, mode="fixed")

    @classmethod
    def adaptive(cls, tol=1e-8, max_terms=20):
        return cls(max_terms=max_terms, fixed_terms=None, tail_tolerance=tol, mode="adaptive")

    @property
    def n_terms(self):
        if self.mode == "fixed":
            return self.max_terms if self.fixed_terms is None else self.fixed_terms
        return self.max_terms


TRAINING = ExpConfig()
VERIFY = ExpConfig.adaptive()


@dataclass
class ExpInfo:
    terms: int
    converged: bool
    last_rel_term: float


def _batch_norms(t, event_ndim):
    if event_ndim == 0 or t.ndim <= event_ndim:
        return t.reshape(1, -1).norm(dim=1)
    return t.reshape(t.shape[:-event_ndim].numel(), -1).norm(dim=1)


def expv(op, x, cfg=None, event_ndim=None, return_info=False):
    """``exp(M) x`` using only applications of ``op``.

    Running product ``pi <- op(pi) / i`` and sum ``z <- z + pi``. In adaptive
    mode the series stops at the first ``i`` with ``||pi|| <= tol * ||z||``
    for every sample in the batch; ``event_ndim`` says how many trailing axes
    form one sample (default: the whole tensor is one sample).
    """
    cfg = cfg or TRAINING
    x = as_tensor(x)
    z = x
    pi = x
    converged = cfg.mode == "fixed"
    rel = 0.0
    i = 0
    for i in range(1, cfg.n_terms + 1):
        pi = op.apply(pi) / i
        if pi.shape != x.shape:
            raise ValueError(f"operator changed shape {tuple(x.shape)} -> {tuple(pi.shape)}")
        z = z + pi
        if cfg.mode == "adaptive":
            with torch.no_grad():
                en = x.ndim if event_ndim is None else event_ndim
                pn = _batch_norms(pi, en)
                zn = _batch_norms(z, en)
                rel = float((pn / zn.clamp_min(1e-300)).max())
            if rel <= cfg.tail_tolerance:
                converged = True
                break
    if cfg.mode == "adaptive" and not converged:
        warnings.warn(f"series did not reach tolerance {cfg.tail_tolerance:g} within "
                      f"{cfg.max_terms} terms (last relative term {rel:.3e})",
                      SeriesTruncationWarning, stacklevel=2)
    if return_info:
        return z, ExpInfo(terms=i, converged=converged, last_rel_term=rel)
    return z


def inverse_expv(op, z, cfg=None, event_ndim=None, return_info=False):
    """``exp(-M) z``, the inverse of :func:`expv`."""
    return expv(-op, z, cfg, event_ndim=event_ndim, return_info=return_info)


def logdet_exp(op, input_shape):
    """``log det exp(M) = Tr M``, exact."""
    return op.trace(input_shape)


def term_bound(norm, i):
    """``norm**i / i!`` evaluated in log space."""
    if norm < 0:
        raise ValueError("norm must be nonnegative")
    if i == 0:
        return 1.0
    if norm == 0:
        return 0.0
    return math.exp(i * math.log(norm) - math.lgamma(i + 1))


@torch.no_grad()
def convergence_report(op, x, max_terms, norm=None):
    """Rows ``(i, ||pi_i|| / ||x||, bound_i)`` for ``i = 0..max_terms``.

    ``norm`` is the operator norm used for the bound; without it the bound
    column is NaN.
    """
    x = as_tensor(x)
    x_norm = float(x.norm())
    rows = [(0, 1.0, 1.0)]
    pi = x
    for i in range(1, max_terms + 1):
        pi = op.apply(pi) / i
        actual = float(pi.norm()) / x_norm if x_norm > 0 else 0.0
        bound = term_bound(norm, i) if norm is not None else float("nan")
        rows.append((i, actual, bound))
    return rows


def report_to_csv(rows, header=("i", "actual_rel_norm", "bound")):
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()
