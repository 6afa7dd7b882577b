"""Brute-force dense references.

Everything here materializes the full ``d x d`` matrix of an operator and is
only meant for verification at desk scale.
"""
import io
import math

import numpy as np
import torch

DEFAULT_DIM_CAP = 4096

# 18 Taylor terms after scaling to ||A||_1 <= 0.5 leaves a tail below 1e-22.
_TAYLOR_TERMS = 18
_SCALE_TARGET = 0.5


class DimensionCapError(ValueError):
    pass


class SingularMatrixError(ValueError):
    pass


def _as_square(M, what="matrix"):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{what} must be square, got shape {M.shape}")
    return M


def build_equivalent_matrix(op, input_shape, cap=DEFAULT_DIM_CAP, order="C"):
    """Materialize the matrix ``M`` with ``vec(op(x)) == M @ vec(x)``.

    Column ``j`` is ``op`` applied to the ``j``-th standard basis tensor.
    ``order="F"`` uses column-major vectorization, which is the convention
    under which a graph convolution reads ``theta0^T (x) I + theta1^T (x) A``.
    """
    input_shape = tuple(int(s) for s in input_shape)
    d = math.prod(input_shape)
    if d > cap:
        raise DimensionCapError(f"operator dimension {d} exceeds cap {cap}")
    if order not in ("C", "F"):
        raise ValueError("order must be 'C' or 'F'")

    basis = np.eye(d).reshape((d,) + input_shape, order="C")
    if order == "F":
        # basis[j] must be e_j under column-major vectorization
        basis = np.stack([np.eye(d)[j].reshape(input_shape, order="F") for j in range(d)])
    with torch.no_grad():
        out = op.apply(torch.as_tensor(basis, dtype=torch.float64))
    out = out.detach().cpu().numpy()
    if out.shape != basis.shape:
        raise ValueError(
            f"operator is not dimensionality-preserving: {input_shape} -> {out.shape[1:]}")
    cols = out.reshape(d, d, order="C") if order == "C" else np.stack(
        [o.reshape(-1, order="F") for o in out])
    return np.ascontiguousarray(cols.T)


def dense_expm(M):
    """Matrix exponential by scaling and squaring of a truncated Taylor series."""
    M = _as_square(M)
    n = M.shape[0]
    norm1 = np.abs(M).sum(axis=0).max() if n else 0.0
    s = 0
    if norm1 > _SCALE_TARGET:
        s = int(math.ceil(math.log2(norm1 / _SCALE_TARGET)))
    A = M / (2.0 ** s)

    result = np.eye(n)
    term = np.eye(n)
    for i in range(1, _TAYLOR_TERMS + 1):
        term = term @ A / i
        result = result + term
    for _ in range(s):
        result = result @ result
    return result


def logdet_via_lu(M, return_sign=False, tol=1e-12):
    """``log|det M|`` by LU factorization with partial pivoting.

    Raises :class:`SingularMatrixError` when a pivot falls below ``tol``
    (relative to the largest absolute entry of ``M``).
    """
    U = _as_square(M).copy()
    n = U.shape[0]
    scale = np.abs(U).max() if n else 1.0
    if scale == 0.0:
        raise SingularMatrixError("zero matrix")
    sign = 1.0
    logabs = 0.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(U[k:, k])))
        pivot = U[p, k]
        if abs(pivot) <= tol * scale:
            raise SingularMatrixError(f"pivot {pivot:.3e} at column {k} below tolerance")
        if p != k:
            U[[k, p]] = U[[p, k]]
            sign = -sign
        if pivot < 0:
            sign = -sign
        logabs += math.log(abs(pivot))
        if k + 1 < n:
            factors = U[k + 1:, k] / pivot
            U[k + 1:, k:] -= np.outer(factors, U[k, k:])
    if return_sign:
        return logabs, sign
    return logabs


def numerical_jacobian(fn, x, eps=1e-6):
    """Central-difference Jacobian of a map between flat float64 vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    f0 = np.asarray(fn(x), dtype=np.float64).ravel()
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps
        J[:, j] = (np.asarray(fn(x + e)).ravel() - np.asarray(fn(x - e)).ravel()) / (2 * eps)
    return J


def matrix_to_csv(M):
    """Row-major CSV text at full (round-trip) precision."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    buf = io.StringIO()
    for row in M:
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def matrix_from_csv(text):
    rows = [line for line in text.splitlines() if line.strip()]
    return np.array([[float(v) for v in line.split(",")] for line in rows], dtype=np.float64)
