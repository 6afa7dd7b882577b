"""Invariant suites comparing the implicit layers against dense oracles.

Every check draws its own random operators from ``(seed, check name)`` so
results do not depend on which suites run. Traces and log-determinants are
looked up through module attributes at call time; patching them (e.g. to
inject a bug) is visible to the suite.
"""
import io
import itertools
import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from . import dense
from . import exponential as ex
from . import linop
from . import sylvester as syl
from .autodiff import gradcheck
from .flows import (ActNorm, AffineCoupling, ConvConditioner, ConvExpLayer, FlowModel,
                    Invertible1x1)

SUITES = ("expm", "graph", "equivariance", "sylvester", "flows")
SCOPES = ("all", "expm", "sylvester", "graph", "equivariance")

T_EXACT = ex.ExpConfig.terms(20)
T_TRAIN = ex.ExpConfig.terms(6)
COEFF = 0.9


@dataclass
class CheckResult:
    suite: str
    property: str
    seed: int
    trials: int
    worst: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.worst < self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.suite}/{self.property} seed={self.seed} trials={self.trials} "
                f"worst={self.worst:.3e} tol={self.tolerance:.0e}")


def _rng(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def _max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# ---------------------------------------------------------------------------
# random operators


def random_conv_operator(rng, max_c=3, max_hw=6, coeff=COEFF, padding=None):
    """Random 3x3 (or 1x1) convolution scaled to spectral norm ``coeff``."""
    c = int(rng.integers(1, max_c + 1))
    h, w = (int(v) for v in rng.integers(2, max_hw + 1, size=2))
    k = 3 if rng.random() < 0.8 else 1
    padding = padding or ("zero", "periodic")[int(rng.integers(2))]
    op = linop.Conv2dOperator(_t(rng.standard_normal((c, c, k, k))), padding)
    state = linop.PowerIterState((c, h, w), seed=int(rng.integers(2 ** 31)))
    op, _ = linop.spectral_normalize(op, coeff, state, 200)
    return op, (c, h, w)


def random_adjacency(rng, n, p=0.5):
    upper = np.triu(rng.random((n, n)) < p, 1)
    return (upper | upper.T).astype(np.float64)


def random_gcl_operator(rng, max_n=6, max_nf=4, coeff=None):
    """Random GCL obeying the norm rule, or scaled to ``coeff`` if given."""
    n = int(rng.integers(2, max_n + 1))
    nf = int(rng.integers(1, max_nf + 1))
    A = random_adjacency(rng, n)
    max_nb = max(int(A.sum(1).max()), 1)
    t0, t1 = linop.gcl_norm_rule(rng.standard_normal((nf, nf)), rng.standard_normal((nf, nf)),
                                 max_nb, iters=100)
    op = linop.GraphConvOperator(t0, t1, _t(A))
    if coeff is not None:
        state = linop.PowerIterState((n, nf), seed=int(rng.integers(2 ** 31)))
        op, _ = linop.spectral_normalize(op, coeff, state, 200)
    return op, (n, nf)


# ---------------------------------------------------------------------------
# series checks shared by the conv and graph suites


def _oracle_errors(op, shape, rng, n_vec=3):
    M = dense.build_equivalent_matrix(op, shape)
    E = dense.dense_expm(M)
    x = rng.standard_normal((n_vec,) + tuple(shape))
    z = ex.expv(op, _t(x), T_EXACT).numpy()
    ref = (E @ x.reshape(n_vec, -1).T).T.reshape(x.shape)
    return _max_abs(z, ref), M, E


def _series_checks(suite, seed, make_op, trials):
    rng = _rng(seed, suite + "/oracle")
    worst_oracle = worst_trace = 0.0
    for _ in range(trials):
        op, shape = make_op(rng)
        err, M, E = _oracle_errors(op, shape, rng)
        worst_oracle = max(worst_oracle, err)
        trace = float(ex.logdet_exp(op, shape))
        worst_trace = max(worst_trace, abs(trace - dense.logdet_via_lu(E)))
    out = [CheckResult(suite, "oracle_equivalence_T20", seed, trials, worst_oracle, 1e-6),
           CheckResult(suite, "logdet_trace_identity", seed, trials, worst_trace, 1e-7)]

    rng = _rng(seed, suite + "/inverse")
    worst = {20: 0.0, 6: 0.0}
    worst_resid = worst_bound = 0.0
    for _ in range(trials):
        op, shape = make_op(rng, coeff=COEFF)
        x = _t(rng.standard_normal((2,) + tuple(shape)))
        for T, cfg in ((20, T_EXACT), (6, T_TRAIN)):
            back = ex.inverse_expv(op, ex.expv(op, x, cfg), cfg)
            worst[T] = max(worst[T], _max_abs(back, x))
        # truncation residual at 6 terms against the dense exponential
        M = dense.build_equivalent_matrix(op, shape)
        ref = dense.dense_expm(M) @ x[0].numpy().ravel()
        z6 = ex.expv(op, x[0], T_TRAIN).numpy().ravel()
        worst_resid = max(worst_resid, np.linalg.norm(z6 - ref) / np.linalg.norm(ref))
        # term norms against the bound with the exact spectral norm
        norm = float(np.linalg.norm(M, 2))
        for i, actual, bound in ex.convergence_report(op, x[0], 20, norm=norm)[1:]:
            if bound > 0:
                worst_bound = max(worst_bound, actual / bound - 1.0)
            elif actual > 0:
                worst_bound = float("inf")
    out += [CheckResult(suite, "inverse_roundtrip_T20", seed, trials, worst[20], 1e-6),
            CheckResult(suite, "inverse_roundtrip_T6", seed, trials, worst[6], 1e-3),
            CheckResult(suite, "truncation_residual_T6", seed, trials, worst_resid, 1e-3),
            # relative excess of measured term norm over the bound; roundoff only
            CheckResult(suite, "term_norm_bound", seed, trials, max(worst_bound, 0.0), 1e-9)]
    return out


def suite_expm(seed=0, trials=100):
    def make(rng, coeff=COEFF):
        return random_conv_operator(rng, coeff=coeff)

    out = _series_checks("expm", seed, make, trials)
    # closed-form trace against the materialized matrix (zero and periodic)
    rng = _rng(seed, "expm/trace")
    worst = 0.0
    for _ in range(trials):
        op, shape = random_conv_operator(rng)
        M = dense.build_equivalent_matrix(op, shape)
        worst = max(worst, abs(float(linop.operator_trace(op, shape)) - np.trace(M)))
    out.append(CheckResult("expm", "closed_form_trace", seed, trials, worst, 1e-10))
    # transpose consistency: <M x, y> = <x, M^T y>
    rng = _rng(seed, "expm/transpose")
    worst = 0.0
    for _ in range(trials):
        op, shape = random_conv_operator(rng)
        x, y = (_t(rng.standard_normal(shape)) for _ in range(2))
        a = float((op.apply(x) * y).sum())
        b = float((x * op.transpose_apply(y)).sum())
        worst = max(worst, abs(a - b))
    out.append(CheckResult("expm", "transpose_adjoint", seed, trials, worst, 1e-10))
    return out


def suite_graph(seed=0, trials=100):
    def make(rng, coeff=None):
        return random_gcl_operator(rng, coeff=coeff)

    out = _series_checks("graph", seed, make, trials)
    # Kronecker form of the equivalent matrix under column-major vectorization
    rng = _rng(seed, "graph/kron")
    worst = 0.0
    for _ in range(trials):
        op, shape = random_gcl_operator(rng)
        M = dense.build_equivalent_matrix(op, shape, order="F")
        ref = np.kron(op.theta0.numpy().T, np.eye(shape[0])) + \
            np.kron(op.theta1.numpy().T, op.adj_hat.numpy())
        worst = max(worst, _max_abs(M, ref))
    out.append(CheckResult("graph", "kronecker_form", seed, trials, worst, 1e-12))
    return out


def suite_equivariance(seed=0, trials=5):
    rng = _rng(seed, "equivariance/shift")
    worst = 0.0
    n_checks = 0
    for _ in range(trials):
        c, h, w = 2, 6, 6
        op = linop.Conv2dOperator(_t(0.3 * rng.standard_normal((c, c, 3, 3))), "periodic")
        x = _t(rng.standard_normal((c, h, w)))
        z = ex.expv(op, x, T_EXACT)
        for dy, dx in itertools.product(range(h), range(w)):
            shifted = ex.expv(op, torch.roll(x, (dy, dx), (-2, -1)), T_EXACT)
            worst = max(worst, _max_abs(shifted, torch.roll(z, (dy, dx), (-2, -1))))
            n_checks += 1
    out = [CheckResult("equivariance", "circular_shift_commutation", seed, n_checks, worst,
                       1e-9)]

    rng = _rng(seed, "equivariance/perm")
    worst = 0.0
    n_checks = 0
    n, nf = 4, 2
    for _ in range(trials):
        A = random_adjacency(rng, n, p=0.6)
        t0 = 0.3 * rng.standard_normal((nf, nf))
        t1 = 0.3 * rng.standard_normal((nf, nf))
        x = rng.standard_normal((n, nf))
        z = ex.expv(linop.GraphConvOperator(t0, t1, _t(A)), _t(x), T_EXACT).numpy()
        for perm in itertools.permutations(range(n)):
            P = np.eye(n)[list(perm)]
            op_p = linop.GraphConvOperator(t0, t1, _t(P @ A @ P.T))
            zp = ex.expv(op_p, _t(P @ x), T_EXACT).numpy()
            worst = max(worst, _max_abs(zp, P @ z))
            n_checks += 1
    out.append(CheckResult("equivariance", "node_permutation_commutation", seed, n_checks,
                           worst, 1e-9))

    # a whole graph model: NLL unchanged by relabelling nodes
    from .models import build_model

    rng = _rng(seed, "equivariance/model")
    worst = 0.0
    n_checks = 0
    for name in ("graphflow", "graphflow+exp"):
        model = build_model(name, (n, 2), precision="float64", seed=seed)
        randomize_(model, rng, std=0.1)
        model.eval()
        x = _t(rng.standard_normal((16, n, 2)))
        with torch.no_grad():
            ref = model.log_prob(x)
            for perm in itertools.permutations(range(n)):
                worst = max(worst, _max_abs(model.log_prob(x[:, list(perm)]), ref))
                n_checks += 1
    out.append(CheckResult("equivariance", "graph_model_nll_permutation", seed, n_checks,
                           worst, 1e-9))
    return out


# ---------------------------------------------------------------------------
# Sylvester layers


@torch.no_grad()
def randomize_(module, rng, std=0.3):
    """Add Gaussian noise to every parameter, then re-certify norm caps."""
    for p in module.parameters():
        p.add_(torch.from_numpy(std * rng.standard_normal(tuple(p.shape))).to(p.dtype))
    module.certify(200)
    return module


def random_sylvester_layer(rng, shape, exp_config=None, hidden_channels=16):
    torch.manual_seed(int(rng.integers(2 ** 31)))
    layer = syl.conv_sylvester_layer(shape, hidden_channels=hidden_channels,
                                     exp_config=exp_config, seed=int(rng.integers(1000)))
    layer.strict_inverse = True
    randomize_(layer, rng)
    return layer.eval()


def _fd_logdet(fn, x):
    J = dense.numerical_jacobian(fn, x.numpy().ravel(), eps=1e-6)
    return dense.logdet_via_lu(J)


def suite_sylvester(seed=0, trials=100):
    out = []
    rng = _rng(seed, "sylvester/inverse")
    worst_err = 0.0
    worst_iters = 0
    for _ in range(trials):
        layer = random_sylvester_layer(rng, (2, 8, 8))
        x = _t(rng.standard_normal((1, 2, 8, 8)))
        with torch.no_grad():
            z, _ = layer(x)
            back = layer.inverse(z)
        worst_err = max(worst_err, _max_abs(back, x))
        worst_iters = max(worst_iters, layer.last_inverse.iters)
    out.append(CheckResult("sylvester", "inverse_roundtrip", seed, trials, worst_err, 1e-3))
    out.append(CheckResult("sylvester", "fixed_point_iterations", seed, trials, worst_iters,
                           51))

    # scalar instances: the error shrinks by at least gamma per iteration
    rng = _rng(seed, "sylvester/ratio")
    worst = 0.0
    for _ in range(trials):
        layer = random_sylvester_layer(rng, (1, 1, 1))
        with torch.no_grad():
            for p in layer.ar.net.heads.parameters():
                p.copy_(_t(rng.standard_normal(tuple(p.shape))))
            v = _t(rng.standard_normal((1, 1, 1, 1)) * 3)
            u_star, _ = layer.solve(v, syl.FixedPointConfig(1e-15, 500))
            u, prev = v, None
            for _ in range(30):
                err = float((u - u_star).abs().max())
                if prev is not None and prev > 1e-12:
                    worst = max(worst, err / prev)
                prev = err
                u = v - layer.ar(u)[0]
    out.append(CheckResult("sylvester", "scalar_contraction_ratio", seed, trials, worst,
                           0.5 + 1e-9))

    # Jacobian diagonal bound
    rng = _rng(seed, "sylvester/diag")
    worst = 0.0
    for _ in range(trials):
        layer = random_sylvester_layer(rng, (1, 4, 4))
        with torch.no_grad():
            for p in layer.ar.net.heads.parameters():
                p.add_(_t(2 * rng.standard_normal(tuple(p.shape))))
            _, diag = layer.ar(_t(3 * rng.standard_normal((10, 1, 4, 4))))
        worst = max(worst, float(diag.abs().max()))
    # max |diag| <= gamma; tanh saturates to exactly 1 in float64
    out.append(CheckResult("sylvester", "diag_jacobian_bound", seed, 10 * trials, worst,
                           layer.ar.gamma + 1e-12))

    # strict autoregressiveness of the heads
    rng = _rng(seed, "sylvester/strict")
    worst = 0.0
    n = max(trials // 10, 1)
    for _ in range(n):
        layer = random_sylvester_layer(rng, (2, 3, 3))
        u0 = rng.standard_normal(18)
        for head in range(4):
            def fn(u, head=head):
                with torch.no_grad():
                    return layer.ar.net(_t(u).reshape(1, 2, 3, 3))[head].numpy().ravel()

            J = dense.numerical_jacobian(fn, u0)
            # order: raster over pixels, channel-major within a pixel
            order = np.arange(18).reshape(2, 9).T.ravel()
            Jo = J[np.ix_(order, order)]
            worst = max(worst, float(np.abs(np.triu(Jo)).max()))
    out.append(CheckResult("sylvester", "strict_autoregressive_heads", seed, 4 * n, worst,
                           1e-10))

    # analytic log-determinant against the dense finite-difference Jacobian
    rng = _rng(seed, "sylvester/logdet")
    worst = 0.0
    n = max(trials // 10, 1)
    for k in range(n):
        shape = [(1, 3, 3), (1, 4, 4), (2, 2, 2)][k % 3]
        layer = random_sylvester_layer(rng, shape, exp_config=ex.VERIFY)
        x = _t(rng.standard_normal((1,) + shape))
        with torch.no_grad():
            _, ld = layer(x)

            def fn(v):
                return layer(_t(v).reshape(x.shape))[0].numpy().ravel()

            worst = max(worst, abs(float(ld[0]) - _fd_logdet(fn, x)))
    out.append(CheckResult("sylvester", "logdet_vs_dense_jacobian", seed, n, worst, 1e-4))

    rng = _rng(seed, "sylvester/original")
    worst = 0.0
    for k in range(n):
        d = 2 + k % 5
        torch.manual_seed(int(rng.integers(2 ** 31)))
        layer = syl.original_sylvester_layer(d).eval()
        x = _t(rng.standard_normal((1, d)))
        with torch.no_grad():
            z, ld = layer(x)
            # the layer equals x + Q^T R~ tanh(R Q x + b) written out densely
            R, Rt = layer.ar.matrices()
            Q = layer.basis(torch.eye(d, dtype=torch.float64)).T
            ref = x + (Rt @ torch.tanh(R @ Q @ x[0] + layer.ar.b)) @ Q

            def fn(v):
                return layer(_t(v).reshape(1, d))[0].numpy().ravel()

            worst = max(worst, abs(float(ld[0]) - _fd_logdet(fn, x)), _max_abs(z, ref))
    out.append(CheckResult("sylvester", "original_sylvester_special_case", seed, n, worst,
                           1e-4))
    return out


# ---------------------------------------------------------------------------
# composed models


def gradcheck_model(seed=0, shape=(1, 4, 4), hidden=8):
    """Conv-exponential, Sylvester and checkerboard coupling on one image."""
    torch.manual_seed(seed)
    c = shape[0]
    layers = [
        ConvExpLayer(shape, exp_config=ex.ExpConfig.terms(12), seed=seed),
        syl.conv_sylvester_layer(shape, hidden_channels=hidden, seed=seed + 1,
                                 exp_config=ex.ExpConfig.terms(12)),
        AffineCoupling(ConvConditioner(c, 2 * c, hidden=hidden), c, layout="image",
                       split="checkerboard"),
    ]
    return FlowModel(layers, shape, layout="image")


def suite_flows(seed=0, trials=10):
    out = []
    rng = _rng(seed, "flows/logdet")
    worst = 0.0
    for _ in range(trials):
        model = gradcheck_model(int(rng.integers(1000)))
        for layer in model.layers:
            if hasattr(layer, "exp_config"):
                layer.exp_config = ex.VERIFY
        model.layers[1].basis.exp_config = ex.VERIFY
        randomize_(model, rng, std=0.2)
        model.eval()
        x = _t(rng.standard_normal((1, 1, 4, 4)))
        with torch.no_grad():
            _, ld = model(x)

            def fn(v):
                return model(_t(v).reshape(x.shape))[0].numpy().ravel()

            worst = max(worst, abs(float(ld[0]) - _fd_logdet(fn, x)))
    out.append(CheckResult("flows", "model_logdet_vs_dense_jacobian", seed, trials, worst,
                           1e-4))

    rng = _rng(seed, "flows/roundtrip")
    worst = 0.0
    for _ in range(trials):
        torch.manual_seed(int(rng.integers(2 ** 31)))
        shape = (2, 4, 4)
        model = FlowModel([
            ActNorm(2, "image"), Invertible1x1(2, "image"),
            AffineCoupling(ConvConditioner(1, 2, hidden=8), 2, layout="image"),
            ConvExpLayer(shape), syl.conv_sylvester_layer(shape, hidden_channels=8),
        ], shape)
        model.train()
        x = _t(rng.standard_normal((8,) + shape))
        model(x)                    # data-dependent init
        randomize_(model, rng, std=0.2)
        model.eval()
        with torch.no_grad():
            back = model.inverse(model(x)[0])
        worst = max(worst, _max_abs(back, x))
    out.append(CheckResult("flows", "model_roundtrip", seed, trials, worst, 1e-3))

    rng = _rng(seed, "flows/gradcheck")
    model = gradcheck_model(seed)
    randomize_(model, rng, std=0.2)
    model.eval()
    x = _t(rng.standard_normal((4, 1, 4, 4)))
    err = gradcheck(lambda: model.nll(x), list(model.parameters()), eps=1e-5)
    out.append(CheckResult("flows", "gradcheck_nll", seed, 1, err, 1e-4))
    return out


SUITE_FUNCS = {"expm": suite_expm, "graph": suite_graph, "equivariance": suite_equivariance,
               "sylvester": suite_sylvester, "flows": suite_flows}


def run(scope="all", seed=0):
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    names = SUITES if scope == "all" else (scope,)
    results = []
    for name in names:
        results.extend(SUITE_FUNCS[name](seed))
    return results


def to_csv(results):
    buf = io.StringIO()
    buf.write("suite,property,seed,trials,worst,tolerance,status\n")
    for r in results:
        worst = repr(float(r.worst)) if math.isfinite(r.worst) else str(r.worst)
        buf.write(f"{r.suite},{r.property},{r.seed},{r.trials},{worst},{r.tolerance!r},"
                  f"{'pass' if r.passed else 'fail'}\n")
    return buf.getvalue()
