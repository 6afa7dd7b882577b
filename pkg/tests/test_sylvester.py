import numpy as np
import pytest
import torch

from convexp import dense
from convexp import exponential as ex
from convexp import sylvester as syl
from convexp.verify import random_sylvester_layer, randomize_


def t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def fd_logdet(layer, x):
    def fn(v):
        with torch.no_grad():
            return layer(t(v).reshape(x.shape))[0].numpy().ravel()

    return dense.logdet_via_lu(dense.numerical_jacobian(fn, x.numpy().ravel()))


def test_identity_at_init(rng):
    layer = syl.conv_sylvester_layer((2, 4, 4), hidden_channels=8).eval()
    x = t(rng.standard_normal((3, 2, 4, 4)))
    with torch.no_grad():
        z, ld = syl.sylvester_forward(layer, x)
        back, iters = syl.sylvester_inverse(layer, z)
    assert torch.equal(ld, torch.zeros(3, dtype=torch.float64))
    assert float((z - x).abs().max()) < 1e-12
    assert iters == 1
    assert float((back - x).abs().max()) < 1e-12


def test_zero_heads_give_zero_f(rng):
    net = syl.MaskedArNet((1, 4, 4), hidden_channels=8)
    f, diag = syl.f_ar_forward(net, 0.5, t(rng.standard_normal((2, 1, 4, 4))))
    assert torch.all(f == 0) and torch.all(diag == 0)


def test_diag_matches_finite_differences(rng):
    layer = random_sylvester_layer(rng, (1, 4, 4))
    ar = layer.ar
    u = t(rng.standard_normal((1, 1, 4, 4)))
    with torch.no_grad():
        _, diag = ar(u)
        eps = 1e-6
        fd = torch.empty(16, dtype=torch.float64)
        for i in range(16):
            e = torch.zeros(16, dtype=torch.float64)
            e[i] = eps
            up = ar(u + e.reshape(u.shape))[0].reshape(-1)[i]
            dn = ar(u - e.reshape(u.shape))[0].reshape(-1)[i]
            fd[i] = (up - dn) / (2 * eps)
    np.testing.assert_allclose(diag.reshape(-1).numpy(), fd.numpy(), atol=1e-5)


def test_diag_bounded_by_gamma(rng):
    worst = 0.0
    for _ in range(25):
        layer = random_sylvester_layer(rng, (2, 3, 3), hidden_channels=8)
        with torch.no_grad():
            for p in layer.ar.net.heads.parameters():
                p.add_(t(3 * rng.standard_normal(tuple(p.shape))))
            _, diag = layer.ar(t(2 * rng.standard_normal((40, 2, 3, 3))))
        worst = max(worst, float(diag.abs().max()))
    assert worst <= 0.5


def test_heads_are_strictly_autoregressive(rng):
    layer = random_sylvester_layer(rng, (2, 3, 3), hidden_channels=8)
    u0 = rng.standard_normal(18)
    order = np.arange(18).reshape(2, 9).T.ravel()     # raster, channel-major in a pixel
    for head in range(4):
        def fn(u, head=head):
            with torch.no_grad():
                return layer.ar.net(t(u).reshape(1, 2, 3, 3))[head].numpy().ravel()

        J = dense.numerical_jacobian(fn, u0)[np.ix_(order, order)]
        assert np.abs(np.triu(J)).max() < 1e-10
        assert np.abs(np.tril(J, -1)).max() > 1e-6     # and not trivially zero


def test_head_squashing(rng):
    layer = random_sylvester_layer(rng, (1, 3, 3), hidden_channels=8)
    with torch.no_grad():
        for p in layer.ar.net.heads.parameters():
            p.add_(t(10 * rng.standard_normal(tuple(p.shape))))
        s1, s2, _, _ = layer.ar.net(t(5 * rng.standard_normal((20, 1, 3, 3))))
    assert float(s1.abs().max()) <= 1 and float(s2.abs().max()) <= 1


def test_masked_convs_are_certified(rng):
    layer = random_sylvester_layer(rng, (2, 4, 4), hidden_channels=8)
    # power iteration approaches sigma from below; run it long enough to settle
    layer.certify(3000)
    for conv in list(layer.ar.net.trunk) + [layer.ar.net.heads]:
        op = syl.Conv2dOperator(conv.effective_weight().detach())
        d = conv.weight.shape[1] * 16
        basis = torch.eye(d, dtype=torch.float64).reshape(d, conv.weight.shape[1], 4, 4)
        M = op.apply(basis).reshape(d, -1).numpy().T      # rectangular channel map
        sigma = np.linalg.norm(M, 2)
        assert sigma <= 1.5 * (1 + 1e-6)


@pytest.mark.parametrize("shape", [(1, 3, 3), (1, 4, 4), (2, 2, 2)])
def test_logdet_matches_dense_jacobian(rng, shape):
    layer = random_sylvester_layer(rng, shape, exp_config=ex.VERIFY)
    x = t(rng.standard_normal((1,) + shape))
    with torch.no_grad():
        _, ld = layer(x)
    assert float(ld[0]) == pytest.approx(fd_logdet(layer, x), abs=1e-4)


def test_logdet_independent_of_basis(rng):
    """With u = Wx held fixed the log-determinant only depends on f_AR."""
    layer = random_sylvester_layer(rng, (1, 3, 3), exp_config=ex.VERIFY)
    x = t(rng.standard_normal((1, 1, 3, 3)))
    with torch.no_grad():
        _, ld = layer(x)
        u = layer.basis(x)
        _, diag = layer.ar(u)
    assert float(ld[0]) == pytest.approx(float(torch.log1p(diag).sum()), abs=1e-12)


def test_inverse_round_trip(rng):
    for _ in range(5):
        layer = random_sylvester_layer(rng, (2, 8, 8))
        x = t(rng.standard_normal((4, 2, 8, 8)))
        with torch.no_grad():
            z, _ = layer(x)
            back, iters = syl.sylvester_inverse(layer, z)
        assert float((back - x).abs().max()) < 1e-3
        assert iters <= 50


def test_scalar_contraction(rng):
    layer = random_sylvester_layer(rng, (1, 1, 1))
    with torch.no_grad():
        for p in layer.ar.net.heads.parameters():
            p.copy_(t(rng.standard_normal(tuple(p.shape))))
        v = t([[[[1.7]]]])
        u_star, info = layer.solve(v, syl.FixedPointConfig(1e-15, 200))
        assert info.converged
        u, errs = v, []
        for _ in range(10):
            errs.append(float((u - u_star).abs().max()))
            u = v - layer.ar(u)[0]
    ratios = [b / a for a, b in zip(errs, errs[1:]) if a > 1e-13]
    assert ratios and max(ratios) <= 0.5


def test_non_convergence_flag_and_error(rng):
    layer = random_sylvester_layer(rng, (1, 4, 4))
    with torch.no_grad():
        for p in layer.ar.net.heads.parameters():
            p.add_(t(rng.standard_normal(tuple(p.shape))))
    z = t(rng.standard_normal((1, 1, 4, 4)))
    cfg = syl.FixedPointConfig(abs_tolerance=1e-14, max_iters=1)
    layer.strict_inverse = False
    with pytest.warns(syl.FixedPointWarning):
        layer.inverse(z, cfg=cfg)
    assert not layer.last_inverse.converged
    layer.strict_inverse = True
    with pytest.raises(syl.FixedPointError):
        layer.inverse(z, cfg=cfg)


def test_fixed_point_config_validation():
    with pytest.raises(ValueError):
        syl.FixedPointConfig(abs_tolerance=0.0)
    with pytest.raises(ValueError):
        syl.FixedPointConfig(max_iters=0)
    assert syl.FixedPointConfig() == syl.FixedPointConfig(1e-4, 50)


def test_gamma_validation():
    with pytest.raises(ValueError):
        syl.MaskedArFunction(syl.MaskedArNet((1, 2, 2), hidden_channels=4), gamma=1.0)


def test_original_sylvester_configuration(rng):
    torch.manual_seed(3)
    d = 5
    layer = syl.original_sylvester_layer(d).eval()
    x = t(rng.standard_normal((1, d)))
    with torch.no_grad():
        z, ld = layer(x)
        R, Rt = layer.ar.matrices()
        Q = layer.basis(torch.eye(d, dtype=torch.float64)).T
        ref = x[0] + Q.T @ Rt @ torch.tanh(R @ Q @ x[0] + layer.ar.b)
    np.testing.assert_allclose(z[0].numpy(), ref.numpy(), atol=1e-12)
    assert np.allclose(np.triu(R.numpy()), R.numpy()) and np.allclose(np.triu(Rt.numpy()),
                                                                         Rt.numpy())
    assert torch.all(torch.diagonal(R) * torch.diagonal(Rt) > -1)
    assert float(ld[0]) == pytest.approx(fd_logdet(layer, x), abs=1e-4)
    with torch.no_grad():
        back = layer.inverse(z, cfg=syl.FixedPointConfig(1e-10, 500))
    assert float((back - x).abs().max()) < 1e-6


def test_training_mode_refreshes_caps(rng):
    layer = syl.conv_sylvester_layer((1, 4, 4), hidden_channels=8)
    with torch.no_grad():
        layer.basis.kernel.mul_(1e4)
    layer.train()
    layer(t(rng.standard_normal((2, 1, 4, 4))))
    assert float(layer.basis.cap.scale) < 1.0


def test_gradients_flow_to_all_parts(rng):
    layer = random_sylvester_layer(rng, (1, 4, 4), hidden_channels=8).train()
    z, ld = layer(t(rng.standard_normal((3, 1, 4, 4))))
    (z.square().sum() - ld.sum()).backward()
    for name, p in layer.named_parameters():
        assert p.grad is not None, name
