import numpy as np
import pytest

from delaycert.operators import quadratic_forms
from delaycert.polyalg import IntervalGrid
from delaycert.sdp import SdpProblem
from delaycert.selftest import _constant_head, gram_pointwise, random_xi_member
from delaycert.soscone import (
    BasisDescriptor,
    GramCertificate,
    bivariate_basis,
    expand_gram,
    make_xi_member,
    monomial_basis,
    weight_interval,
    weight_one,
)


def test_bases():
    assert monomial_basis(0) == [0] and bivariate_basis(0) == [(0, 0)]
    assert monomial_basis(1) == [0, 1]
    assert bivariate_basis(1) == [(0, 0), (1, 0), (0, 1)]
    assert len(monomial_basis(2)) == 3 and len(bivariate_basis(2)) == 6
    for d in range(6):
        assert len(bivariate_basis(d)) == BasisDescriptor(d, 1, 1).q
    with pytest.raises(ValueError):
        monomial_basis(-1)


def test_descriptor_sizes():
    desc = BasisDescriptor(2, 3, 2)
    assert desc.size1 == 2 * 3 * 3
    assert desc.size2 == 4 * 6 * 3
    # a negative per-component degree drops that component
    lean = BasisDescriptor(1, 2, 1, (1, 1), (-1, 1))
    assert len(lean.y2) == 3 and set(lean.y2[:, 2]) == {1}


def _scalar_cert(tau, weights="one"):
    grid = IntervalGrid([tau])
    prob = SdpProblem()
    desc = BasisDescriptor(0, 1, 1)
    blk = prob.add_psd_block(2)
    cert = GramCertificate(desc, blk.ids, blk)
    g = weight_one(grid) if weights == "one" else weight_interval(grid)
    return grid, prob, blk, expand_gram(g, cert, grid)


def test_constant_gram_expansion():
    tau = 1.7
    grid, prob, blk, op = _scalar_cert(tau)
    q11, q12, q22 = 0.9, -0.3, 0.4
    x = np.zeros(prob.n_vars)
    x[blk.base : blk.base + 3] = [q11, q12, q22]
    num = op.assign(x)
    assert num.M.pieces[0].evaluate(-0.4)[0, 0] == pytest.approx(q11)
    assert num.N.pieces[0][0].evaluate(-0.4, -1.1)[0, 0] == pytest.approx(2 * q12 + tau * q22)
    x[blk.base : blk.base + 3] = [1.0, 0.0, 1.0]
    num = op.assign(x)
    assert num.M.pieces[0].evaluate(-1.0)[0, 0] == pytest.approx(1.0)
    assert num.N.pieces[0][0].evaluate(-0.2, -0.3)[0, 0] == pytest.approx(tau)


def test_interval_weight_multiplier():
    tau = 2.0
    grid, prob, blk, op = _scalar_cert(tau, weights="interval")
    x = np.zeros(prob.n_vars)
    x[blk.base] = 1.0
    M = op.assign(x).M.pieces[0]
    for s in np.linspace(-tau, 0.0, 7):
        assert M.evaluate(s)[0, 0] == pytest.approx(-s * (s + tau))
        assert M.evaluate(s)[0, 0] >= -1e-15


def test_reduced_variable_count():
    grid = IntervalGrid([1.0])
    prob = SdpProblem()
    make_xi_member(0, 1, 1, grid, prob, reduced=True)
    assert prob.n_vars == 3 + 1
    full = SdpProblem()
    make_xi_member(0, 1, 1, grid, full, reduced=False)
    assert full.n_vars == 3 + 3


def test_zero_certificate_gives_zero_operator():
    grid = IntervalGrid([0.5, 1.5])
    prob = SdpProblem()
    xi = make_xi_member(1, 2, 2, grid, prob)
    num = xi.op.assign(np.zeros(prob.n_vars))
    assert all(p.is_zero for p in num.M.pieces)
    assert all(p.is_zero for row in num.N.pieces for p in row)


@pytest.mark.parametrize("d,K", [(0, 1), (1, 1), (2, 1), (0, 2), (1, 2), (2, 2)])
def test_membership_is_positive(d, K):
    rng = np.random.default_rng(100 + 10 * d + K)
    xi, x, grid = random_xi_member(d, 1, K, rng)
    op = xi.op.assign(x)
    zs = [_constant_head(0, 1, grid, rng) for _ in range(100)]
    assert np.min(quadratic_forms(op, zs)) >= -1e-9


@pytest.mark.parametrize("d,K,reduced", [(1, 1, False), (2, 2, False), (1, 3, True)])
def test_gram_pointwise(d, K, reduced):
    rng = np.random.default_rng(7 * d + K)
    xi, x, grid = random_xi_member(d, 2, K, rng, reduced=reduced)
    weights = [weight_one(grid), weight_interval(grid)]
    for _ in range(5):
        s, th = rng.uniform(-grid.tau(K), 0.0, 2)
        i, j = grid.piece_of(s), grid.piece_of(th)
        M_want = np.zeros((2, 2))
        N_want = np.zeros((2, 2))
        for cert, g in zip(xi.certificates, weights):
            M, N = gram_pointwise(cert, x, grid, g, s, th)
            M_want += M
            N_want += N
        op = xi.op.assign(x)
        assert np.allclose(op.M.pieces[i].evaluate(s), M_want, atol=1e-10)
        assert np.allclose(op.N.pieces[i][j].evaluate(s, th), N_want, atol=1e-10)


def test_symmetry_and_degree():
    rng = np.random.default_rng(3)
    d, K = 2, 2
    xi, x, grid = random_xi_member(d, 2, K, rng)
    op = xi.op.assign(x)
    for i in range(K):
        M = op.M.pieces[i]
        assert max(e[0] for e in M.monomials) <= 2 * d + 2
        assert np.allclose(M.evaluate(-0.3), M.evaluate(-0.3).T)
        for j in range(K):
            a = op.N.pieces[i][j].evaluate(-0.2, -1.3)
            b = op.N.pieces[j][i].evaluate(-1.3, -0.2)
            assert np.allclose(a, b.T, atol=1e-12)
