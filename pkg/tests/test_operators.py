import numpy as np
import pytest

from delaycert.operators import (
    DelaySystem,
    MultKernelOp,
    apply_complete,
    derivative_op_multi,
    derivative_op_single,
    flatten_L1,
    inner_product,
    lyapunov_derivative,
    derivative_form,
    make_free_operator,
    random_poly_state,
    quadratic_forms,
    spacing_make,
    state_callables,
    theta_to_s,
    z_inner,
)
from delaycert.polyalg import IntervalGrid, MatrixPoly, PiecewisePoly1D, PiecewisePoly2D, VarPool, differentiate
from delaycert.selftest import random_numeric_operator


def max_coef(p: MatrixPoly) -> float:
    vals = [abs(c).max() if c.nnz else 0.0 for c in p.coeffs.values()]
    return max(vals, default=0.0)


def n_vars(p: MatrixPoly) -> int:
    return len(p.variables())


# -- make_free_operator ------------------------------------------------------


def test_scalar_degree_zero_counts():
    op = make_free_operator(1, 1, [1.0], 0, eliminate_pq=True)
    assert n_vars(op.S[0]) == 1
    assert n_vars(op.R[0][0]) == 1
    # P and Q are expressions in those, not new unknowns
    assert set(op.P.variables()) <= set(op.S[0].variables()) | set(op.R[0][0].variables())
    assert len(op.structural_constraints) == 0


def test_kernel_symmetry_identifies_coefficients():
    op = make_free_operator(1, 1, [1.0], 1, eliminate_pq=True, kernel_degree="separate")
    R = op.R[0][0]
    assert n_vars(R) == 3  # 1, s + theta, s theta
    assert R.entry(0, 0, (1, 0)) == R.entry(0, 0, (0, 1))


def test_symmetric_s_block():
    op = make_free_operator(2, 1, [1.0], 0, eliminate_pq=True)
    assert n_vars(op.S[0]) == 3


def test_kernel_pairing_is_transpose():
    rng = np.random.default_rng(5)
    op = random_numeric_operator(2, 2, 1, rng)
    for i in range(2):
        for j in range(2):
            a = op.R[i][j].evaluate(-0.3, -1.1)
            b = op.R[j][i].evaluate(-1.1, -0.3)
            assert np.allclose(a, b.T)


# -- L1 flattening -----------------------------------------------------------


def test_flatten_unit_delay_modes_agree():
    rng = np.random.default_rng(6)
    op = random_numeric_operator(1, 1, 1, rng, taus=[1.0])
    a, b = flatten_L1(op, "jacobian"), flatten_L1(op, "direct")
    for s_, t_ in [(-0.2, -0.7), (-0.9, -0.1)]:
        assert np.allclose(a.N.pieces[0][0].evaluate(s_, t_), b.N.pieces[0][0].evaluate(s_, t_))
        M = a.M.pieces[0].evaluate(s_)
        want = np.block([[op.P.evaluate(), op.Q[0].evaluate(s_)], [op.Q[0].evaluate(s_).T, op.S[0].evaluate(s_)]])
        assert np.allclose(M, want)
        assert np.allclose(a.N.pieces[0][0].evaluate(s_, t_)[1:, 1:], op.R[0][0].evaluate(s_, t_))


def test_flatten_second_tile_scaling():
    rng = np.random.default_rng(7)
    op = random_numeric_operator(1, 2, 1, rng, taus=[1.0, 2.0])
    flat = flatten_L1(op)
    s_ = -1.4
    rho = 2.0 * (s_ + 1.0)
    M = flat.M.pieces[1].evaluate(s_)
    assert M[1, 1] == pytest.approx(4.0 * op.S[1].evaluate(rho)[0, 0])
    assert M[0, 1] == pytest.approx(4.0 * op.Q[1].evaluate(rho)[0, 0])


def test_flatten_quadratic_form_matches():
    rng = np.random.default_rng(8)
    for K in (1, 2, 3):
        op = random_numeric_operator(2, K, 2, rng)
        z = random_poly_state(2, op.grid, 3, rng)
        img = apply_complete(op, z)
        direct = z_inner(op.grid, img.y, img.psi, z.x, state_callables(z))
        flat = quadratic_forms(flatten_L1(op), [z.flattened()])[0]
        assert flat == pytest.approx(direct, rel=1e-8)


# -- multiplier/kernel application ------------------------------------------


def _const_op(grid, m_val, n_val):
    K = grid.K
    M = PiecewisePoly1D(grid, [MatrixPoly.constant([[m_val]]) for _ in range(K)])
    N = PiecewisePoly2D(grid, [[MatrixPoly.constant([[n_val]]) for _ in range(K)] for _ in range(K)])
    return MultKernelOp(grid, 0, 1, M, N)


def test_identity_multiplier_gives_norm():
    grid = IntervalGrid([1.0])
    op = _const_op(grid, 1.0, 0.0)

    def f(s):
        return np.sin(3 * np.asarray(s))[:, None]

    want = 0.5 - np.sin(6.0) / 12.0  # int_{-1}^0 sin^2(3s) ds
    assert inner_product(f, op, f) == pytest.approx(want, rel=1e-10)


def test_rank_one_kernel():
    grid = IntervalGrid([1.0])
    op = _const_op(grid, 0.0, 1.0)

    def one(s):
        return np.ones((np.size(s), 1))

    assert inner_product(one, op, one) == pytest.approx(1.0)


# -- derivative blocks -------------------------------------------------------


def _single_blocks(A0, A1, tau, d=1):
    sys = DelaySystem([A0, A1], [tau])
    op = make_free_operator(sys.n, 1, [tau], d, eliminate_pq=True)
    return sys, op, derivative_op_single(sys, op.S[0], op.R[0][0])


def test_single_example_a_blocks():
    tau = 1.3
    sys, op, der = _single_blocks([[0.0]], [[-1.0]], tau)
    S, R = op.S[0], op.R[0][0]
    S11 = R.subs("s", -tau).subs("theta", 0.0).scale(-tau) + S.subs("s", 0.0).scale(0.5)
    assert max_coef(der.D0.block(0, 1, 0, 1) - (S11 + S11.transpose())) < 1e-12
    assert max_coef(der.D0.block(0, 1, 1, 2) - S.subs("s", -tau).scale(-tau)) < 1e-12


def test_single_without_delay_coupling():
    A0 = [[0.3, 1.0], [-1.0, -0.2]]
    sys, op, der = _single_blocks(A0, np.zeros((2, 2)), 0.8)
    assert max_coef(der.D0.block(0, 2, 2, 4)) == 0.0
    R = op.R[0][0]
    S13 = MatrixPoly.constant(A0) @ theta_to_s(R.subs("s", 0.0)) + differentiate(R, "s").subs("theta", 0.0).transpose()
    assert max_coef(der.V.block(0, 2, 0, 2) - S13) < 1e-12


def test_single_constant_functions():
    sys, op, der = _single_blocks([[-1.0]], [[0.5]], 1.0, d=0)
    assert der.E.is_zero and der.Sdot.is_zero


def test_multi_reduces_to_single():
    for A0, A1 in [([[0.0]], [[-1.0]]), ([[0.0, 1.0], [-2.0, 0.1]], [[0.0, 0.0], [1.0, 0.0]])]:
        sys, op, single = _single_blocks(A0, A1, 1.2, d=2)
        multi = derivative_op_multi(sys, op)
        assert max_coef(multi.D1 - single.D0) < 1e-12
        assert max_coef(multi.V[0] - single.V) < 1e-12
        assert max_coef(multi.Sdot[0] - single.Sdot) < 1e-12
        assert max_coef(multi.G[0][0] - single.E) < 1e-12


def test_multi_without_delay_coupling():
    A0 = [[0.0, 1.0], [-1.0, 0.1]]
    sys = DelaySystem([A0, np.zeros((2, 2)), np.zeros((2, 2))], [0.5, 1.0])
    op = make_free_operator(2, 2, sys.taus, 1)
    der = derivative_op_multi(sys, op)
    assert all(c.is_zero for c in der.C)
    for i in range(2):
        want = MatrixPoly.constant(A0) @ op.Q[i] + differentiate(op.Q[i], "s")
        assert max_coef(der.B[i] - want) < 1e-12


def test_multi_scalar_two_delay_c0():
    b = 1.7
    sys = DelaySystem([[[-2.0]], [[b]], [[-1.0]]], [1.0, 2.0])
    op = make_free_operator(1, 2, sys.taus, 1)
    der = derivative_op_multi(sys, op)
    Q1, Q2, S1, S2 = op.Q[0], op.Q[1], op.S[0], op.S[1]
    want = (
        op.P.scale(-2.0)
        + (Q1.subs("s", -1.0).transpose().scale(b) - Q2.subs("s", -2.0).transpose()).scale(2.0)
        + (S1.subs("s", 0.0) + S2.subs("s", 0.0)).scale(0.5)
    )
    assert max_coef(der.C0 - want) < 1e-12


def test_derivative_blocks_match_generator():
    rng = np.random.default_rng(9)
    for K in (1, 2, 3):
        taus = list(np.cumsum(rng.uniform(0.4, 1.0, K)))
        A = [rng.standard_normal((2, 2)) for _ in range(K + 1)]
        sys = DelaySystem(A, taus)
        op = random_numeric_operator(2, K, 2, rng, taus=taus)
        der = derivative_op_multi(sys, op)
        for _ in range(3):
            z = random_poly_state(2, op.grid, 3, rng)
            assert derivative_form(sys, der, z) == pytest.approx(lyapunov_derivative(sys, op, z), rel=1e-9)


def test_structure_preservation():
    rng = np.random.default_rng(10)
    for K in (1, 2, 3):
        op = random_numeric_operator(2, K, 2, rng)
        z = random_poly_state(2, op.grid, 2, rng, in_X=True)
        img = apply_complete(op, z)
        for i in range(K):
            assert np.allclose(img.psi[i](np.array([0.0]))[0], img.y, atol=1e-10)


# -- spacing -----------------------------------------------------------------


def test_spacing_linear_zero_mean():
    tK = 2.0
    pool = VarPool()
    sp_op = spacing_make(1, 1, 1, [tK], 1, pool)
    x = np.zeros(pool.n_vars)
    Kf = sp_op.parts["K"][0]
    x[Kf.entry(0, 0, (0, 0)).terms[0][0]] = tK / 2
    x[Kf.entry(0, 0, (1, 0)).terms[0][0]] = 1.0
    assert np.allclose(sp_op.constraints.residual(x), 0.0)
    T = sp_op.as_op().assign(x)
    F = T.M.pieces[0]
    assert np.allclose(F.evaluate(-0.5), [[-0.5 + tK / 2, 0.0], [0.0, 0.0]])
    assert max_coef(T.N.pieces[0][0]) == 0.0
    rng = np.random.default_rng(11)
    for _ in range(10):
        c, a = rng.standard_normal(2)

        def z(s, c=c, a=a):
            s = np.atleast_1d(s)
            return np.stack([np.full(s.size, c), np.cos(a * s)], axis=1)

        assert abs(inner_product(z, T, z)) < 1e-12


def test_spacing_all_zero():
    pool = VarPool()
    sp_op = spacing_make(2, 1, 2, [0.5, 1.0], 2, pool)
    T = sp_op.as_op().assign(np.zeros(pool.n_vars))
    assert all(max_coef(p) == 0.0 for p in T.M.pieces)
    assert all(max_coef(p) == 0.0 for row in T.N.pieces for p in row)
