import numpy as np
import pytest

from delaycert.polyalg import (
    AffineScalar,
    IntervalGrid,
    MatrixPoly,
    VarPool,
    affine_substitute,
    coefficient_equalities,
    differentiate,
    evaluate,
    integrate_definite,
    multiply,
)

s = MatrixPoly.monomial("s")
th = MatrixPoly.monomial("theta")
one = MatrixPoly.identity(1)


def x(k, mono=(0, 0)):
    return MatrixPoly.variable_matrix([[k]], mono)


def test_additive_inverse_is_zero():
    assert (s + (-s)).is_zero


def test_add_collects_like_terms():
    p = (s * 2.0 + one * 3.0) + MatrixPoly.monomial("s", 2)
    assert p.evaluate(2.0)[0, 0] == pytest.approx(4 + 4 + 3)
    assert sorted(p.monomials) == [(0, 0), (1, 0), (2, 0)]


def test_add_is_affine_in_decision_variables():
    p = x(0, (1, 0)) + x(1, (1, 0))
    e = p.entry(0, 0, (1, 0))
    assert e == AffineScalar(0.0, ((0, 1.0), (1, 1.0)))


def test_add_dimension_mismatch():
    with pytest.raises(ValueError):
        MatrixPoly.identity(2) + MatrixPoly.identity(3)


def test_multiply_examples():
    assert multiply(s, s).evaluate(3.0)[0, 0] == 9.0
    M = MatrixPoly.constant([[1.0, 2.0], [3.0, 4.0]]) * MatrixPoly.monomial("s")
    assert np.allclose(multiply(MatrixPoly.identity(2), M).evaluate(1.5), M.evaluate(1.5))
    g = -(s * (s + one))  # tau = 1
    p = multiply(g, x(1))
    assert p.entry(0, 0, (2, 0)) == AffineScalar(0.0, ((1, -1.0),))
    assert p.entry(0, 0, (1, 0)) == AffineScalar(0.0, ((1, -1.0),))


def test_multiply_rejects_nonlinear():
    with pytest.raises(ValueError, match="nonlinear"):
        multiply(x(0), x(1))
    with pytest.raises(ValueError):
        AffineScalar.var(0) * AffineScalar.var(1)


def test_differentiate():
    assert np.allclose(differentiate(s * s, "s").evaluate(2.0), 4.0)
    assert np.allclose(differentiate(s * th, "theta").evaluate(5.0, 1.0), 5.0)
    assert differentiate(MatrixPoly.constant([[1.0, 2.0]]), "s").is_zero


def test_integrate_definite():
    assert integrate_definite(s + one, "s", -1, 0).evaluate()[0, 0] == pytest.approx(0.5)
    # (omega s)(omega theta) with omega in the s slot: integrate omega^2, keep theta
    p = multiply(multiply(s, s), th)
    q = integrate_definite(p, "s", -1, 0)
    assert q.evaluate(0.0, 2.0)[0, 0] == pytest.approx(2.0 / 3.0)
    r = integrate_definite(x(1), "s", -2.5, 0.0)
    assert r.entry(0, 0) == AffineScalar(0.0, ((1, 2.5),))


def test_affine_substitute():
    assert np.allclose(affine_substitute(s, "s", 1.0, 0.0).evaluate(0.7), 0.7)
    a, tau0 = 0.5, 0.0
    assert np.allclose(affine_substitute(s, "s", 1 / a, tau0 / a).evaluate(0.3), 0.6)
    p = affine_substitute(s * s, "s", 1.0, 1.0)
    monos, coefs = p.numeric_arrays()
    got = {tuple(m): c[0, 0] for m, c in zip(monos, coefs)}
    assert got == {(0, 0): 1.0, (1, 0): 2.0, (2, 0): 1.0}
    with pytest.raises(ValueError):
        affine_substitute(s, "s", 0.0, 1.0)


def test_coefficient_equalities_examples():
    lhs = s * 2.0 + one * 3.0
    rhs = x(0) + x(1, (1, 0))
    eqs = coefficient_equalities(lhs, rhs)
    sol = np.linalg.lstsq(eqs.A.toarray(), eqs.b, rcond=None)[0]
    assert np.allclose(sol, [3.0, 2.0])
    assert len(coefficient_equalities(one * 2.0, one * 2.0)) == 0
    eqs = coefficient_equalities(x(1, (1, 0)), MatrixPoly.zeros(1))
    assert eqs.as_dicts() == [({1: 1.0}, 0.0)]


def test_coefficient_equalities_dimension_mismatch():
    with pytest.raises(ValueError):
        coefficient_equalities(MatrixPoly.identity(2), MatrixPoly.identity(1))


def test_evaluate_examples():
    assert evaluate(s * s, (2.0, 0.0))[0, 0] == 4.0
    assert evaluate(x(1, (1, 0)), (3.0, 0.0), {0: 0.0, 1: 2.0})[0, 0] == 6.0
    with pytest.raises(KeyError):
        evaluate(x(1, (1, 0)), (3.0, 0.0), {1: 2.0})


def test_transpose_twice_is_identity():
    p = MatrixPoly.constant([[1.0, 2.0, 0.0], [0.0, 0.0, 5.0]]) * MatrixPoly.monomial("theta", 2)
    q = p.transpose().transpose()
    assert np.allclose(q.evaluate(0.3, -0.4), p.evaluate(0.3, -0.4))
    assert p.transpose().shape == (3, 2)


def test_varpool_counts():
    pool = VarPool()
    a = pool.new_free_vars(3)
    b = pool.new_free_vars(2)
    assert list(a) == [0, 1, 2] and list(b) == [3, 4] and pool.n_vars == 5


def test_interval_grid():
    g = IntervalGrid([1.0, 2.0])
    assert g.intervals == [(-1.0, 0.0), (-2.0, -1.0)]
    assert g.compression(1) == pytest.approx(0.5)
    assert g.stretch(1) == pytest.approx((2.0, 2.0))
    with pytest.raises(ValueError):
        IntervalGrid([1.0, 1.0])
    with pytest.raises(ValueError):
        IntervalGrid([0.0, 1.0])
