import numpy as np
import pytest

from delaycert.dual_lmi import (
    NoSignChange,
    ParameterizedFamily,
    assemble,
    assemble_multi,
    assemble_single,
    certify,
    check_feasible,
    default_epsilon,
    margin_bisection,
    xi_degrees,
)
from delaycert.operators import DelaySystem, quadratic_forms
from delaycert.sdp import FEASIBLE, INFEASIBLE, solve
from delaycert.selftest import _constant_head
from delaycert.systems import example_a, example_b, example_c


def test_example_a_inside_and_outside():
    assert certify(example_a(1.0), 2, path="single").status == FEASIBLE
    assert certify(example_a(1.6), 2, path="single").status == INFEASIBLE


@pytest.mark.parametrize("d", [1, 2])
def test_positive_feedback_never_certified(d):
    sys = DelaySystem([[[0.0]], [[1.0]]], [0.5])
    assert not certify(sys, d).feasible


@pytest.mark.parametrize("path", ["single", "multi"])
def test_delay_free_stable_scalar(path):
    sys = DelaySystem([[[-1.0]], [[0.0]]], [0.7])
    rep = certify(sys, 1, path=path)
    assert rep.feasible and rep.residual < 1e-7


def test_single_rejects_two_delays():
    with pytest.raises(ValueError):
        assemble_single(example_c(2.0), 1)


@pytest.mark.parametrize("tau", [1.0, 1.6])
def test_assembly_paths_agree(tau):
    sys = example_a(tau)
    a = check_feasible(assemble_single(sys, 2))
    b = check_feasible(assemble_multi(sys, 2))
    assert a.status == b.status


def test_example_c_inside():
    assert certify(example_c(2.0), 3).feasible


def test_example_c_beyond_analytic_limit():
    assert certify(example_c(3.2), 2).status == INFEASIBLE


@pytest.mark.slow
def test_example_b_beyond_margin():
    assert certify(example_b(1.8), 4).status == INFEASIBLE


def test_epsilon_halving_keeps_feasibility():
    sys = example_a(1.3)
    eps = default_epsilon(sys)
    assert certify(sys, 1, eps).feasible
    assert certify(sys, 1, eps / 2).feasible


@pytest.mark.parametrize("path,spacing", [("single", "eliminated"), ("single", "explicit"), ("multi", "eliminated")])
def test_cone_member_matches_target_up_to_spacing(path, spacing):
    program = assemble(example_a(1.2), 1, path=path, spacing=spacing)
    sol = solve(program.problem)
    assert sol.status == FEASIBLE
    rng = np.random.default_rng(0)
    for key, xi in zip(("target_p", "target_d"), program.xi):
        target = program.handles[key].assign(sol.x)
        member = xi.op.assign(sol.x)
        zs = [_constant_head(target.m, target.n, target.grid, rng) for _ in range(20)]
        a = quadratic_forms(member, zs)
        b = quadratic_forms(target, zs)
        assert np.max(np.abs(a - b)) < 1e-6 * max(1.0, np.max(np.abs(b)))


def test_certificate_extraction():
    rep = certify(example_a(1.0), 1, with_certificate=True)
    cert = rep.certificate
    assert rep.feasible and set(cert) == {"P", "Q", "S", "R"}
    P = np.array(cert["P"])
    assert np.allclose(P, P.T) and np.linalg.eigvalsh(P)[0] > 0
    assert rep.to_dict()["certificate"] is cert


def test_bisection_requires_sign_change():
    with pytest.raises(NoSignChange):
        margin_bisection(ParameterizedFamily(example_a(1.0)), 0.5, 1.0, 1)


def test_bisection_on_example_a():
    res = margin_bisection(ParameterizedFamily(example_a(1.0)), 1.0, 1.7, 2, tol=1e-3)
    assert res.margin == pytest.approx(1.5707, abs=1e-3)
    assert res.bracket[1] - res.bracket[0] <= 1e-3
    assert all(e["feasible"] == (e["lambda"] <= res.margin) for e in res.log)


def test_matrix_family():
    fam = ParameterizedFamily(example_c(0.0), "matrix", [[[0.0]], [[1.0]], [[0.0]]])
    assert fam(2.5).A[1][0, 0] == 2.5
    with pytest.raises(ValueError):
        ParameterizedFamily(example_c(0.0), "matrix", [[[1.0]]])
    with pytest.raises(ValueError):
        ParameterizedFamily(example_a(1.0))(0.0)


def test_cone_degree_policies():
    full, weighted, dd = xi_degrees("lean", 2, 2, 1)
    assert dd == 2
    assert full == ((2, 2, 2), (-1, -1, 2))
    assert weighted == ((2, 2, 1), (2, 2, 1))
    assert xi_degrees("plus-one", 2, 2, 1)[2] == 3
    with pytest.raises(ValueError):
        xi_degrees("bogus", 1, 1, 1)
