import numpy as np
import pytest
import scipy.sparse as sp

from delaycert.dual_lmi import assemble, check_feasible
from delaycert.polyalg import LinearEquations, MatrixPoly
from delaycert.sdp import (
    FEASIBLE,
    INFEASIBLE,
    SdpProblem,
    parse_sdpa,
    problem_from_sdpa,
    solve,
    solve_sdpa_file,
    to_sdpa_sparse,
    verify,
)
from delaycert.systems import example_a


def one_by_one(rhs):
    prob = SdpProblem()
    blk = prob.add_psd_block(1)
    A = sp.csr_matrix(([1.0], ([0], [blk.base])), shape=(1, prob.n_vars))
    prob.add_equalities(LinearEquations(A, np.array([rhs])))
    return prob, blk


def test_block_registry():
    prob = SdpProblem()
    a = prob.add_psd_block(2)
    b = prob.add_psd_block(3)
    assert a.n_entries == 3 and len(np.unique(a.ids)) == 3
    assert set(np.unique(a.ids)).isdisjoint(np.unique(b.ids))
    assert a.ids[0, 1] == a.ids[1, 0]
    with pytest.raises(ValueError):
        prob.add_psd_block(0)


def test_contradiction_flagged():
    prob = SdpProblem()
    v = prob.new_free_var()
    p = MatrixPoly.variable_matrix([[int(v[0])]], (1, 0))
    prob.add_poly_equality(MatrixPoly.identity(1), p)  # constant 1 = 0, s-coefficient v = 0
    assert prob.trivially_infeasible
    assert solve(prob).status == INFEASIBLE


def test_toy_feasible():
    prob, blk = one_by_one(1.0)
    sol = solve(prob)
    assert sol.status == FEASIBLE
    assert sol.x[blk.base] == pytest.approx(1.0, abs=1e-8)


def test_toy_infeasible():
    prob, _ = one_by_one(-1.0)
    assert solve(prob).status == INFEASIBLE


def test_verify_exact_and_perturbed():
    prob = SdpProblem()
    blk = prob.add_psd_block(2)
    rows = sp.csr_matrix(([1.0, 1.0], ([0, 1], [blk.base, blk.base + 2])), shape=(2, prob.n_vars))
    prob.add_equalities(LinearEquations(rows, np.array([2.0, 1.0])))
    x = np.array([2.0, 0.5, 1.0])
    rep = verify(prob, x)
    assert rep.max_residual == 0.0 and rep.min_eigenvalue >= 0.0
    x[0] += 1e-3
    assert verify(prob, x).max_residual == pytest.approx(1e-3)


def test_sdpa_minimal_file(tmp_path):
    prob, _ = one_by_one(1.0)
    path = tmp_path / "toy.dat-s"
    to_sdpa_sparse(prob, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 5
    assert lines[:4] == ["1", "1", "1", "1.0"]
    assert lines[4] == "1 1 1 1 1.0"


def test_sdpa_round_trip_with_free_variables(tmp_path):
    prob = SdpProblem()
    blk = prob.add_psd_block(2)
    f = prob.new_free_var(2)
    nn = prob.new_nonneg_var()
    A = sp.csr_matrix(
        ([1.0, 0.5, -1.0, 1.0, 2.0, 1.0],
         ([0, 0, 0, 1, 1, 1], [blk.base, blk.base + 1, int(f[0]), blk.base + 2, int(f[1]), int(nn[0])])),
        shape=(2, prob.n_vars),
    )
    prob.add_equalities(LinearEquations(A, np.array([0.25, 3.0])))
    path = tmp_path / "p.dat-s"
    data = to_sdpa_sparse(prob, path)
    assert parse_sdpa(path).key() == data.key()
    again = tmp_path / "q.dat-s"
    to_sdpa_sparse(problem_from_sdpa(parse_sdpa(path)), again)
    assert parse_sdpa(again).key() == data.key()
    assert solve(problem_from_sdpa(data)).status == solve(prob).status == FEASIBLE


def test_example_a_program_and_certificate():
    program = assemble(example_a(1.0), 2)
    report = check_feasible(program)
    assert report.feasible
    assert report.residual < 1e-7 and report.min_eig > -1e-8


def test_example_a_export_round_trip(tmp_path):
    program = assemble(example_a(1.0), 1)
    path = tmp_path / "a.dat-s"
    to_sdpa_sparse(program.problem, path)
    assert solve_sdpa_file(path).status == check_feasible(program).status
