"""Stability feasibility programs and margin search.

``assemble_single`` (one delay, ``P`` and ``Q`` eliminated) and
``assemble_multi`` (any number of delays, structural equalities kept) both build
two operator targets ``{Mt, Nt}``:

* positivity side: ``P - eps`` must be positive on ``R^n x L2^n``;
* derivative side: ``-D`` must be positive on ``R^m x L2^n``.

Each target is tied to a fresh Gram cone member ``{Mx, Nx}``.  The spacing
operators are not given decision variables of their own; the equalities
below are exactly the conditions under which ``Mx - Mt`` and ``Nx - Nt``
form a spacing pair:

* function blocks agree: ``Mx22 = Mt22`` and ``Nx22 = Nt22``;
* ``Mx12(s) = Mt12(s) + int (Nt12 - Nx12)(w, s) dw``;
* ``int (Mx11 - Mt11) ds = int int (Nt11 - Nx11)``.

``spacing='explicit'`` instead allocates free spacing functions and matches
every coefficient, which is slower and used for cross-checks.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .operators import (
    CompleteQuadOp,
    DelaySystem,
    L1_map,
    MultKernelOp,
    derivative_op_multi,
    derivative_op_single,
    make_free_operator,
    spacing_make,
    theta_to_s,
)
from .polyalg import (
    IntervalGrid,
    MatrixPoly,
    PiecewisePoly1D,
    PiecewisePoly2D,
    bmat,
    integrate_definite,
    kernel_canonical_rows,
    upper_entries,
)
from .sdp import FEASIBLE, INFEASIBLE, UNKNOWN, SdpProblem, SolverConfig, solve
from .soscone import XiMember, make_xi_member

log = logging.getLogger(__name__)

XI_POLICIES = ("trim", "lean", "uniform", "plus-one")


def default_epsilon(sys: DelaySystem) -> float:
    return 1e-3 * max(1.0, float(np.linalg.norm(sys.A[0], "fro")))


@dataclass
class StabilityProgram:
    sys: DelaySystem
    d: int
    epsilon: float
    problem: SdpProblem
    handles: dict
    path: str
    xi: list = field(default_factory=list)
    build_time: float = 0.0


@dataclass
class StabilityReport:
    feasible: bool
    status: str
    d: int
    epsilon: float
    path: str
    solver: dict
    residual: float
    min_eig: float
    build_time: float = 0.0
    certificate: dict | None = None
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "status": self.status,
            "degree": self.d,
            "epsilon": self.epsilon,
            "path": self.path,
            "solver": self.solver,
            "residual_max": self.residual,
            "psd_min_eig": self.min_eig,
            "build_time": self.build_time,
            "message": self.message,
            "certificate": self.certificate,
        }


# ---------------------------------------------------------------------------
# Tying a target operator to a Gram cone member


def xi_degrees(policy: str, d: int, m: int, n: int):
    """Per-component Gram degrees ``(full, weighted)`` for a cone of dimension ``m + n``.

    ``trim`` gives the interval-weighted certificate degree ``d - 1`` on the
    function components so its expansion does not exceed degree ``2d``.
    ``lean`` (the default) also drops the finite components from the second
    Gram block of the full certificate. On the benchmarks it reaches the same
    margins as ``trim`` with much smaller blocks.
    """
    if policy == "uniform":
        return None, None, d
    if policy == "plus-one":
        return None, None, d + 1
    if policy == "trim":
        w = tuple([d] * m + [d - 1] * n)
        return None, (w, w), d
    if policy == "lean":
        w = tuple([d] * m + [d - 1] * n)
        return ((d,) * (m + n), (-1,) * m + (d,) * n), (w, w), d
    raise ValueError(f"unknown cone degree policy {policy!r}; choose from {XI_POLICIES}")


def add_xi_member(problem: SdpProblem, d: int, m: int, n: int, grid: IntervalGrid, policy: str = "lean",
                  reduced: bool = True) -> XiMember:
    full, weighted, dd = xi_degrees(policy, d, m, n)
    return make_xi_member(dd, m + n, grid.K, grid, problem, reduced=reduced, full_degrees=full,
                          weighted_degrees=weighted)


def _blocks(p: MatrixPoly, m: int):
    dim = p.rows
    return p.block(0, m, 0, m), p.block(0, m, m, dim), p.block(m, dim, m, dim)


def tie_eliminated(problem: SdpProblem, target: MultKernelOp, member: MultKernelOp, label: str = "") -> None:
    """Equalities making ``member - target`` a spacing pair on ``R^m x L2^n``."""
    grid, m, n = target.grid, target.m, target.n
    K = grid.K
    ivs = grid.intervals
    up_n = upper_entries(n)
    Mx = [_blocks(p, m) for p in member.M.pieces]
    Mt = [_blocks(p, m) for p in target.M.pieces]
    for i in range(K):
        problem.add_poly_equality(Mx[i][2], Mt[i][2], up_n, f"{label} M22[{i}]")
    for i in range(K):
        for j in range(i, K):
            diff = member.N.pieces[i][j].block(m, m + n, m, m + n) - target.N.pieces[i][j].block(m, m + n, m, m + n)
            problem.add_rows(kernel_canonical_rows(diff, mirror=(i == j)), f"{label} N22[{i},{j}]")
    if m == 0:
        return
    for i in range(K):
        rhs = Mt[i][1]
        for l, (a, b) in enumerate(ivs):
            dN = target.N.pieces[l][i].block(0, m, m, m + n) - member.N.pieces[l][i].block(0, m, m, m + n)
            rhs = rhs + theta_to_s(integrate_definite(dN, "s", a, b))
        problem.add_poly_equality(Mx[i][1], rhs, None, f"{label} M12[{i}]")
    lhs = MatrixPoly.zeros(m)
    for i, (a, b) in enumerate(ivs):
        lhs = lhs + integrate_definite(Mx[i][0] - Mt[i][0], "s", a, b)
        for j, (c, e) in enumerate(ivs):
            dN = target.N.pieces[i][j].block(0, m, 0, m) - member.N.pieces[i][j].block(0, m, 0, m)
            lhs = lhs - integrate_definite(integrate_definite(dN, "s", a, b), "theta", c, e)
    problem.add_poly_equality(lhs, MatrixPoly.zeros(m), upper_entries(m), f"{label} mean M11")


def tie_explicit(problem: SdpProblem, target: MultKernelOp, member: MultKernelOp, degree: int,
                 label: str = "") -> None:
    """``member = target + T_{F,H}`` with free spacing functions of the given degree."""
    grid = target.grid
    sp_op = spacing_make(target.m, target.n, grid.K, grid.delays, degree, problem.pool)
    problem.register_free(_spacing_vars(sp_op))
    problem.add_equalities(sp_op.constraints, f"{label} spacing mean")
    for i in range(grid.K):
        problem.add_poly_equality(member.M.pieces[i], target.M.pieces[i] + sp_op.F.pieces[i], None, f"{label} M[{i}]")
        for j in range(grid.K):
            problem.add_poly_equality(
                member.N.pieces[i][j], target.N.pieces[i][j] + sp_op.H.pieces[i][j], None, f"{label} N[{i},{j}]"
            )


def _spacing_vars(sp_op) -> np.ndarray:
    polys = list(sp_op.F.pieces) + [p for row in sp_op.H.pieces for p in row]
    return np.unique(np.concatenate([p.variables() for p in polys]))


def _tie(problem, target, member, spacing, spacing_degree, label):
    if spacing == "eliminated":
        tie_eliminated(problem, target, member, label)
    elif spacing == "explicit":
        tie_explicit(problem, target, member, spacing_degree, label)
    else:
        raise ValueError("spacing must be 'eliminated' or 'explicit'")


def _embed(target_dim: int, m: int, p: MatrixPoly) -> MatrixPoly:
    """Place a function-block kernel in the lower-right corner."""
    return bmat([[MatrixPoly.zeros(m), None], [None, p]]) if m else p


# ---------------------------------------------------------------------------
# Assembly


def assemble_single(sys: DelaySystem, d: int, epsilon: float | None = None, *, xi_policy: str = "lean",
                    reduced: bool = True, spacing: str = "eliminated", spacing_degree: int | None = None,
                    kernel_degree: str = "total") -> StabilityProgram:
    """Single-delay program with ``P = tau(R(0,0)+S(0))`` and ``Q(s) = R(0,s)`` substituted."""
    if sys.K != 1:
        raise ValueError("assemble_single requires exactly one delay")
    if d < 0:
        raise ValueError("degree must be nonnegative")
    t0 = time.perf_counter()
    eps = default_epsilon(sys) if epsilon is None else float(epsilon)
    n, tau, grid = sys.n, sys.taus[0], sys.grid
    problem = SdpProblem()
    op = make_free_operator(n, 1, sys.taus, 2 * d, problem.pool, eliminate_pq=True, kernel_degree=kernel_degree)
    problem.register_free(op.variables())
    S, R = op.S[0], op.R[0][0]
    I = MatrixPoly.identity(n)
    sd = 2 * d if spacing_degree is None else spacing_degree

    # positivity side, dimension 2n
    M11 = op.P - I.scale(eps)
    M12 = op.Q[0].scale(tau)
    M22 = S.scale(tau) - I.scale(eps)
    tgt_p = MultKernelOp.from_blocks(grid, n, n, [M11], [M12], [M22], [[R]])
    xi_p = add_xi_member(problem, d, n, n, grid, xi_policy, reduced)
    _tie(problem, tgt_p, xi_p.op, spacing, sd, "positivity")

    # derivative side, dimension 3n; target is -D
    der = derivative_op_single(sys, S, R)
    D0 = der.D0 + bmat([[I.scale(eps), None], [None, MatrixPoly.zeros(n)]])
    Dd = der.Sdot.scale(tau) + I.scale(eps)
    tgt_d = MultKernelOp.from_blocks(grid, 2 * n, n, [-D0], [-der.V.scale(tau)], [-Dd], [[-der.E]])
    xi_d = add_xi_member(problem, d, 2 * n, n, grid, xi_policy, reduced)
    _tie(problem, tgt_d, xi_d.op, spacing, sd, "derivative")

    handles = {"op": op, "der": der, "target_p": tgt_p, "target_d": tgt_d}
    return StabilityProgram(sys, d, eps, problem, handles, "single", [xi_p, xi_d], time.perf_counter() - t0)


def assemble_multi(sys: DelaySystem, d: int, epsilon: float | None = None, *, xi_policy: str = "lean",
                   reduced: bool = True, spacing: str = "eliminated", spacing_degree: int | None = None,
                   flatten_mode: str = "jacobian", kernel_degree: str = "total") -> StabilityProgram:
    """Multi-delay program with free ``P``, ``Q_i`` and the structural equalities."""
    if d < 0:
        raise ValueError("degree must be nonnegative")
    t0 = time.perf_counter()
    eps = default_epsilon(sys) if epsilon is None else float(epsilon)
    n, K, grid = sys.n, sys.K, sys.grid
    problem = SdpProblem()
    op = make_free_operator(n, K, sys.taus, 2 * d, problem.pool, eliminate_pq=False, kernel_degree=kernel_degree)
    problem.register_free(op.variables())
    problem.add_equalities(op.structural_constraints, "structure")
    I = MatrixPoly.identity(n)
    sd = 2 * d if spacing_degree is None else spacing_degree

    # positivity side: L1(P - eps, Q, S - eps, R) - eps I
    S_eps = [s - I.scale(eps) for s in op.S]
    tgt_p = L1_map(grid, op.P - I.scale(eps), op.Q, S_eps, op.R, flatten_mode)
    shift = MatrixPoly.identity(2 * n, eps)
    tgt_p = MultKernelOp(grid, n, n, tgt_p.M.map(lambda p: p - shift), tgt_p.N)
    xi_p = add_xi_member(problem, d, n, n, grid, xi_policy, reduced)
    _tie(problem, tgt_p, xi_p.op, spacing, sd, "positivity")

    # derivative side: -L1(D1 + eps, V, Sdot + eps, G), finite part n(K+1)
    der = derivative_op_multi(sys, op)
    m2 = n * (K + 1)
    lead = bmat([[I.scale(eps), None], [None, MatrixPoly.zeros(n * K)]])
    D1 = der.D1 + lead
    Sd = [s + I.scale(eps) for s in der.Sdot]
    tgt_d = -L1_map(grid, D1, der.V, Sd, der.G, flatten_mode)
    xi_d = add_xi_member(problem, d, m2, n, grid, xi_policy, reduced)
    _tie(problem, tgt_d, xi_d.op, spacing, sd, "derivative")

    handles = {"op": op, "der": der, "target_p": tgt_p, "target_d": tgt_d}
    return StabilityProgram(sys, d, eps, problem, handles, "multi", [xi_p, xi_d], time.perf_counter() - t0)


def assemble(sys: DelaySystem, d: int, epsilon: float | None = None, path: str = "auto", **kw) -> StabilityProgram:
    if path == "auto":
        path = "single" if sys.K == 1 else "multi"
    if path == "single":
        return assemble_single(sys, d, epsilon, **kw)
    if path == "multi":
        return assemble_multi(sys, d, epsilon, **kw)
    raise ValueError("path must be 'auto', 'single' or 'multi'")


# ---------------------------------------------------------------------------
# Solving


def _poly_dump(p: MatrixPoly) -> list:
    monos, coefs = p.numeric_arrays()
    return [{"mono": [int(a), int(b)], "coef": c.tolist()} for (a, b), c in zip(monos, coefs)]


def extract_certificate(program: StabilityProgram, x) -> dict:
    op: CompleteQuadOp = program.handles["op"].assign(x)
    return {
        "P": op.P.evaluate().tolist(),
        "Q": [_poly_dump(q) for q in op.Q],
        "S": [_poly_dump(s) for s in op.S],
        "R": [[_poly_dump(r) for r in row] for row in op.R],
    }


def check_feasible(program: StabilityProgram, config: SolverConfig | None = None,
                   with_certificate: bool = False) -> StabilityReport:
    config = config or SolverConfig()
    sol = solve(program.problem, config)
    feasible = sol.status == FEASIBLE
    cert = extract_certificate(program, sol.x) if (feasible and with_certificate) else None
    return StabilityReport(
        feasible=feasible,
        status=sol.status,
        d=program.d,
        epsilon=program.epsilon,
        path=program.path,
        solver={
            "backend": config.backend,
            "backend_status": sol.backend_status,
            "iterations": sol.iterations,
            "solve_time": sol.solve_time,
            **program.problem.summary(),
        },
        residual=sol.residual,
        min_eig=sol.min_eig,
        build_time=program.build_time,
        certificate=cert,
        message=sol.message,
    )


def certify(sys: DelaySystem, d: int, epsilon: float | None = None, config: SolverConfig | None = None,
            path: str = "auto", with_certificate: bool = False, **kw) -> StabilityReport:
    return check_feasible(assemble(sys, d, epsilon, path, **kw), config, with_certificate)


# ---------------------------------------------------------------------------
# Parameter families and bisection


@dataclass
class ParameterizedFamily:
    """``lambda -> DelaySystem``.

    ``kind='delay-scale'``: delays are ``lambda * base.taus``.
    ``kind='matrix'``: ``A_i = base.A_i + lambda * direction[i]``.
    """

    base: DelaySystem
    kind: str = "delay-scale"
    direction: Sequence | None = None
    name: str = "lambda"

    def __post_init__(self):
        if self.kind not in ("delay-scale", "matrix"):
            raise ValueError("family kind must be 'delay-scale' or 'matrix'")
        if self.kind == "matrix":
            if self.direction is None or len(self.direction) != len(self.base.A):
                raise ValueError("matrix family needs one direction matrix per system matrix")

    def __call__(self, lam: float) -> DelaySystem:
        if self.kind == "delay-scale":
            if lam <= 0:
                raise ValueError("delay scaling requires a positive parameter")
            return self.base.scaled(lam)
        A = [a + lam * np.asarray(da, dtype=float) for a, da in zip(self.base.A, self.direction)]
        return DelaySystem(A, self.base.taus)


@dataclass
class MarginResult:
    margin: float
    bracket: tuple
    log: list
    elapsed: float


class NoSignChange(ValueError):
    pass


def margin_bisection(family: Callable[[float], DelaySystem], lo: float, hi: float, d: int,
                     epsilon: float | None = None, tol: float = 1e-3, config: SolverConfig | None = None,
                     path: str = "auto", max_steps: int = 60, **kw) -> MarginResult:
    """Bisect for the feasibility boundary between ``lo`` and ``hi``.

    Whichever end certifies is the feasible side; the margin returned is the
    last certified parameter, so it is a lower bound when ``lo`` is feasible
    and an upper bound on the unstable region when ``hi`` is.  Unknown solver
    outcomes count as not certified.
    """
    t0 = time.perf_counter()
    entries = []

    def probe(lam):
        rep = certify(family(lam), d, epsilon, config, path, **kw)
        entries.append({"lambda": lam, "status": rep.status, "feasible": rep.feasible,
                        "residual": rep.residual, "time": rep.solver["solve_time"] + rep.build_time})
        log.info("probe %.6g -> %s", lam, rep.status)
        return rep.feasible

    f_lo, f_hi = probe(lo), probe(hi)
    if f_lo == f_hi:
        raise NoSignChange(
            f"verdicts agree at both ends ({'certified' if f_lo else 'not certified'} at {lo} and {hi})"
        )
    good, bad = (lo, hi) if f_lo else (hi, lo)
    for _ in range(max_steps):
        if abs(bad - good) <= tol:
            break
        mid = 0.5 * (good + bad)
        if probe(mid):
            good = mid
        else:
            bad = mid
    return MarginResult(good, (min(good, bad), max(good, bad)), entries, time.perf_counter() - t0)
