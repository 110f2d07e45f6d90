"""Invariant checks on randomly drawn operators, shared by the CLI and tests.

Each check returns a :class:`CheckResult` holding the worst deviation seen
and the tolerance it was held to.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .operators import (
    DelaySystem,
    apply_complete,
    flatten_L1,
    make_free_operator,
    quadratic_forms,
    random_poly_state,
    spacing_make,
    state_callables,
    z_inner,
)
from .polyalg import IntervalGrid, LinearEquations, VarPool, project_onto
from .sdp import FEASIBLE, INFEASIBLE, SdpProblem, solve
from .soscone import make_xi_member


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tol: float
    cases: int
    seconds: float = 0.0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.name}: worst {self.worst:.3e} (tol {self.tol:.0e}, {self.cases} cases, {self.seconds:.1f}s)"


def _taus(K: int, rng) -> list:
    return list(np.cumsum(rng.uniform(0.3, 1.5, size=K)))


def random_numeric_operator(n: int, K: int, d: int, rng, taus=None):
    """Complete-quadratic operator with random coefficients meeting its structural equalities."""
    taus = taus if taus is not None else _taus(K, rng)
    pool = VarPool()
    op = make_free_operator(n, K, taus, d, pool)
    x = project_onto(op.structural_constraints, rng.standard_normal(pool.n_vars))
    return op.assign(x)


def _timed(name, tol, fn, cases):
    t0 = time.perf_counter()
    worst = fn()
    ok = bool(np.isfinite(worst) and worst <= tol)
    return CheckResult(name, ok, float(worst), tol, cases, time.perf_counter() - t0)


def check_self_adjoint(count: int = 50, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """``<y, P x> = <P y, x>`` on ``Z`` for random operators and states."""
    rng = np.random.default_rng(seed)

    def run():
        worst = 0.0
        for k in range(count):
            n, K, d = 1 + k % 2, 1 + k % 3, 1 + k % 2
            op = random_numeric_operator(n, K, d, rng)
            zx = random_poly_state(n, op.grid, 2, rng, in_X=False)
            zy = random_poly_state(n, op.grid, 2, rng, in_X=False)
            px, py = apply_complete(op, zx), apply_complete(op, zy)
            a = z_inner(op.grid, zy.x, state_callables(zy), px.y, px.psi)
            b = z_inner(op.grid, py.y, py.psi, zx.x, state_callables(zx))
            worst = max(worst, abs(a - b) / max(1.0, abs(a)))
        return worst

    return _timed("self-adjointness", tol, run, count)


def check_l1_equivalence(count: int = 100, seed: int = 1, tol: float = 1e-8, Ks=(1, 2, 3)) -> CheckResult:
    """``<z, P z>_Z`` equals the flattened ``L2`` quadratic form (relative)."""
    rng = np.random.default_rng(seed)

    def run():
        worst = 0.0
        for k in range(count):
            K = Ks[k % len(Ks)]
            n, d = 1 + k % 2, 1 + (k // 3) % 2
            op = random_numeric_operator(n, K, d, rng)
            z = random_poly_state(n, op.grid, 3, rng, in_X=True)
            img = apply_complete(op, z)
            direct = z_inner(op.grid, img.y, img.psi, z.x, state_callables(z))
            flat = quadratic_forms(flatten_L1(op, "jacobian"), [z.flattened()])[0]
            worst = max(worst, abs(direct - flat) / max(1e-12, abs(direct)))
        return worst

    return _timed("L1 quadratic-form equivalence", tol, run, count)


SPACING_CASES = ((1, 1, 1), (1, 2, 2), (2, 1, 2), (2, 2, 1), (1, 3, 2), (1, 1, 3))


def _constant_head(m: int, n: int, grid: IntervalGrid, rng):
    """Random element of ``R^m x L2^n`` as a callable on ``[-tau_K, 0]``."""
    head = rng.standard_normal(m)
    coefs = [rng.standard_normal((n, 4)) for _ in range(grid.K)]

    def z(s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.zeros((s.size, m + n))
        out[:, :m] = head
        for k, sk in enumerate(s):
            i = grid.piece_of(sk)
            out[k, m:] = np.polynomial.polynomial.polyval(sk, coefs[i].T)
        return out

    return z


def check_spacing(per_case: int = 50, seed: int = 2, tol: float = 1e-9, d: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)

    def run():
        worst = 0.0
        for m, n, K in SPACING_CASES:
            taus = _taus(K, rng)
            pool = VarPool()
            sp_op = spacing_make(m, n, K, taus, d, pool)
            x = project_onto(sp_op.constraints, rng.standard_normal(pool.n_vars))
            T = sp_op.as_op().assign(x)
            zs = [_constant_head(m, n, T.grid, rng) for _ in range(per_case)]
            worst = max(worst, float(np.max(np.abs(quadratic_forms(T, zs)))))
        return worst

    return _timed("spacing annihilation", tol, run, per_case * len(SPACING_CASES))


def _random_psd(k: int, rng) -> np.ndarray:
    G = rng.standard_normal((k, k))
    return G @ G.T / k


def random_xi_member(d: int, dim: int, K: int, rng, taus=None, reduced: bool = False):
    """A numeric cone member with random PSD Gram matrices, plus the Gram data."""
    grid = IntervalGrid(taus if taus is not None else _taus(K, rng))
    prob = SdpProblem()
    xi = make_xi_member(d, dim, K, grid, prob, reduced=reduced)
    x = np.zeros(prob.n_vars)
    for blk in prob.psd_blocks:
        Q = _random_psd(blk.size, rng)
        iu = np.triu_indices(blk.size)
        x[blk.base + iu[1] * (iu[1] + 1) // 2 + iu[0]] = Q[iu]
    return xi, x, grid


def gram_pointwise(cert, x, grid, weights, s, theta, n_omega: int = 24):
    """Direct evaluation of ``M_i(s)`` and ``N_ij(s, theta)`` from the Gram matrix."""
    desc = cert.desc
    K, dim = grid.K, desc.n
    Q = np.asarray(x)[cert.ids]
    y1, y2 = desc.y1, desc.y2
    n1, n2 = len(y1), len(y2)
    s1 = desc.size1

    def Y1(t):
        out = np.zeros((n1, dim))
        out[np.arange(n1), y1[:, 1]] = t ** y1[:, 0]
        return out

    def Y2(a, b):
        out = np.zeros((n2, dim))
        out[np.arange(n2), y2[:, 2]] = a ** y2[:, 0] * b ** y2[:, 1]
        return out

    def g(i, t):
        return float(weights[i].evaluate(t, 0.0)[0, 0])

    i, j = grid.piece_of(s), grid.piece_of(theta)
    q11 = Q[i * n1 : (i + 1) * n1, i * n1 : (i + 1) * n1]
    M = g(i, s) * Y1(s).T @ q11 @ Y1(s)
    N = np.zeros((dim, dim))
    if not cert.reduced and n2:
        def c2(p, r):
            return s1 + (p * K + r) * n2

        q12 = Q[i * n1 : (i + 1) * n1, c2(i, j) : c2(i, j) + n2]
        N += g(i, s) * Y1(s).T @ q12 @ Y2(s, theta)
        q21 = Q[j * n1 : (j + 1) * n1, c2(j, i) : c2(j, i) + n2]
        N += g(j, theta) * (Y1(theta).T @ q21 @ Y2(theta, s)).T
        for l, (lo, hi) in enumerate(grid.intervals):
            om, w = np.polynomial.legendre.leggauss(n_omega)
            om = lo + (hi - lo) * (om + 1) / 2
            w = w * (hi - lo) / 2
            q22 = Q[c2(l, i) : c2(l, i) + n2, c2(l, j) : c2(l, j) + n2]
            for o, wo in zip(om, w):
                N += wo * g(l, o) * Y2(o, s).T @ q22 @ Y2(o, theta)
    return M, N


def check_gram_expansion(count: int = 20, seed: int = 3, tol: float = 1e-10) -> CheckResult:
    """Symbolic expansion of a Gram certificate matches direct evaluation pointwise."""
    from .soscone import expand_gram, weight_interval, weight_one

    rng = np.random.default_rng(seed)

    def run():
        worst = 0.0
        for k in range(count):
            d, dim, K = k % 3, 1 + k % 2, 1 + (k // 2) % 2
            xi, x, grid = random_xi_member(d, dim, K, rng)
            for cert, wts in zip(xi.certificates, (weight_one(grid), weight_interval(grid))):
                op = expand_gram(wts, cert, grid).assign(x)
                for _ in range(5):
                    s, th = rng.uniform(-grid.tau_max, 0.0, size=2)
                    M, N = gram_pointwise(cert, x, grid, wts, s, th)
                    i, j = grid.piece_of(s), grid.piece_of(th)
                    Ms = op.M.pieces[i].evaluate(s)
                    Ns = op.N.pieces[i][j].evaluate(s, th)
                    scale = max(1.0, np.abs(M).max(), np.abs(N).max())
                    worst = max(worst, np.abs(Ms - M).max() / scale, np.abs(Ns - N).max() / scale)
        return worst

    return _timed("Gram expansion pointwise", tol, run, count)


XI_CASES = ((0, 1), (1, 1), (2, 1), (0, 2), (1, 2), (2, 2))


def check_xi_positivity(per_case: int = 100, seed: int = 4, tol: float = 1e-9) -> CheckResult:
    """Quadratic forms of random cone members are nonnegative (reported as ``-min``)."""
    rng = np.random.default_rng(seed)

    def run():
        lowest = math.inf
        for d, K in XI_CASES:
            xi, x, grid = random_xi_member(d, 2, K, rng)
            op = xi.op.assign(x)
            zs = [_constant_head(0, 2, grid, rng) for _ in range(per_case)]
            forms = quadratic_forms(op, zs)
            lowest = min(lowest, float(np.min(forms)))
        return max(0.0, -lowest)

    return _timed("cone positivity", tol, run, per_case * len(XI_CASES))


def check_sdp_toy() -> CheckResult:
    t0 = time.perf_counter()
    ok = True
    for rhs, want in ((1.0, FEASIBLE), (-1.0, INFEASIBLE)):
        prob = SdpProblem()
        blk = prob.add_psd_block(1)
        row = sp.csr_matrix(([1.0], ([0], [blk.base])), shape=(1, prob.n_vars))
        prob.add_equalities(LinearEquations(row, np.array([rhs])))
        ok &= solve(prob).status == want
    return CheckResult("toy SDP verdicts", ok, 0.0 if ok else 1.0, 0.0, 2, time.perf_counter() - t0)


def check_oracle() -> CheckResult:
    from .oracle import spectral_abscissa

    t0 = time.perf_counter()
    worst = abs(spectral_abscissa(DelaySystem([[[-1.0]]], [])).abscissa + 1.0)
    worst = max(worst, abs(spectral_abscissa(DelaySystem([[[0.0]], [[-1.0]]], [math.pi / 2])).abscissa))
    return CheckResult("oracle reference abscissas", worst < 1e-6, worst, 1e-6, 2, time.perf_counter() - t0)


def run_all(quick: bool = False) -> list:
    scale = 5 if quick else 1
    return [
        check_self_adjoint(50 // scale),
        check_l1_equivalence(100 // scale),
        check_spacing(50 // scale),
        check_gram_expansion(20 // scale),
        check_xi_positivity(100 // scale),
        check_sdp_toy(),
        check_oracle(),
    ]
