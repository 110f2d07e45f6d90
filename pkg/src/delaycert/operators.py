"""Operator classes on ``Z = R^m x L2`` over the delay grid.

* :class:`CompleteQuadOp` -- the ``{P, Q_i, S_i, R_ij}`` operator acting on
  ``(x, phi_1..phi_K)`` with ``phi_i`` defined on ``[-tau_i, 0]``.
* :class:`MultKernelOp` -- ``x -> M(s)x(s) + int N(s, theta) x(theta) dtheta``
  with piecewise-polynomial ``M``, ``N`` on the interval grid.
* :func:`flatten_L1` -- compresses each ``phi_i`` onto its own tile so a
  quadratic form on ``Z`` becomes a quadratic form on ``L2``.
* Lie-derivative constructions for one and several delays, and spacing
  operators whose quadratic form vanishes on ``R^m x L2``.

Z inner product: ``<(y, psi), (x, phi)> = tau_K y'x + sum_i int psi_i' phi_i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .polyalg import (
    IntervalGrid,
    LinearEquations,
    MatrixPoly,
    PiecewisePoly1D,
    PiecewisePoly2D,
    VarPool,
    affine_substitute,
    bmat,
    coefficient_equalities,
    differentiate,
    integrate_definite,
)

GAUSS_POINTS = 32


# ---------------------------------------------------------------------------
# Systems


@dataclass(frozen=True)
class DelaySystem:
    """``x'(t) = A_0 x(t) + sum_i A_i x(t - tau_i)``."""

    A: tuple
    taus: tuple

    def __init__(self, A: Sequence, taus: Sequence[float]):
        mats = tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in A)
        taus = tuple(float(t) for t in taus)
        if len(mats) != len(taus) + 1:
            raise ValueError("need K+1 matrices for K delays")
        n = mats[0].shape[0]
        if any(a.shape != (n, n) for a in mats):
            raise ValueError("system matrices must all be n x n")
        if taus:
            IntervalGrid(taus)  # validates ordering
        for a in mats:
            a.setflags(write=False)
        object.__setattr__(self, "A", mats)
        object.__setattr__(self, "taus", taus)

    @property
    def n(self) -> int:
        return self.A[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.taus)

    @property
    def grid(self) -> IntervalGrid:
        return IntervalGrid(self.taus)

    @property
    def tau_max(self) -> float:
        return self.taus[-1] if self.taus else 0.0

    def scaled(self, factor: float) -> "DelaySystem":
        return DelaySystem(self.A, [t * factor for t in self.taus])

    def with_delays(self, taus) -> "DelaySystem":
        return DelaySystem(self.A, taus)

    def to_dict(self) -> dict:
        return {"A": [a.tolist() for a in self.A], "taus": list(self.taus)}


# ---------------------------------------------------------------------------
# Free polynomial constructors


def _free_poly_1d(pool: VarPool, rows: int, cols: int, d: int, symmetric: bool = False) -> MatrixPoly:
    out = MatrixPoly.zeros(rows, cols)
    for e in range(d + 1):
        out = out + MatrixPoly.variable_matrix(_free_ids(pool, rows, cols, symmetric), (e, 0))
    return out


def _free_ids(pool: VarPool, rows: int, cols: int, symmetric: bool) -> np.ndarray:
    if not symmetric:
        return pool.new_free_vars(rows * cols).reshape(rows, cols)
    ids = pool.new_free_vars(rows * (rows + 1) // 2)
    out = np.empty((rows, rows), dtype=np.int64)
    k = 0
    for i in range(rows):
        for j in range(i, rows):
            out[i, j] = out[j, i] = ids[k]
            k += 1
    return out


def kernel_monomials(d: int, kernel_degree: str = "total") -> list:
    if kernel_degree == "total":
        return [(a, b) for t in range(d + 1) for b in range(t + 1) for a in [t - b]]
    if kernel_degree == "separate":
        return [(a, b) for a in range(d + 1) for b in range(d + 1)]
    raise ValueError(f"unknown kernel degree convention {kernel_degree!r}")


def _free_kernel_pair(pool: VarPool, n: int, d: int, kernel_degree: str):
    """Free ``R_ij`` (``i < j``) and its partner ``R_ji(s,theta) = R_ij(theta,s)^T``."""
    r = MatrixPoly.zeros(n)
    for m in kernel_monomials(d, kernel_degree):
        r = r + MatrixPoly.variable_matrix(_free_ids(pool, n, n, False), m)
    return r, r.transpose().swap_vars()


def _free_kernel_diag(pool: VarPool, n: int, d: int, kernel_degree: str) -> MatrixPoly:
    """Free ``R_ii`` with ``R_ii(s,theta) = R_ii(theta,s)^T`` by shared variables."""
    r = MatrixPoly.zeros(n)
    for a, b in kernel_monomials(d, kernel_degree):
        if a < b:
            ids = _free_ids(pool, n, n, False)
            r = r + MatrixPoly.variable_matrix(ids, (a, b)) + MatrixPoly.variable_matrix(ids.T, (b, a))
        elif a == b:
            r = r + MatrixPoly.variable_matrix(_free_ids(pool, n, n, True), (a, a))
    return r


def theta_to_s(p: MatrixPoly) -> MatrixPoly:
    """A polynomial in ``theta`` only, rewritten in ``s``."""
    return p.rename("theta", "s")


def s_to_theta(p: MatrixPoly) -> MatrixPoly:
    return p.rename("s", "theta")


# ---------------------------------------------------------------------------
# Complete-quadratic operator


@dataclass
class CompleteQuadOp:
    grid: IntervalGrid
    n: int
    P: MatrixPoly
    Q: list
    S: list
    R: list  # R[i][j]
    structural_constraints: LinearEquations = field(default_factory=LinearEquations.empty)
    eliminated: bool = False

    @property
    def K(self) -> int:
        return self.grid.K

    def assign(self, x) -> "CompleteQuadOp":
        return CompleteQuadOp(
            self.grid,
            self.n,
            self.P.assign(x),
            [q.assign(x) for q in self.Q],
            [s.assign(x) for s in self.S],
            [[r.assign(x) for r in row] for row in self.R],
            LinearEquations.empty(),
            self.eliminated,
        )

    def variables(self) -> np.ndarray:
        polys = [self.P, *self.Q, *self.S, *(r for row in self.R for r in row)]
        ids = np.unique(np.concatenate([p.variables() for p in polys] + [np.zeros(0, dtype=np.int64)]))
        return ids


def structure_equalities(P, Q, S, R, tau_K: float, skip_first: bool = False) -> LinearEquations:
    """Equalities ``P = tau_K (Q_i(0)^T + S_i(0))`` and ``Q_j(s) = R_ij(0, s)``."""
    K = len(S)
    eqs = LinearEquations.empty()
    for i in range(K):
        if skip_first and i == 0:
            continue
        rhs = (Q[i].subs("s", 0.0).transpose() + S[i].subs("s", 0.0)).scale(tau_K)
        eqs = eqs.concat(coefficient_equalities(P, rhs))
        for j in range(K):
            eqs = eqs.concat(coefficient_equalities(Q[j], theta_to_s(R[i][j].subs("s", 0.0))))
    return eqs


def make_free_operator(
    n: int,
    K: int,
    taus,
    d: int,
    pool: VarPool | None = None,
    *,
    eliminate_pq: bool = False,
    kernel_degree: str = "total",
) -> CompleteQuadOp:
    """Fresh ``{P, Q_i, S_i, R_ij}`` with every coefficient a decision variable.

    ``S_i`` symmetry and the pairing ``R_ij(s,theta) = R_ji(theta,s)^T`` are
    built in by sharing variables.  With ``eliminate_pq`` the multipliers
    ``Q_j = R_1j(0, s)`` and ``P = tau_K (Q_1(0)^T + S_1(0))`` are substituted
    (for one delay this leaves no structural equalities at all); otherwise
    ``P`` and ``Q_i`` are free and tied by linear equalities.
    """
    if d < 0:
        raise ValueError("degree must be nonnegative")
    grid = IntervalGrid(taus)
    if grid.K != K:
        raise ValueError("delay count does not match K")
    pool = pool or VarPool()
    S = [_free_poly_1d(pool, n, n, d, symmetric=True) for _ in range(K)]
    R: list = [[None] * K for _ in range(K)]
    for i in range(K):
        R[i][i] = _free_kernel_diag(pool, n, d, kernel_degree)
        for j in range(i + 1, K):
            R[i][j], R[j][i] = _free_kernel_pair(pool, n, d, kernel_degree)
    tau_K = grid.tau_max
    if eliminate_pq:
        Q = [theta_to_s(R[0][j].subs("s", 0.0)) for j in range(K)]
        P = (Q[0].subs("s", 0.0).transpose() + S[0].subs("s", 0.0)).scale(tau_K)
        Q = [q if not q.is_zero else MatrixPoly.zeros(n) for q in Q]
        cons = structure_equalities(P, Q, S, R, tau_K, skip_first=True)
    else:
        P = MatrixPoly.variable_matrix(_free_ids(pool, n, n, True))
        Q = [_free_poly_1d(pool, n, n, d) for _ in range(K)]
        cons = structure_equalities(P, Q, S, R, tau_K)
    return CompleteQuadOp(grid, n, P, Q, S, R, cons, eliminate_pq)


# ---------------------------------------------------------------------------
# Multiplier / kernel operators


@dataclass
class MultKernelOp:
    """``x -> M(s)x(s) + int N(s,theta)x(theta) dtheta`` on ``L2^{m+n}``.

    The first ``m`` components are the finite-dimensional part (constant in
    ``s`` for states in ``R^m x L2^n``).
    """

    grid: IntervalGrid
    m: int
    n: int
    M: PiecewisePoly1D
    N: PiecewisePoly2D

    def __post_init__(self):
        if self.M.grid != self.N.grid or self.M.grid != self.grid:
            raise ValueError("M and N must share the interval grid")
        dim = self.m + self.n
        if self.M.shape != (dim, dim) or self.N.shape != (dim, dim):
            raise ValueError("multiplier/kernel dimensions inconsistent with m + n")

    @property
    def dim(self) -> int:
        return self.m + self.n

    def __add__(self, other: "MultKernelOp") -> "MultKernelOp":
        if (self.m, self.n) != (other.m, other.n):
            raise ValueError("operator dimensions differ")
        return MultKernelOp(self.grid, self.m, self.n, self.M + other.M, self.N + other.N)

    def __neg__(self):
        return MultKernelOp(self.grid, self.m, self.n, -self.M, -self.N)

    def __sub__(self, other):
        return self + (-other)

    def assign(self, x) -> "MultKernelOp":
        return MultKernelOp(self.grid, self.m, self.n, self.M.assign(x), self.N.assign(x))

    @classmethod
    def zero(cls, grid: IntervalGrid, m: int, n: int) -> "MultKernelOp":
        dim = m + n
        K = grid.K
        return cls(
            grid,
            m,
            n,
            PiecewisePoly1D(grid, [MatrixPoly.zeros(dim) for _ in range(K)]),
            PiecewisePoly2D(grid, [[MatrixPoly.zeros(dim) for _ in range(K)] for _ in range(K)]),
        )

    @classmethod
    def from_blocks(cls, grid, m, n, M11, M12, M22, N22) -> "MultKernelOp":
        """Assemble from per-interval blocks; ``N`` acts on the function part only."""
        K = grid.K
        Ms, Ns = [], []
        for i in range(K):
            Ms.append(bmat([[M11[i], M12[i]], [M12[i].transpose(), M22[i]]]))
        zm = MatrixPoly.zeros(m)
        for i in range(K):
            row = []
            for j in range(K):
                if m:
                    row.append(bmat([[zm, None], [None, N22[i][j]]]))
                else:
                    row.append(N22[i][j])
            Ns.append(row)
        return cls(grid, m, n, PiecewisePoly1D(grid, Ms), PiecewisePoly2D(grid, Ns))


def _with_zero_finite(p: MatrixPoly, m: int) -> MatrixPoly:
    if m == 0:
        return p
    return bmat([[MatrixPoly.zeros(m), None], [None, p]])


def L1_map(grid: IntervalGrid, P, Q, S, R, mode: str = "jacobian") -> MultKernelOp:
    """Flatten ``{P, Q_i, S_i, R_ij}`` into a multiplier/kernel pair.

    On tile ``i`` the function argument is ``rho_i(s) = (s + tau_{i-1}) / a_i``.
    ``mode='jacobian'`` scales kernel piece ``(i, j)`` by ``1/(a_i a_j)`` so the
    quadratic forms agree exactly; ``mode='direct'`` omits that factor.
    """
    if mode not in ("jacobian", "direct"):
        raise ValueError("mode must be 'jacobian' or 'direct'")
    K = grid.K
    tK = grid.tau_max
    m, n = P.rows, S[0].rows
    Ms, Ns = [], []
    for i in range(K):
        a = grid.compression(i)
        al, be = grid.stretch(i)
        q = affine_substitute(Q[i], "s", al, be).scale(tK / a)
        sm = affine_substitute(S[i], "s", al, be).scale(tK / a)
        Ms.append(bmat([[P, q], [q.transpose(), sm]]))
    for i in range(K):
        ai = grid.compression(i)
        ali, bei = grid.stretch(i)
        row = []
        for j in range(K):
            aj = grid.compression(j)
            alj, bej = grid.stretch(j)
            r = affine_substitute(affine_substitute(R[i][j], "s", ali, bei), "theta", alj, bej)
            if mode == "jacobian":
                r = r.scale(1.0 / (ai * aj))
            row.append(_with_zero_finite(r, m))
        Ns.append(row)
    return MultKernelOp(grid, m, n, PiecewisePoly1D(grid, Ms), PiecewisePoly2D(grid, Ns))


def flatten_L1(op: CompleteQuadOp, mode: str = "jacobian") -> MultKernelOp:
    return L1_map(op.grid, op.P, op.Q, op.S, op.R, mode)


# ---------------------------------------------------------------------------
# Lie derivative constructions


@dataclass
class DerivativeOpSingle:
    D0: MatrixPoly  # 2n x 2n constant
    V: MatrixPoly  # 2n x n in s
    Sdot: MatrixPoly
    E: MatrixPoly  # n x n in (s, theta)


def derivative_op_single(sys: DelaySystem, S: MatrixPoly, R: MatrixPoly) -> DerivativeOpSingle:
    """Single-delay derivative blocks with ``P``, ``Q`` eliminated."""
    if sys.K != 1:
        raise ValueError("derivative_op_single requires exactly one delay")
    A0 = MatrixPoly.constant(sys.A[0])
    A1 = MatrixPoly.constant(sys.A[1])
    tau = sys.taus[0]
    n = sys.n
    R00 = R.subs("s", 0.0).subs("theta", 0.0)
    S0 = S.subs("s", 0.0)
    Sm = S.subs("s", -tau)
    S11 = (A0 @ (R00 + S0)).scale(tau) + (A1 @ R.subs("s", -tau).subs("theta", 0.0)).scale(tau) + S0.scale(0.5)
    S12 = (A1 @ Sm).scale(tau)
    S22 = -Sm
    D0 = bmat([[S11 + S11.transpose(), S12], [S12.transpose(), S22]])
    R0s = theta_to_s(R.subs("s", 0.0))
    Rms = theta_to_s(R.subs("s", -tau))
    Rdot = differentiate(R, "s").subs("theta", 0.0).transpose()
    S13 = A0 @ R0s + A1 @ Rms + Rdot
    V = bmat([[S13], [MatrixPoly.zeros(n)]])
    E = differentiate(R, "s") + differentiate(R, "theta")
    return DerivativeOpSingle(D0, V, differentiate(S, "s"), E)


@dataclass
class DerivativeOpMulti:
    D1: MatrixPoly  # n(K+1) square
    V: list  # V_i(s), n(K+1) x n
    Sdot: list
    G: list  # G[i][j]
    C0: MatrixPoly = None
    C: list = None
    B: list = None


def derivative_op_multi(sys: DelaySystem, op: CompleteQuadOp) -> DerivativeOpMulti:
    """Blocks of the quadratic form ``<AP z, z> + <z, AP z>`` on the state space."""
    if op.n != sys.n or op.K != sys.K or op.grid != sys.grid:
        raise ValueError("operator dimensions do not match the system")
    K, n, tK = sys.K, sys.n, sys.tau_max
    A = [MatrixPoly.constant(a) for a in sys.A]
    taus = sys.taus
    C0 = A[0] @ op.P
    for i in range(K):
        C0 = C0 + (A[i + 1] @ op.Q[i].subs("s", -taus[i]).transpose()).scale(tK)
        C0 = C0 + op.S[i].subs("s", 0.0).scale(0.5)
    C = [(A[i + 1] @ op.S[i].subs("s", -taus[i])).scale(tK) for i in range(K)]
    rows = [[C0 + C0.transpose()] + C]
    for i in range(K):
        row = [C[i].transpose()] + [None] * K
        row[i + 1] = -op.S[i].subs("s", -taus[i])
        rows.append(row)
    D1 = bmat(rows)
    B, V = [], []
    zero = MatrixPoly.zeros(n)
    for i in range(K):
        b = A[0] @ op.Q[i] + differentiate(op.Q[i], "s")
        for j in range(K):
            b = b + A[j + 1] @ theta_to_s(op.R[j][i].subs("s", -taus[j]))
        B.append(b)
        V.append(bmat([[b]] + [[zero] for _ in range(K)]))
    Sdot = [differentiate(s, "s") for s in op.S]
    G = [[differentiate(op.R[i][j], "s") + differentiate(op.R[i][j], "theta") for j in range(K)] for i in range(K)]
    return DerivativeOpMulti(D1, V, Sdot, G, C0, C, B)


# ---------------------------------------------------------------------------
# Spacing operators


@dataclass
class SpacingOp:
    F: PiecewisePoly1D
    H: PiecewisePoly2D
    constraints: LinearEquations
    m: int
    n: int
    parts: dict = field(default_factory=dict)

    def as_op(self) -> MultKernelOp:
        return MultKernelOp(self.F.grid, self.m, self.n, self.F, self.H)


def spacing_make(m: int, n: int, K: int, taus, d: int, pool: VarPool | None = None) -> SpacingOp:
    """Free spacing pair with ``<z, T z> = 0`` for every ``z`` in ``R^m x L2^n``.

    ``K(s)`` (``m x m``), ``L11`` (``m x m``), ``L12`` (``m x n``) and ``L21``
    (``n x m``) are independent piecewise polynomials of degree ``d``; the
    returned constraints force ``int K = 0``.
    """
    grid = IntervalGrid(taus)
    if grid.K != K:
        raise ValueError("delay count does not match K")
    pool = pool or VarPool()
    tK = grid.tau_max
    ivs = grid.intervals
    Kf = [_free_poly_1d(pool, m, m, d) for _ in range(K)]

    def free_2d(r, c):
        out = MatrixPoly.zeros(r, c)
        for mono in kernel_monomials(d):
            out = out + MatrixPoly.variable_matrix(_free_ids(pool, r, c, False), mono)
        return out

    L11 = [[free_2d(m, m) for _ in range(K)] for _ in range(K)]
    L12 = [[free_2d(m, n) for _ in range(K)] for _ in range(K)]
    L21 = [[free_2d(n, m) for _ in range(K)] for _ in range(K)]

    total11 = MatrixPoly.zeros(m)
    for i, (a, b) in enumerate(ivs):
        for j, (c, e) in enumerate(ivs):
            total11 = total11 + integrate_definite(integrate_definite(L11[i][j], "s", a, b), "theta", c, e)
    total11 = total11.scale(1.0 / tK)

    F, H = [], []
    for i in range(K):
        f12 = MatrixPoly.zeros(m, n)
        f21 = MatrixPoly.zeros(n, m)
        for l, (a, b) in enumerate(ivs):
            # L12(omega, s): omega in tile l, s in tile i
            f12 = f12 + theta_to_s(integrate_definite(L12[l][i], "s", a, b))
            f21 = f21 + integrate_definite(L21[i][l], "theta", a, b)
        F.append(bmat([[Kf[i] + total11, f12], [f21, MatrixPoly.zeros(n)]]))
    for i in range(K):
        H.append([-bmat([[L11[i][j], L12[i][j]], [L21[i][j], MatrixPoly.zeros(n)]]) for j in range(K)])
    mean = MatrixPoly.zeros(m)
    for i, (a, b) in enumerate(ivs):
        mean = mean + integrate_definite(Kf[i], "s", a, b)
    cons = coefficient_equalities(mean, MatrixPoly.zeros(m))
    return SpacingOp(
        PiecewisePoly1D(grid, F),
        PiecewisePoly2D(grid, H),
        cons,
        m,
        n,
        {"K": Kf, "L11": L11, "L12": L12, "L21": L21},
    )


# ---------------------------------------------------------------------------
# Quadrature evaluation of quadratic forms


def gauss_rule(a: float, b: float, npts: int = GAUSS_POINTS):
    x, w = np.polynomial.legendre.leggauss(npts)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def grid_rule(grid: IntervalGrid, npts: int = GAUSS_POINTS):
    """Per-tile nodes and weights, plus the tile index of every node."""
    nodes, weights, tile = [], [], []
    for i, (a, b) in enumerate(grid.intervals):
        x, w = gauss_rule(a, b, npts)
        nodes.append(x)
        weights.append(w)
        tile.append(np.full(npts, i))
    return np.concatenate(nodes), np.concatenate(weights), np.concatenate(tile)


def _tabulate(op: MultKernelOp, npts: int):
    """Numeric samples of ``M`` at nodes and ``N`` on the node grid."""
    grid = op.grid
    s, w, tile = grid_rule(grid, npts)
    dim = op.dim
    Mv = np.zeros((s.size, dim, dim))
    Nv = np.zeros((s.size, s.size, dim, dim))
    K = grid.K
    for i in range(K):
        si = tile == i
        Mv[si] = op.M.pieces[i].evaluate_many(s[si])
        for j in range(K):
            sj = tile == j
            S_, T_ = np.meshgrid(s[si], s[sj], indexing="ij")
            vals = op.N.pieces[i][j].evaluate_many(S_.ravel(), T_.ravel())
            Nv[np.ix_(si, sj)] = vals.reshape(S_.shape + (dim, dim))
    return s, w, Mv, Nv


def apply_op(op: MultKernelOp, x: Callable, npts: int = GAUSS_POINTS) -> Callable:
    """``y(s) = M(s)x(s) + int N(s,theta)x(theta) dtheta`` as a vectorised callable."""
    s_nodes, w_nodes, tile_nodes = grid_rule(op.grid, npts)
    xv = np.asarray(x(s_nodes), dtype=float)

    def y(s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.zeros((s.size, op.dim))
        for k, sk in enumerate(s):
            i = op.grid.piece_of(sk)
            out[k] = op.M.pieces[i].evaluate(sk) @ np.asarray(x(np.array([sk])))[0]
            for j in range(op.grid.K):
                sel = tile_nodes == j
                Nv = op.N.pieces[i][j].evaluate_many(np.full(sel.sum(), sk), s_nodes[sel])
                out[k] += np.einsum("p,pab,pb->a", w_nodes[sel], Nv, xv[sel])
        return out

    return y


def inner_product(x: Callable, op: MultKernelOp, y: Callable, npts: int = GAUSS_POINTS) -> float:
    """``<x, P_{M,N} y>`` in ``L2`` via Gauss-Legendre quadrature per tile."""
    s, w, Mv, Nv = _tabulate(op, npts)
    xv = np.asarray(x(s), dtype=float)
    yv = np.asarray(y(s), dtype=float)
    mult = np.einsum("p,pa,pab,pb->", w, xv, Mv, yv)
    ker = np.einsum("p,q,pa,pqab,qb->", w, w, xv, Nv, yv)
    return float(mult + ker)


def quadratic_forms(op: MultKernelOp, xs: Sequence[Callable], npts: int = GAUSS_POINTS) -> np.ndarray:
    """``<x, P x>`` for many states, tabulating the operator once."""
    s, w, Mv, Nv = _tabulate(op, npts)
    out = []
    for x in xs:
        xv = np.asarray(x(s), dtype=float)
        out.append(np.einsum("p,pa,pab,pb->", w, xv, Mv, xv) + np.einsum("p,q,pa,pqab,qb->", w, w, xv, Nv, xv))
    return np.array(out)


# ---------------------------------------------------------------------------
# States on Z and the complete-quadratic operator applied to them


@dataclass
class PolyState:
    """``(x, phi_1..phi_K)`` with polynomial ``phi_i`` on ``[-tau_i, 0]``.

    ``phi[i]`` is an ``(n, deg+1)`` array of ascending power coefficients.
    """

    grid: IntervalGrid
    x: np.ndarray
    phi: list

    def phi_at(self, i: int, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return np.polynomial.polynomial.polyval(s, self.phi[i].T).T.reshape(s.size, -1)

    def dphi_at(self, i: int, s) -> np.ndarray:
        c = np.polynomial.polynomial.polyder(self.phi[i].T)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return np.polynomial.polynomial.polyval(s, c).T.reshape(s.size, -1)

    def flattened(self) -> Callable:
        """``x_hat(s) = [x; phi_i(rho_i(s))]`` for ``s`` in tile ``i``."""
        grid = self.grid

        def xhat(s):
            s = np.atleast_1d(np.asarray(s, dtype=float))
            out = np.zeros((s.size, self.x.size + self.phi[0].shape[0]))
            out[:, : self.x.size] = self.x
            for k, sk in enumerate(s):
                i = grid.piece_of(sk)
                al, be = grid.stretch(i)
                out[k, self.x.size :] = self.phi_at(i, al * sk + be)[0]
            return out

        return xhat


def random_poly_state(n: int, grid: IntervalGrid, deg: int, rng, in_X: bool = True) -> PolyState:
    phis = [rng.standard_normal((n, deg + 1)) for _ in range(grid.K)]
    if in_X:
        x = phis[0][:, 0].copy()
        for p in phis[1:]:
            p[:, 0] = x
    else:
        x = rng.standard_normal(n)
    return PolyState(grid, x, phis)


def _z_rule(grid: IntervalGrid, i: int, npts: int):
    """Quadrature on ``[-tau_i, 0]`` split along the grid tiles."""
    xs, ws = [], []
    for a, b in grid.intervals[: i + 1]:
        x, w = gauss_rule(a, b, npts)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


@dataclass
class ZImage:
    """``(y, psi_i)`` sampled: ``psi[i]`` and ``dpsi[i]`` are callables on ``[-tau_i, 0]``."""

    y: np.ndarray
    psi: list
    dpsi: list


def apply_complete(op: CompleteQuadOp, z: PolyState, npts: int = GAUSS_POINTS) -> ZImage:
    """Apply a numeric complete-quadratic operator to a polynomial state."""
    grid, K, tK = op.grid, op.K, op.grid.tau_max
    rules = [_z_rule(grid, i, npts) for i in range(K)]
    phis = [z.phi_at(i, rules[i][0]) for i in range(K)]
    P = op.P.evaluate()
    y = P @ z.x
    for i in range(K):
        s, w = rules[i]
        Qv = op.Q[i].evaluate_many(s)
        y = y + np.einsum("p,pab,pb->a", w, Qv, phis[i])

    def make(i, deriv):
        def psi(s):
            s = np.atleast_1d(np.asarray(s, dtype=float))
            Q, S = op.Q[i], op.S[i]
            if deriv:
                Qv = differentiate(Q, "s").evaluate_many(s)
                out = tK * np.einsum("pba,b->pa", Qv, z.x)
                out += tK * np.einsum("pab,pb->pa", differentiate(S, "s").evaluate_many(s), z.phi_at(i, s))
                out += tK * np.einsum("pab,pb->pa", S.evaluate_many(s), z.dphi_at(i, s))
            else:
                out = tK * np.einsum("pba,b->pa", Q.evaluate_many(s), z.x)
                out += tK * np.einsum("pab,pb->pa", S.evaluate_many(s), z.phi_at(i, s))
            for j in range(K):
                th, w = rules[j]
                Rp = differentiate(op.R[i][j], "s") if deriv else op.R[i][j]
                S_, T_ = np.meshgrid(s, th, indexing="ij")
                Rv = Rp.evaluate_many(S_.ravel(), T_.ravel()).reshape(S_.shape + (op.n, op.n))
                out += np.einsum("q,pqab,qb->pa", w, Rv, phis[j])
            return out

        return psi

    return ZImage(y, [make(i, False) for i in range(K)], [make(i, True) for i in range(K)])


def z_inner(grid: IntervalGrid, a_y, a_psi, b_x, b_phi, npts: int = GAUSS_POINTS) -> float:
    """``tau_K a_y'b_x + sum_i int a_psi_i' b_phi_i`` with callables for the functions."""
    total = grid.tau_max * float(np.dot(a_y, b_x))
    for i in range(grid.K):
        s, w = _z_rule(grid, i, npts)
        total += float(np.einsum("p,pa,pa->", w, a_psi[i](s), b_phi[i](s)))
    return total


def state_callables(z: PolyState) -> list:
    return [lambda s, i=i: z.phi_at(i, s) for i in range(z.grid.K)]


def lyapunov_derivative(sys: DelaySystem, op: CompleteQuadOp, z: PolyState, npts: int = GAUSS_POINTS) -> float:
    """``<A P z, z> + <z, A P z>`` computed directly from the generator.

    ``A(y, psi) = (A_0 y + sum_i A_i psi_i(-tau_i), psi_i')``.
    """
    img = apply_complete(op, z, npts)
    head = sys.A[0] @ img.y
    for i in range(sys.K):
        head = head + sys.A[i + 1] @ img.psi[i](np.array([-sys.taus[i]]))[0]
    val = z_inner(op.grid, head, img.dpsi, z.x, state_callables(z), npts)
    return 2.0 * val


def derivative_form(sys: DelaySystem, der: DerivativeOpMulti, z: PolyState, eps: float = 0.0,
                    npts: int = GAUSS_POINTS) -> float:
    """Quadratic form of the derivative blocks on a state in ``X``."""
    grid, K, tK, n = sys.grid, sys.K, sys.tau_max, sys.n
    wf = np.concatenate([z.x] + [z.phi_at(i, -sys.taus[i])[0] for i in range(K)])
    D1 = der.D1.evaluate()
    total = tK * wf @ D1 @ wf + eps * tK * z.x @ z.x
    rules = [_z_rule(grid, i, npts) for i in range(K)]
    for i in range(K):
        s, w = rules[i]
        ph = z.phi_at(i, s)
        Bv = der.V[i].evaluate_many(s)
        total += 2.0 * tK * np.einsum("p,a,pab,pb->", w, wf, Bv, ph)
        Sd = der.Sdot[i].evaluate_many(s)
        total += tK * np.einsum("p,pa,pab,pb->", w, ph, Sd, ph) + eps * tK * np.einsum("p,pa,pa->", w, ph, ph)
        for j in range(K):
            th, wt = rules[j]
            S_, T_ = np.meshgrid(s, th, indexing="ij")
            Gv = der.G[i][j].evaluate_many(S_.ravel(), T_.ravel()).reshape(S_.shape + (n, n))
            total += np.einsum("p,q,pa,pqab,qb->", w, wt, ph, Gv, z.phi_at(j, th))
    return float(total)
