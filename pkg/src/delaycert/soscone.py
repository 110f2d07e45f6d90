"""Gram parameterisation of positive multiplier/kernel operators.

A certificate ``Q = [[Q11, Q12], [Q12', Q22]] >= 0`` with piecewise bases

    Y1 rows: (tile i, k)             k over ``s^p e_a``
    Y2 rows: ((tile p, tile r), k2)  k2 over ``s^u theta^v e_a``

expands to ``M_i(s) = g_i(s) Y1ᵀ Q11_ii Y1`` and the three-term kernel
``N_ij(s, theta)``; the omega integral in the last term is done exactly on
each tile.  Basis functions are tagged with the component ``a`` they feed,
so components may use different degrees.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import MultKernelOp
from .polyalg import IntervalGrid, MatrixPoly, PiecewisePoly1D, PiecewisePoly2D

# ---------------------------------------------------------------------------
# Bases


def monomial_basis(d: int) -> list:
    """``[1, s, ..., s^d]`` as exponents."""
    if d < 0:
        raise ValueError("degree must be nonnegative")
    return list(range(d + 1))


def bivariate_basis(d: int) -> list:
    """Graded-lex ``[1, s, theta, s^2, s theta, theta^2, ...]`` as ``(e_s, e_theta)``."""
    if d < 0:
        raise ValueError("degree must be nonnegative")
    return [(t - b, b) for t in range(d + 1) for b in range(t + 1)]


@dataclass(frozen=True)
class BasisDescriptor:
    """Per-component degrees of the univariate and bivariate bases.

    ``deg1[a]`` / ``deg2[a]`` is the degree used for component ``a``; a
    negative entry drops the component from that basis.
    """

    d: int
    n: int
    K: int
    deg1: tuple = None
    deg2: tuple = None

    def __post_init__(self):
        if self.deg1 is None:
            object.__setattr__(self, "deg1", (self.d,) * self.n)
        if self.deg2 is None:
            object.__setattr__(self, "deg2", (self.d,) * self.n)
        if len(self.deg1) != self.n or len(self.deg2) != self.n:
            raise ValueError("per-component degrees must have length n")

    @property
    def q(self) -> int:
        return (self.d + 1) * (self.d + 2) // 2

    @property
    def y1(self) -> np.ndarray:
        """``(power, component)`` rows of ``Y_d(s) ⊗ I_n`` (monomial-major)."""
        rows = [(p, a) for p in range(max(self.deg1, default=-1) + 1) for a in range(self.n) if p <= self.deg1[a]]
        return np.array(rows, dtype=np.int64).reshape(-1, 2)

    @property
    def y2(self) -> np.ndarray:
        """``(e_s, e_theta, component)`` rows of ``Z_d(s, theta) ⊗ I_n``."""
        top = max(self.deg2, default=-1)
        if top < 0:
            return np.zeros((0, 3), dtype=np.int64)
        rows = [(u, v, a) for (u, v) in bivariate_basis(top) for a in range(self.n) if u + v <= self.deg2[a]]
        return np.array(rows, dtype=np.int64).reshape(-1, 3)

    @property
    def size1(self) -> int:
        return self.K * len(self.y1)

    @property
    def size2(self) -> int:
        return self.K * self.K * len(self.y2)


@dataclass
class GramCertificate:
    """Decision-variable ids of a Gram matrix, split into its blocks."""

    desc: BasisDescriptor
    ids: np.ndarray  # symmetric id matrix of the whole certificate (or Q11 only)
    psd_handle: object = None
    reduced: bool = False

    @property
    def Q11(self) -> np.ndarray:
        s1 = self.desc.size1
        return self.ids[:s1, :s1]

    @property
    def Q12(self) -> np.ndarray:
        s1 = self.desc.size1
        return self.ids[:s1, s1:]

    @property
    def Q22(self) -> np.ndarray:
        s1 = self.desc.size1
        return self.ids[s1:, s1:]


# ---------------------------------------------------------------------------
# Weights


def weight_one(grid: IntervalGrid) -> list:
    return [MatrixPoly.scalar({(0, 0): 1.0}) for _ in range(grid.K)]


def weight_interval(grid: IntervalGrid) -> list:
    """``g_i(s) = -(s + tau_i)(s + tau_{i-1})``, nonnegative on tile ``i``."""
    out = []
    for i in range(1, grid.K + 1):
        a, b = grid.tau(i), grid.tau(i - 1)
        out.append(MatrixPoly.scalar({(2, 0): -1.0, (1, 0): -(a + b), (0, 0): -a * b}))
    return out


def _weight_coeffs(g: MatrixPoly) -> dict:
    if g.shape != (1, 1) or not g.is_numeric or g.degree_in("theta"):
        raise ValueError("weights must be numeric scalar polynomials in s")
    return {m[0]: float(g.numeric_coefficient(m)[0, 0]) for m in g.monomials}


# ---------------------------------------------------------------------------
# Expansion


class _Coo:
    """Accumulates ``(mono, row, col, var id, value)`` triples for one polynomial."""

    def __init__(self):
        self.parts = []

    def add(self, es, et, r, c, vid, val):
        self.parts.append(
            np.broadcast_arrays(
                np.asarray(es, dtype=np.int64),
                np.asarray(et, dtype=np.int64),
                np.asarray(r, dtype=np.int64),
                np.asarray(c, dtype=np.int64),
                np.asarray(vid, dtype=np.int64),
                np.asarray(val, dtype=float),
            )
        )

    def build(self, dim: int) -> MatrixPoly:
        if not self.parts:
            return MatrixPoly.zeros(dim)
        cols = [np.concatenate([p[k].ravel() for p in self.parts]) for k in range(6)]
        es, et, r, c, vid, val = cols
        keep = val != 0.0
        es, et, r, c, vid, val = (a[keep] for a in (es, et, r, c, vid, val))
        return MatrixPoly.from_coo(dim, dim, np.stack([es, et], axis=1), r, c, vid + 1, val)


def _mono_integral(a: float, b: float, e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    return (b ** (e + 1) - a ** (e + 1)) / (e + 1)


def expand_gram(g: list, cert: GramCertificate, grid: IntervalGrid) -> MultKernelOp:
    """Piecewise ``{M, N}`` of a Gram certificate (dimension ``desc.n``, no finite part)."""
    desc = cert.desc
    K, dim = grid.K, desc.n
    if desc.K != K or len(g) != K:
        raise ValueError("certificate, weights and grid disagree on K")
    gc = [_weight_coeffs(gi) for gi in g]
    y1, y2 = desc.y1, desc.y2
    n1, n2 = len(y1), len(y2)
    Q11 = cert.Q11

    Ms = []
    p1, a1 = y1[:, 0], y1[:, 1]
    for i in range(K):
        coo = _Coo()
        if n1:
            blk = Q11[i * n1 : (i + 1) * n1, i * n1 : (i + 1) * n1]
            P = p1[:, None] + p1[None, :]
            for ge, gv in gc[i].items():
                coo.add(P + ge, 0, a1[:, None], a1[None, :], blk, gv)
        Ms.append(coo.build(dim))

    Ns = [[_Coo() for _ in range(K)] for _ in range(K)]
    if not cert.reduced and n2:
        Q12, Q22 = cert.Q12, cert.Q22
        u2, v2, a2 = y2[:, 0], y2[:, 1], y2[:, 2]

        def col2(p, r):
            return (p * K + r) * n2

        for i in range(K):
            for j in range(K):
                if n1:
                    # g_i(s) Y1(s)' Q12[i, (i,j)] Y2(s, theta)
                    blk = Q12[i * n1 : (i + 1) * n1, col2(i, j) : col2(i, j) + n2]
                    for ge, gv in gc[i].items():
                        Ns[i][j].add(
                            p1[:, None] + u2[None, :] + ge, v2[None, :], a1[:, None], a2[None, :], blk, gv
                        )
                    # g_j(theta) Y2(theta, s)' Q12[j, (j,i)]' Y1(theta)
                    blk = Q12[j * n1 : (j + 1) * n1, col2(j, i) : col2(j, i) + n2].T
                    for ge, gv in gc[j].items():
                        Ns[i][j].add(
                            v2[:, None], u2[:, None] + p1[None, :] + ge, a2[:, None], a1[None, :], blk, gv
                        )
                # sum_l int_{tile l} g_l(w) Y2(w, s)' Q22[(l,i), (l,j)] Y2(w, theta) dw
                for l, (lo, hi) in enumerate(grid.intervals):
                    blk = Q22[col2(l, i) : col2(l, i) + n2, col2(l, j) : col2(l, j) + n2]
                    ew = u2[:, None] + u2[None, :]
                    w = np.zeros(ew.shape)
                    for ge, gv in gc[l].items():
                        w = w + gv * _mono_integral(lo, hi, ew + ge)
                    Ns[i][j].add(v2[:, None], v2[None, :], a2[:, None], a2[None, :], blk, w)
    N = [[Ns[i][j].build(dim) for j in range(K)] for i in range(K)]
    return MultKernelOp(grid, 0, dim, PiecewisePoly1D(grid, Ms), PiecewisePoly2D(grid, N))


# ---------------------------------------------------------------------------
# Cone membership


@dataclass
class XiMember:
    op: MultKernelOp
    certificates: list
    psd_blocks: list = field(default_factory=list)


def _new_certificate(problem, desc: BasisDescriptor, reduced: bool) -> GramCertificate:
    size = desc.size1 if reduced else desc.size1 + desc.size2
    blk = problem.add_psd_block(size)
    return GramCertificate(desc, blk.ids, blk, reduced)


def make_xi_member(d: int, n: int, K: int, grid: IntervalGrid, problem, *, reduced: bool = True,
                   full_degrees=None, weighted_degrees=None) -> XiMember:
    """``{M, N} = {M_1 + M_2, N_1 + N_2}`` from a ``g = 1`` and an interval-weighted certificate.

    ``problem`` is an :class:`~delaycert.sdp.SdpProblem`; each certificate
    becomes one PSD block.  With ``reduced`` the weighted certificate keeps
    only its ``Q11`` block.  ``full_degrees`` / ``weighted_degrees`` are
    optional ``(deg1, deg2)`` per-component degree tuples.
    """
    if d < 0:
        raise ValueError("degree must be nonnegative")
    fd = full_degrees or (None, None)
    wd = weighted_degrees or (None, None)
    desc_full = BasisDescriptor(d, n, K, *fd)
    desc_w = BasisDescriptor(d, n, K, *wd)
    certs, blocks = [], []
    total = None
    for desc, g, red in ((desc_full, weight_one(grid), False), (desc_w, weight_interval(grid), reduced)):
        if (desc.size1 if red else desc.size1 + desc.size2) == 0:
            continue
        cert = _new_certificate(problem, desc, red)
        certs.append(cert)
        blocks.append(cert.psd_handle)
        part = expand_gram(g, cert, grid)
        total = part if total is None else total + part
    return XiMember(total, certs, blocks)
