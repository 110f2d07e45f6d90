"""Semidefinite feasibility problems: data model, Clarabel backend, SDPA files.

Scalar decision variables are drawn from a shared :class:`VarPool`.  A PSD
block of size ``k`` owns ``k(k+1)/2`` consecutive ids, one per upper-triangle
entry in column-major order (``(u, v)`` with ``u <= v`` has offset
``v(v+1)/2 + u``).  That is the same order Clarabel uses for its
``PSDTriangleConeT``, so the cone slice is a scaled copy of the id range.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .polyalg import LinearEquations, MatrixPoly, VarPool, coefficient_equalities

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
UNKNOWN = "unknown"

CONTRADICTION_TOL = 1e-12


def tri_offset(u: int, v: int) -> int:
    if u > v:
        u, v = v, u
    return v * (v + 1) // 2 + u


@dataclass(frozen=True)
class PsdBlock:
    index: int
    size: int
    base: int

    @property
    def n_entries(self) -> int:
        return self.size * (self.size + 1) // 2

    @property
    def ids(self) -> np.ndarray:
        """Symmetric ``size x size`` matrix of variable ids."""
        k = self.size
        u, v = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        lo, hi = np.minimum(u, v), np.maximum(u, v)
        return self.base + hi * (hi + 1) // 2 + lo

    def matrix(self, x) -> np.ndarray:
        return np.asarray(x)[self.ids]


class SdpProblem:
    """PSD blocks, free and nonnegative scalars, and linear equalities."""

    def __init__(self, pool: VarPool | None = None):
        self.pool = pool or VarPool()
        self.psd_blocks: list[PsdBlock] = []
        self.free_vars: list[int] = []
        self.nonneg_vars: list[int] = []
        self._eq_parts: list[LinearEquations] = []
        self._eq_cache: LinearEquations | None = None
        self.contradictions: list[str] = []

    # -- registry -----------------------------------------------------------

    def add_psd_block(self, size: int) -> PsdBlock:
        if size <= 0:
            raise ValueError("PSD block size must be positive")
        ids = self.pool.new_free_vars(size * (size + 1) // 2)
        blk = PsdBlock(len(self.psd_blocks), int(size), int(ids[0]))
        self.psd_blocks.append(blk)
        return blk

    def new_free_var(self, count: int = 1) -> np.ndarray:
        ids = self.pool.new_free_vars(count)
        self.free_vars.extend(int(i) for i in ids)
        return ids

    def register_free(self, ids) -> None:
        """Declare pool variables created elsewhere as free scalars."""
        known = set(self.free_vars)
        self.free_vars.extend(int(i) for i in ids if int(i) not in known)

    def new_nonneg_var(self, count: int = 1) -> np.ndarray:
        ids = self.pool.new_free_vars(count)
        self.nonneg_vars.extend(int(i) for i in ids)
        return ids

    @property
    def n_vars(self) -> int:
        return self.pool.n_vars

    # -- constraints --------------------------------------------------------

    def add_equalities(self, eqs: LinearEquations, label: str = "") -> int:
        if len(eqs) == 0:
            return 0
        A, b = eqs.A.tocsr(), eqs.b
        empty = np.diff(A.indptr) == 0
        if empty.any():
            bad = np.abs(b[empty]) > CONTRADICTION_TOL
            if bad.any():
                worst = float(np.max(np.abs(b[empty])))
                msg = f"contradiction 0 = {worst:.3e}" + (f" in {label}" if label else "")
                log.warning(msg)
                self.contradictions.append(msg)
            keep = ~empty
            A, b = A[keep], b[keep]
        if A.shape[0] == 0:
            return 0
        self._eq_parts.append(LinearEquations(A, b))
        self._eq_cache = None
        return A.shape[0]

    def add_poly_equality(self, a: MatrixPoly, b: MatrixPoly, entries=None, label: str = "") -> int:
        return self.add_equalities(coefficient_equalities(a, b, entries), label)

    def add_rows(self, rows: sp.spmatrix, label: str = "") -> int:
        """Rows ``[c | a]`` meaning ``c + a.x = 0`` (polynomial coefficient layout)."""
        if rows.shape[0] == 0:
            return 0
        return self.add_equalities(LinearEquations.from_rows(sp.csr_matrix(rows)), label)

    @property
    def equalities(self) -> LinearEquations:
        if self._eq_cache is None:
            eq = LinearEquations.empty()
            for part in self._eq_parts:
                eq = eq.concat(part)
            A = eq.A
            if A.shape[1] < self.n_vars:
                A = sp.csr_matrix((A.data, A.indices, A.indptr), shape=(A.shape[0], self.n_vars))
            self._eq_cache = LinearEquations(A.tocsr(), eq.b)
        return self._eq_cache

    @property
    def trivially_infeasible(self) -> bool:
        return bool(self.contradictions)

    def summary(self) -> dict:
        return {
            "psd_blocks": [b.size for b in self.psd_blocks],
            "free_vars": len(self.free_vars),
            "nonneg_vars": len(self.nonneg_vars),
            "equalities": len(self.equalities),
            "scalar_vars": self.n_vars,
        }


@dataclass
class SdpSolution:
    x: np.ndarray
    status: str
    backend_status: str = ""
    iterations: int = 0
    solve_time: float = 0.0
    residual: float = math.inf
    min_eig: float = -math.inf
    message: str = ""


@dataclass(frozen=True)
class SolverConfig:
    backend: str = "clarabel"
    tol_feas: float = 1e-9
    tol_gap: float = 1e-9
    max_iter: int = 300
    time_limit: float = math.inf
    verbose: bool = False
    # acceptance thresholds applied by verify()
    residual_tol: float = 1e-7
    psd_tol: float = 1e-8


@dataclass
class ResidualReport:
    max_residual: float
    min_eigenvalue: float
    block_min_eigs: list = field(default_factory=list)


def verify(problem: SdpProblem, x) -> ResidualReport:
    """Recompute equality residuals and PSD eigenvalues from raw problem data."""
    x = np.asarray(x, dtype=float)
    eq = problem.equalities
    res = float(np.max(np.abs(eq.residual(x)))) if len(eq) else 0.0
    eigs = []
    for blk in problem.psd_blocks:
        eigs.append(float(np.linalg.eigvalsh(blk.matrix(x))[0]))
    if problem.nonneg_vars:
        eigs.append(float(np.min(x[problem.nonneg_vars])))
    return ResidualReport(res, min(eigs) if eigs else math.inf, eigs)


def solve(problem: SdpProblem, config: SolverConfig | None = None) -> SdpSolution:
    config = config or SolverConfig()
    if config.backend not in BACKENDS:
        raise ValueError(f"backend {config.backend!r} unavailable; known: {sorted(BACKENDS)}")
    if problem.trivially_infeasible:
        return SdpSolution(
            np.zeros(problem.n_vars), INFEASIBLE, "contradiction", message="; ".join(problem.contradictions)
        )
    sol = BACKENDS[config.backend](problem, config)
    if sol.status == FEASIBLE or sol.backend_status in ("Solved", "AlmostSolved"):
        rep = verify(problem, sol.x)
        sol.residual, sol.min_eig = rep.max_residual, rep.min_eigenvalue
        ok = rep.max_residual <= config.residual_tol and rep.min_eigenvalue >= -config.psd_tol
        sol.status = FEASIBLE if ok else UNKNOWN
        if not ok:
            sol.message = (
                f"backend reported {sol.backend_status} but verification failed "
                f"(residual {rep.max_residual:.2e}, min eig {rep.min_eigenvalue:.2e})"
            )
    return sol


def _clarabel_backend(problem: SdpProblem, config: SolverConfig) -> SdpSolution:
    import clarabel

    eq = problem.equalities
    nv = problem.n_vars
    psd_ids = [np.arange(b.base, b.base + b.n_entries) for b in problem.psd_blocks]
    used = np.zeros(nv, dtype=bool)
    for ids in psd_ids:
        used[ids] = True
    used[problem.nonneg_vars] = True
    if len(eq):
        used[np.unique(eq.A.indices)] = True
    cols = np.nonzero(used)[0]
    col_of = -np.ones(nv, dtype=np.int64)
    col_of[cols] = np.arange(cols.size)
    n = cols.size

    blocks_A, blocks_b, cones = [], [], []
    # Every cone is invariant under positive scaling, so x solves (A, b) iff
    # x / beta solves (A, b / beta).  A unit right-hand side keeps the
    # infeasibility certificate from being drowned by a small epsilon.
    beta = float(np.max(np.abs(eq.b))) if len(eq) else 0.0
    beta = beta if beta > 0.0 else 1.0
    if len(eq):
        A = eq.A.tocoo()
        blocks_A.append(sp.csc_matrix((A.data, (A.row, col_of[A.col])), shape=(A.shape[0], n)))
        blocks_b.append(eq.b / beta)
        cones.append(clarabel.ZeroConeT(A.shape[0]))
    if problem.nonneg_vars:
        k = len(problem.nonneg_vars)
        blocks_A.append(sp.csc_matrix((-np.ones(k), (np.arange(k), col_of[problem.nonneg_vars])), shape=(k, n)))
        blocks_b.append(np.zeros(k))
        cones.append(clarabel.NonnegativeConeT(k))
    for blk, ids in zip(problem.psd_blocks, psd_ids):
        k = blk.size
        scale = np.full(ids.size, -math.sqrt(2.0))
        diag = np.array([tri_offset(u, u) for u in range(k)])
        scale[diag] = -1.0
        blocks_A.append(sp.csc_matrix((scale, (np.arange(ids.size), col_of[ids])), shape=(ids.size, n)))
        blocks_b.append(np.zeros(ids.size))
        cones.append(clarabel.PSDTriangleConeT(k))

    A = sp.vstack(blocks_A).tocsc()
    b = np.concatenate(blocks_b)
    P = sp.csc_matrix((n, n))
    q = np.zeros(n)

    settings = clarabel.DefaultSettings()
    settings.verbose = config.verbose
    settings.tol_feas = config.tol_feas
    settings.tol_gap_abs = config.tol_gap
    settings.tol_gap_rel = config.tol_gap
    settings.max_iter = config.max_iter
    if math.isfinite(config.time_limit):
        settings.time_limit = config.time_limit
    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
    res = solver.solve()
    elapsed = time.perf_counter() - t0

    status = str(res.status).split(".")[-1]
    x = np.zeros(nv)
    x[cols] = beta * np.asarray(res.x)
    if status == "PrimalInfeasible":
        verdict = INFEASIBLE
    elif status in ("Solved", "AlmostSolved"):
        verdict = FEASIBLE
    else:
        verdict = UNKNOWN
    log.debug("clarabel: %s after %d iterations (%.2fs)", status, res.iterations, elapsed)
    return SdpSolution(x, verdict, status, int(res.iterations), elapsed)


BACKENDS = {"clarabel": _clarabel_backend}


# ---------------------------------------------------------------------------
# SDPA sparse format
#
# The problem is written in SDPA's dual standard form ``F_i . Y = c_i`` with
# ``Y`` block-diagonal PSD.  Each equality becomes one constraint matrix.
# Nonnegative scalars and the two halves of every split free scalar share one
# trailing diagonal block.


@dataclass
class SdpaData:
    m: int
    block_sizes: list
    rhs: list
    entries: list  # (matno, blkno, i, j, value), 1-based, i <= j

    def key(self):
        return (self.m, tuple(self.block_sizes), tuple(self.rhs), tuple(self.entries))


def to_sdpa_data(problem: SdpProblem) -> SdpaData:
    eq = problem.equalities
    nv = problem.n_vars
    where_blk = np.zeros(nv, dtype=np.int64)
    where_i = np.zeros(nv, dtype=np.int64)
    where_j = np.zeros(nv, dtype=np.int64)
    kind = np.zeros(nv, dtype=np.int8)  # 0 unused, 1 psd, 2 nonneg, 3 free
    for blk in problem.psd_blocks:
        k = blk.size
        for v in range(k):
            for u in range(v + 1):
                vid = blk.base + tri_offset(u, v)
                kind[vid], where_blk[vid], where_i[vid], where_j[vid] = 1, blk.index + 1, u + 1, v + 1
    diag_block = len(problem.psd_blocks) + 1
    pos = 0
    for vid in problem.nonneg_vars:
        pos += 1
        kind[vid], where_blk[vid], where_i[vid] = 2, diag_block, pos
    used_free = set(np.unique(eq.A.indices).tolist()) if len(eq) else set()
    for vid in problem.free_vars:
        if vid not in used_free:
            continue
        pos += 1
        kind[vid], where_blk[vid], where_i[vid] = 3, diag_block, pos
        pos += 1  # x- sits right after x+

    entries = []
    A = eq.A.tocsr()
    for r in range(A.shape[0]):
        for vid, a in zip(A.indices[A.indptr[r] : A.indptr[r + 1]], A.data[A.indptr[r] : A.indptr[r + 1]]):
            k, blk, i = kind[vid], int(where_blk[vid]), int(where_i[vid])
            if k == 1:
                j = int(where_j[vid])
                entries.append((r + 1, blk, i, j, float(a) if i == j else float(a) / 2.0))
            elif k == 2:
                entries.append((r + 1, blk, i, i, float(a)))
            elif k == 3:
                entries.append((r + 1, blk, i, i, float(a)))
                entries.append((r + 1, blk, i + 1, i + 1, -float(a)))
            else:
                raise ValueError(f"equality references unregistered variable {vid}")
    entries.sort(key=lambda e: e[:4])
    sizes = [b.size for b in problem.psd_blocks]
    if pos:
        sizes.append(-pos)
    return SdpaData(A.shape[0], sizes, [float(v) for v in eq.b], entries)


def write_sdpa(data: SdpaData, path) -> None:
    lines = [
        str(data.m),
        str(len(data.block_sizes)),
        " ".join(str(s) for s in data.block_sizes),
        " ".join(repr(float(v)) for v in data.rhs),
    ]
    lines += [f"{m} {b} {i} {j} {v!r}" for m, b, i, j, v in data.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def to_sdpa_sparse(problem: SdpProblem, path) -> SdpaData:
    data = to_sdpa_data(problem)
    write_sdpa(data, path)
    return data


def _tokens(line: str) -> list[str]:
    for ch in ",{}()":
        line = line.replace(ch, " ")
    return line.split()


def parse_sdpa(path) -> SdpaData:
    raw = Path(path).read_text(encoding="ascii").splitlines()
    lines = [ln for ln in raw if ln.strip() and not ln.lstrip().startswith(('"', "*"))]
    if len(lines) < 3:
        raise ValueError(f"{path}: truncated SDPA header")
    m = int(_tokens(lines[0])[0])
    nblocks = int(_tokens(lines[1])[0])
    sizes = [int(t) for t in _tokens(lines[2])[:nblocks]]
    if len(sizes) != nblocks:
        raise ValueError(f"{path}: expected {nblocks} block sizes")
    rest = lines[3:]
    rhs: list[float] = []
    k = 0
    while len(rhs) < m:
        if k >= len(rest):
            raise ValueError(f"{path}: expected {m} right-hand sides")
        rhs.extend(float(t) for t in _tokens(rest[k]))
        k += 1
    if len(rhs) != m:
        raise ValueError(f"{path}: expected {m} right-hand sides, got {len(rhs)}")
    entries = []
    for lineno, ln in enumerate(rest[k:], start=k + 4):
        t = _tokens(ln)
        if len(t) != 5:
            raise ValueError(f"{path}:{lineno}: malformed entry line {ln!r}")
        mat, blk, i, j = (int(v) for v in t[:4])
        if i > j:
            i, j = j, i
        entries.append((mat, blk, i, j, float(t[4])))
    return SdpaData(m, sizes, rhs, entries)


def problem_from_sdpa(data: SdpaData) -> SdpProblem:
    """Rebuild a feasibility problem; diagonal blocks become nonnegative scalars."""
    prob = SdpProblem()
    var_of: list = []
    for size in data.block_sizes:
        if size > 0:
            blk = prob.add_psd_block(size)
            var_of.append(("psd", blk))
        else:
            var_of.append(("diag", prob.new_nonneg_var(-size)))
    rows, cols, vals = [], [], []
    for mat, blk, i, j, v in data.entries:
        if mat == 0:
            continue  # objective matrix is irrelevant for feasibility
        kind, handle = var_of[blk - 1]
        if kind == "psd":
            vid = handle.base + tri_offset(i - 1, j - 1)
            coef = v if i == j else 2.0 * v
        else:
            if i != j:
                raise ValueError("off-diagonal entry in a diagonal block")
            vid, coef = int(handle[i - 1]), v
        rows.append(mat - 1)
        cols.append(vid)
        vals.append(coef)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(data.m, prob.n_vars))
    prob.add_equalities(LinearEquations(A, np.asarray(data.rhs, dtype=float)))
    return prob


def solve_sdpa_file(path, config: SolverConfig | None = None) -> SdpSolution:
    return solve(problem_from_sdpa(parse_sdpa(path)), config)
