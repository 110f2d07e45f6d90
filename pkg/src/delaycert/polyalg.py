"""Matrix-valued polynomials in ``s`` and ``theta`` with affine coefficients.

Every coefficient of a :class:`MatrixPoly` is an affine function of SDP
decision variables.  Internally each monomial maps to a sparse matrix with
one row per matrix entry (row-major) and one column per decision variable,
column 0 holding the constant part.  All polynomial operations are linear
maps on that coefficient space, so assembly never leaves sparse linear
algebra.
"""
from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass
from numbers import Real
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

VARS = ("s", "theta")

Mono = tuple  # (e_s, e_theta)


def _var_index(var) -> int:
    if var in (0, "s"):
        return 0
    if var in (1, "theta", "θ"):
        return 1
    raise ValueError(f"unknown polynomial variable {var!r}")


def mono_key(m):
    """Graded-lex sort key, ``s`` before ``theta``."""
    return (m[0] + m[1], -m[0])


def _pad(c: sp.csr_matrix, width: int) -> sp.csr_matrix:
    if c.shape[1] >= width:
        return c
    return sp.csr_matrix((c.data, c.indices, c.indptr), shape=(c.shape[0], width))


def _prune(c: sp.csr_matrix) -> sp.csr_matrix:
    c = c.tocsr()
    c.sum_duplicates()
    c.eliminate_zeros()
    return c


class VarPool:
    """Thread-safe allocator of decision-variable ids."""

    def __init__(self, start: int = 0):
        self._counter = itertools.count(start)
        self._lock = threading.Lock()
        self._n = start

    @property
    def n_vars(self) -> int:
        return self._n

    def new_free_vars(self, count: int) -> np.ndarray:
        with self._lock:
            ids = np.array([next(self._counter) for _ in range(count)], dtype=np.int64)
            self._n += count
        return ids


# ---------------------------------------------------------------------------
# Affine scalars


@dataclass(frozen=True)
class AffineScalar:
    """``constant + sum(coef * x[id])`` with unique variable ids."""

    constant: float = 0.0
    terms: tuple = ()

    def __post_init__(self):
        merged: dict[int, float] = {}
        for vid, coef in self.terms:
            merged[int(vid)] = merged.get(int(vid), 0.0) + float(coef)
        terms = tuple(sorted((k, v) for k, v in merged.items() if v != 0.0))
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "constant", float(self.constant))

    @classmethod
    def var(cls, vid: int, coef: float = 1.0) -> "AffineScalar":
        return cls(0.0, ((vid, coef),))

    @property
    def is_constant(self) -> bool:
        return not self.terms

    def __add__(self, other):
        other = _as_affine(other)
        return AffineScalar(self.constant + other.constant, self.terms + other.terms)

    __radd__ = __add__

    def __neg__(self):
        return AffineScalar(-self.constant, tuple((k, -v) for k, v in self.terms))

    def __sub__(self, other):
        return self + (-_as_affine(other))

    def __rsub__(self, other):
        return _as_affine(other) - self

    def __mul__(self, other):
        other = _as_affine(other)
        if self.terms and other.terms:
            raise ValueError("nonlinear product: both factors depend on decision variables")
        if not other.terms:
            c = other.constant
            return AffineScalar(self.constant * c, tuple((k, v * c) for k, v in self.terms))
        return other * self

    __rmul__ = __mul__

    def evaluate(self, x) -> float:
        return self.constant + sum(v * float(x[k]) for k, v in self.terms)


def _as_affine(v) -> AffineScalar:
    if isinstance(v, AffineScalar):
        return v
    if isinstance(v, Real):
        return AffineScalar(float(v))
    raise TypeError(f"cannot interpret {type(v).__name__} as an affine scalar")


# ---------------------------------------------------------------------------
# Linear equations


@dataclass
class LinearEquations:
    """Rows of ``A x = b`` over decision variables."""

    A: sp.csr_matrix
    b: np.ndarray

    def __len__(self) -> int:
        return self.A.shape[0]

    @classmethod
    def empty(cls) -> "LinearEquations":
        return cls(sp.csr_matrix((0, 0)), np.zeros(0))

    @classmethod
    def from_rows(cls, rows: sp.csr_matrix) -> "LinearEquations":
        """Build from rows ``[c | a]`` meaning ``c + a.x = 0``."""
        rows = _prune(rows)
        A = rows[:, 1:].tocsr()
        b = -np.asarray(rows[:, 0].todense()).ravel()
        keep = (np.diff(A.indptr) > 0) | (b != 0.0)
        return cls(A[keep], b[keep])

    def concat(self, other: "LinearEquations") -> "LinearEquations":
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        w = max(self.A.shape[1], other.A.shape[1])
        return LinearEquations(
            sp.vstack([_pad(self.A, w), _pad(other.A, w)]).tocsr(),
            np.concatenate([self.b, other.b]),
        )

    def residual(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        A = self.A
        if A.shape[1] > x.size:
            raise ValueError("assignment does not cover all decision variables")
        return A @ x[: A.shape[1]] - self.b

    def as_dicts(self) -> list[tuple[dict[int, float], float]]:
        out = []
        for r in range(len(self)):
            lo, hi = self.A.indptr[r], self.A.indptr[r + 1]
            out.append(
                ({int(k): float(v) for k, v in zip(self.A.indices[lo:hi], self.A.data[lo:hi])}, float(self.b[r]))
            )
        return out


# ---------------------------------------------------------------------------
# Matrix polynomials


class MatrixPoly:
    """Matrix polynomial in ``s`` and ``theta`` with affine coefficients.

    ``coeffs`` maps an exponent pair ``(e_s, e_theta)`` to a sparse matrix of
    shape ``(rows*cols, width)``; column 0 is the constant term, column
    ``k + 1`` the coefficient of decision variable ``k``.
    """

    __slots__ = ("rows", "cols", "_c")

    def __init__(self, rows: int, cols: int, coeffs: Mapping | None = None):
        if rows <= 0 or cols <= 0:
            raise ValueError("matrix polynomial dimensions must be positive")
        self.rows = int(rows)
        self.cols = int(cols)
        c = {}
        for m, mat in (coeffs or {}).items():
            mat = _prune(sp.csr_matrix(mat))
            if mat.shape[0] != self.rows * self.cols:
                raise ValueError("coefficient block has wrong number of rows")
            if mat.nnz:
                c[(int(m[0]), int(m[1]))] = mat
        self._c = dict(sorted(c.items(), key=lambda kv: mono_key(kv[0])))

    # -- construction -----------------------------------------------------

    @classmethod
    def zeros(cls, rows: int, cols: int | None = None) -> "MatrixPoly":
        return cls(rows, rows if cols is None else cols)

    @classmethod
    def constant(cls, value, mono=(0, 0)) -> "MatrixPoly":
        arr = np.atleast_2d(np.asarray(value, dtype=float))
        r, c = arr.shape
        return cls(r, c, {mono: sp.csr_matrix(arr.reshape(-1, 1))})

    @classmethod
    def identity(cls, n: int, scale: float = 1.0) -> "MatrixPoly":
        return cls.constant(scale * np.eye(n))

    @classmethod
    def monomial(cls, var, power: int = 1, coef: float = 1.0) -> "MatrixPoly":
        m = [0, 0]
        m[_var_index(var)] = power
        return cls.constant([[coef]], tuple(m))

    @classmethod
    def scalar(cls, coeffs: Mapping) -> "MatrixPoly":
        """Numeric scalar polynomial from ``{(e_s, e_theta): value}``."""
        return cls(1, 1, {m: sp.csr_matrix([[float(v)]]) for m, v in coeffs.items()})

    @classmethod
    def variable_matrix(cls, ids, mono=(0, 0), coef=1.0) -> "MatrixPoly":
        """Matrix whose entry ``(i, j)`` is ``coef * x[ids[i, j]]`` (negative id = 0)."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        r, c = ids.shape
        flat = ids.ravel()
        mask = flat >= 0
        rows = np.nonzero(mask)[0]
        cols = flat[mask] + 1
        width = int(cols.max()) + 1 if cols.size else 1
        mat = sp.csr_matrix((np.full(rows.size, float(coef)), (rows, cols)), shape=(r * c, width))
        return cls(r, c, {mono: mat})

    @classmethod
    def from_coo(cls, rows, cols, monos, entry_r, entry_c, colidx, vals) -> "MatrixPoly":
        """Assemble from parallel arrays; ``colidx`` 0 is constant, ``k+1`` is variable ``k``."""
        monos = np.asarray(monos, dtype=np.int64).reshape(-1, 2)
        entry = np.asarray(entry_r, dtype=np.int64) * cols + np.asarray(entry_c, dtype=np.int64)
        colidx = np.asarray(colidx, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        width = int(colidx.max()) + 1 if colidx.size else 1
        out = {}
        if monos.shape[0]:
            keys, inv = np.unique(monos, axis=0, return_inverse=True)
            inv = np.asarray(inv).ravel()
            for k, m in enumerate(keys):
                sel = inv == k
                out[(int(m[0]), int(m[1]))] = sp.csr_matrix(
                    (vals[sel], (entry[sel], colidx[sel])), shape=(rows * cols, width)
                )
        return cls(rows, cols, out)

    @classmethod
    def from_affine(cls, entries: Mapping) -> "MatrixPoly":
        """Build from ``{mono: 2-D nested list of AffineScalar or float}``."""
        r = c = None
        data, ri, ci, mi = [], [], [], []
        for m, grid in entries.items():
            grid = [list(row) for row in grid]
            r, c = len(grid), len(grid[0])
            for i, row in enumerate(grid):
                for j, v in enumerate(row):
                    v = _as_affine(v)
                    pairs = [(0, v.constant)] + [(k + 1, a) for k, a in v.terms]
                    for col, a in pairs:
                        if a != 0.0:
                            data.append(a)
                            ri.append(i * c + j)
                            ci.append(col)
                            mi.append(m)
        if r is None:
            raise ValueError("no entries given")
        width = max(ci) + 1 if ci else 1
        out: dict = {}
        for m in set(mi):
            sel = [k for k, mm in enumerate(mi) if mm == m]
            out[m] = sp.csr_matrix(
                ([data[k] for k in sel], ([ri[k] for k in sel], [ci[k] for k in sel])), shape=(r * c, width)
            )
        return cls(r, c, out)

    # -- inspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def monomials(self) -> list:
        return list(self._c)

    @property
    def coeffs(self) -> dict:
        return dict(self._c)

    @property
    def width(self) -> int:
        return max((c.shape[1] for c in self._c.values()), default=1)

    @property
    def vars(self) -> frozenset:
        used = set()
        for m in self._c:
            if m[0]:
                used.add("s")
            if m[1]:
                used.add("theta")
        return frozenset(used)

    @property
    def degree(self) -> int:
        return max((m[0] + m[1] for m in self._c), default=0)

    def degree_in(self, var) -> int:
        k = _var_index(var)
        return max((m[k] for m in self._c), default=0)

    @property
    def is_zero(self) -> bool:
        return not self._c

    @property
    def is_numeric(self) -> bool:
        return all(c.indices.size == 0 or c.indices.max() == 0 for c in self._c.values())

    def variables(self) -> np.ndarray:
        ids = set()
        for c in self._c.values():
            ids.update(int(k) - 1 for k in c.indices if k > 0)
        return np.array(sorted(ids), dtype=np.int64)

    def coefficient(self, mono) -> sp.csr_matrix:
        m = (int(mono[0]), int(mono[1]))
        if m in self._c:
            return self._c[m]
        return sp.csr_matrix((self.rows * self.cols, 1))

    def numeric_coefficient(self, mono) -> np.ndarray:
        if not self.is_numeric:
            raise ValueError("polynomial has decision-variable coefficients")
        return np.asarray(self.coefficient(mono)[:, 0].todense()).reshape(self.rows, self.cols)

    def entry(self, i: int, j: int, mono=(0, 0)) -> AffineScalar:
        row = self.coefficient(mono)[i * self.cols + j]
        const = 0.0
        terms = []
        for k, v in zip(row.indices, row.data):
            if k == 0:
                const = float(v)
            else:
                terms.append((int(k) - 1, float(v)))
        return AffineScalar(const, tuple(terms))

    def __repr__(self) -> str:
        return f"MatrixPoly({self.rows}x{self.cols}, monomials={self.monomials})"

    # -- ring operations --------------------------------------------------

    def _check_same_shape(self, other: "MatrixPoly"):
        if self.shape != other.shape:
            raise ValueError(f"dimension mismatch: {self.shape} vs {other.shape}")

    def __add__(self, other: "MatrixPoly") -> "MatrixPoly":
        if not isinstance(other, MatrixPoly):
            return NotImplemented
        self._check_same_shape(other)
        w = max(self.width, other.width)
        out = {m: _pad(c, w) for m, c in self._c.items()}
        for m, c in other._c.items():
            out[m] = out[m] + _pad(c, w) if m in out else _pad(c, w)
        return MatrixPoly(self.rows, self.cols, out)

    def __neg__(self) -> "MatrixPoly":
        return MatrixPoly(self.rows, self.cols, {m: -c for m, c in self._c.items()})

    def __sub__(self, other: "MatrixPoly") -> "MatrixPoly":
        if not isinstance(other, MatrixPoly):
            return NotImplemented
        return self + (-other)

    def scale(self, alpha: float) -> "MatrixPoly":
        if alpha == 0.0:
            return MatrixPoly(self.rows, self.cols)
        return MatrixPoly(self.rows, self.cols, {m: c * float(alpha) for m, c in self._c.items()})

    def __mul__(self, alpha):
        if isinstance(alpha, Real):
            return self.scale(float(alpha))
        if isinstance(alpha, MatrixPoly):
            return multiply(self, alpha)
        return NotImplemented

    __rmul__ = __mul__

    def __matmul__(self, other: "MatrixPoly") -> "MatrixPoly":
        return multiply(self, other)

    @property
    def T(self) -> "MatrixPoly":
        return self.transpose()

    def transpose(self) -> "MatrixPoly":
        perm = _transpose_perm(self.rows, self.cols)
        return MatrixPoly(self.cols, self.rows, {m: c[perm] for m, c in self._c.items()})

    def swap_vars(self) -> "MatrixPoly":
        """Exchange the roles of ``s`` and ``theta``."""
        return MatrixPoly(self.rows, self.cols, {(m[1], m[0]): c for m, c in self._c.items()})

    def rename(self, src, dst) -> "MatrixPoly":
        """Rename a variable that the polynomial does not share with ``dst``."""
        i, j = _var_index(src), _var_index(dst)
        if i == j:
            return self
        if any(m[j] for m in self._c):
            raise ValueError(f"polynomial already depends on {VARS[j]}")
        return self.swap_vars()

    def subs(self, var, value: float) -> "MatrixPoly":
        """Evaluate one variable at a number, keeping the other symbolic."""
        k = _var_index(var)
        out: dict = {}
        w = self.width
        for m, c in self._c.items():
            f = float(value) ** m[k] if m[k] else 1.0
            if f == 0.0:
                continue
            nm = (0, m[1]) if k == 0 else (m[0], 0)
            term = _pad(c, w) * f
            out[nm] = out[nm] + term if nm in out else term
        return MatrixPoly(self.rows, self.cols, out)

    def block(self, r0: int, r1: int, c0: int, c1: int) -> "MatrixPoly":
        idx = np.array([i * self.cols + j for i in range(r0, r1) for j in range(c0, c1)], dtype=np.int64)
        return MatrixPoly(r1 - r0, c1 - c0, {m: c[idx] for m, c in self._c.items()})

    # -- numerics ---------------------------------------------------------

    def assign(self, x) -> "MatrixPoly":
        """Substitute numeric values for every decision variable."""
        x = _assignment_vector(x, self.width - 1)
        vec = np.concatenate([[1.0], x])
        out = {}
        for m, c in self._c.items():
            vals = c @ vec[: c.shape[1]]
            out[m] = sp.csr_matrix(vals.reshape(-1, 1))
        return MatrixPoly(self.rows, self.cols, out)

    def numeric_arrays(self, x=None):
        """Return ``(monos (k, 2) int array, coefs (k, rows, cols))``."""
        p = self if x is None else self.assign(x)
        if not p.is_numeric:
            raise ValueError("assignment required: polynomial has decision variables")
        monos = np.array(list(p._c) or [(0, 0)], dtype=np.int64)
        coefs = np.zeros((monos.shape[0], p.rows, p.cols))
        for k, m in enumerate(p._c):
            coefs[k] = np.asarray(p._c[m][:, 0].todense()).reshape(p.rows, p.cols)
        return monos, coefs

    def evaluate(self, s: float = 0.0, theta: float = 0.0, x=None) -> np.ndarray:
        monos, coefs = self.numeric_arrays(x)
        w = (float(s) ** monos[:, 0]) * (float(theta) ** monos[:, 1])
        return np.tensordot(w, coefs, axes=1)

    def evaluate_many(self, s, theta=None, x=None) -> np.ndarray:
        """Vectorised evaluation; returns ``(len(s), rows, cols)``."""
        s = np.asarray(s, dtype=float).ravel()
        theta = np.zeros_like(s) if theta is None else np.broadcast_to(np.asarray(theta, dtype=float), s.shape)
        monos, coefs = self.numeric_arrays(x)
        w = s[:, None] ** monos[None, :, 0] * theta[:, None] ** monos[None, :, 1]
        return np.einsum("pk,kij->pij", w, coefs)


def _assignment_vector(x, needed: int) -> np.ndarray:
    if isinstance(x, Mapping):
        vec = np.zeros(needed)
        for k, v in x.items():
            if k < needed:
                vec[k] = v
        missing = [k for k in range(needed) if k not in x]
        if missing:
            raise KeyError(f"assignment missing decision variables {missing[:5]}")
        return vec
    x = np.asarray(x, dtype=float).ravel()
    if x.size < needed:
        raise KeyError(f"assignment covers {x.size} variables, polynomial uses {needed}")
    return x


_PERM_CACHE: dict = {}


def _transpose_perm(r: int, c: int) -> np.ndarray:
    key = (r, c)
    if key not in _PERM_CACHE:
        # new row (j, i) reads old row (i, j)
        _PERM_CACHE[key] = np.array([i * c + j for j in range(c) for i in range(r)], dtype=np.int64)
    return _PERM_CACHE[key]


# ---------------------------------------------------------------------------
# Module-level operations


def add(a: MatrixPoly, b: MatrixPoly) -> MatrixPoly:
    return a + b


def multiply(a: MatrixPoly, b: MatrixPoly) -> MatrixPoly:
    """Polynomial matrix product; a 1x1 operand acts as a scalar weight."""
    a_num, b_num = a.is_numeric, b.is_numeric
    if not (a_num or b_num):
        raise ValueError("nonlinear product: both operands carry decision variables")
    if a.shape == (1, 1):
        return _scalar_times(a, b)
    if b.shape == (1, 1):
        return _scalar_times(b, a)
    if a.cols != b.rows:
        raise ValueError(f"inner dimension mismatch: {a.shape} @ {b.shape}")
    r, c = a.rows, b.cols
    out: dict = {}
    if a_num and b_num:
        monos_a, ca = a.numeric_arrays()
        monos_b, cb = b.numeric_arrays()
        prods = np.einsum("aij,bjk->abik", ca, cb)
        acc: dict = {}
        for i, ma in enumerate(monos_a):
            for j, mb in enumerate(monos_b):
                m = (int(ma[0] + mb[0]), int(ma[1] + mb[1]))
                acc[m] = acc[m] + prods[i, j] if m in acc else prods[i, j]
        return MatrixPoly(r, c, {m: sp.csr_matrix(v.reshape(-1, 1)) for m, v in acc.items()})
    w = max(a.width, b.width)
    for ma, ca in a._c.items():
        for mb, cb in b._c.items():
            if a_num:
                A = np.asarray(ca[:, 0].todense()).reshape(a.rows, a.cols)
                term = sp.kron(sp.csr_matrix(A), sp.identity(c, format="csr"), format="csr") @ _pad(cb, w)
            else:
                B = np.asarray(cb[:, 0].todense()).reshape(b.rows, b.cols)
                term = sp.kron(sp.identity(r, format="csr"), sp.csr_matrix(B.T), format="csr") @ _pad(ca, w)
            m = (ma[0] + mb[0], ma[1] + mb[1])
            out[m] = out[m] + term if m in out else term
    return MatrixPoly(r, c, out)


def _scalar_times(g: MatrixPoly, p: MatrixPoly) -> MatrixPoly:
    if not g.is_numeric:
        if not p.is_numeric:
            raise ValueError("nonlinear product: both operands carry decision variables")
        # affine scalar times numeric matrix
        out: dict = {}
        for mg, cg in g._c.items():
            for mp, cp in p._c.items():
                vals = np.asarray(cp[:, 0].todense()).ravel()
                term = sp.csr_matrix(vals.reshape(-1, 1)) @ cg
                m = (mg[0] + mp[0], mg[1] + mp[1])
                out[m] = out[m] + term if m in out else term
        return MatrixPoly(p.rows, p.cols, out)
    out = {}
    w = p.width
    for mg, cg in g._c.items():
        f = float(cg[0, 0]) if cg.nnz else 0.0
        if f == 0.0:
            continue
        for mp, cp in p._c.items():
            m = (mg[0] + mp[0], mg[1] + mp[1])
            term = _pad(cp, w) * f
            out[m] = out[m] + term if m in out else term
    return MatrixPoly(p.rows, p.cols, out)


def differentiate(p: MatrixPoly, var) -> MatrixPoly:
    k = _var_index(var)
    out = {}
    for m, c in p._c.items():
        if m[k] == 0:
            continue
        nm = (m[0] - 1, m[1]) if k == 0 else (m[0], m[1] - 1)
        out[nm] = c * float(m[k])
    return MatrixPoly(p.rows, p.cols, out)


def integrate_definite(p: MatrixPoly, var, a: float, b: float) -> MatrixPoly:
    k = _var_index(var)
    out: dict = {}
    w = p.width
    for m, c in p._c.items():
        e = m[k]
        f = (float(b) ** (e + 1) - float(a) ** (e + 1)) / (e + 1)
        if f == 0.0:
            continue
        nm = (0, m[1]) if k == 0 else (m[0], 0)
        term = _pad(c, w) * f
        out[nm] = out[nm] + term if nm in out else term
    return MatrixPoly(p.rows, p.cols, out)


def affine_substitute(p: MatrixPoly, var, alpha: float, beta: float) -> MatrixPoly:
    """Replace ``var`` by ``alpha * var + beta`` exactly."""
    if alpha == 0:
        raise ValueError("affine substitution requires a nonzero scale")
    k = _var_index(var)
    out: dict = {}
    w = p.width
    for m, c in p._c.items():
        e = m[k]
        cp = _pad(c, w)
        for j in range(e + 1):
            f = math.comb(e, j) * float(alpha) ** j * float(beta) ** (e - j)
            if f == 0.0:
                continue
            nm = (j, m[1]) if k == 0 else (m[0], j)
            term = cp * f
            out[nm] = out[nm] + term if nm in out else term
    return MatrixPoly(p.rows, p.cols, out)


def evaluate(p: MatrixPoly, point=(0.0, 0.0), assignment=None) -> np.ndarray:
    s, th = point
    return p.evaluate(s, th, assignment)


def coefficient_equalities(a: MatrixPoly, b: MatrixPoly, entries=None) -> LinearEquations:
    """Linear equations on decision variables making ``a`` and ``b`` identical.

    ``entries`` optionally restricts to a subset of ``(i, j)`` matrix entries
    (used to skip the mirror half of symmetric matrices).
    """
    a._check_same_shape(b)
    diff = a - b
    if not diff._c:
        return LinearEquations.empty()
    w = diff.width
    blocks = [_pad(c, w) for c in diff._c.values()]
    if entries is not None:
        idx = np.array([i * a.cols + j for i, j in entries], dtype=np.int64)
        blocks = [c[idx] for c in blocks]
    return LinearEquations.from_rows(sp.vstack(blocks).tocsr())


def upper_entries(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


def kernel_canonical_rows(p: MatrixPoly, mirror: bool) -> sp.csr_matrix:
    """Coefficient rows of a kernel piece, skipping entries implied by symmetry.

    With ``mirror`` the piece satisfies ``p(s, theta) = p(theta, s)^T``, so the
    row for ``((i, j), (a, b))`` duplicates ``((j, i), (b, a))``.
    """
    w = p.width
    rows = []
    for m, c in p._c.items():
        c = _pad(c, w)
        if mirror:
            keep = [
                i * p.cols + j
                for i in range(p.rows)
                for j in range(p.cols)
                if (m[0], m[1], i, j) <= (m[1], m[0], j, i)
            ]
            c = c[np.array(keep, dtype=np.int64)]
        rows.append(c)
    if not rows:
        return sp.csr_matrix((0, 1))
    return sp.vstack(rows).tocsr()


def bmat(blocks: Sequence[Sequence[MatrixPoly | None]]) -> MatrixPoly:
    """Assemble a block matrix; ``None`` entries are zero blocks."""
    nbr, nbc = len(blocks), len(blocks[0])
    heights = [None] * nbr
    widths = [None] * nbc
    for i, row in enumerate(blocks):
        if len(row) != nbc:
            raise ValueError("ragged block layout")
        for j, b in enumerate(row):
            if b is None:
                continue
            if heights[i] not in (None, b.rows) or widths[j] not in (None, b.cols):
                raise ValueError("inconsistent block dimensions")
            heights[i], widths[j] = b.rows, b.cols
    if None in heights or None in widths:
        raise ValueError("every block row and column needs at least one explicit block")
    R, C = sum(heights), sum(widths)
    roff = np.cumsum([0] + heights)
    coff = np.cumsum([0] + widths)
    out: dict = {}
    w = max((b.width for row in blocks for b in row if b is not None), default=1)
    for i, row in enumerate(blocks):
        for j, b in enumerate(row):
            if b is None or b.is_zero:
                continue
            src = np.arange(b.rows * b.cols)
            dst = (roff[i] + src // b.cols) * C + coff[j] + src % b.cols
            place = sp.csr_matrix((np.ones(src.size), (dst, src)), shape=(R * C, b.rows * b.cols))
            for m, c in b._c.items():
                term = place @ _pad(c, w)
                out[m] = out[m] + term if m in out else term
    return MatrixPoly(R, C, out)


def kron_identity(p: MatrixPoly, n: int) -> MatrixPoly:
    """Numeric ``p ⊗ I_n`` for a numeric polynomial matrix ``p``."""
    blocks = [[p.block(i, i + 1, j, j + 1) for j in range(p.cols)] for i in range(p.rows)]
    eye = MatrixPoly.identity(n)
    return bmat([[_scalar_times(b, eye) for b in row] for row in blocks])


# ---------------------------------------------------------------------------
# Interval grids and piecewise polynomials


class IntervalGrid:
    """Delays ``0 < tau_1 < ... < tau_K`` tiling ``[-tau_K, 0]``."""

    def __init__(self, delays: Iterable[float]):
        taus = tuple(float(t) for t in delays)
        if not taus:
            raise ValueError("at least one delay is required")
        if taus[0] <= 0:
            raise ValueError("delays must be positive")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("delays must be strictly increasing")
        self.delays = taus

    @property
    def K(self) -> int:
        return len(self.delays)

    @property
    def tau_max(self) -> float:
        return self.delays[-1]

    def tau(self, i: int) -> float:
        """``tau_i`` with ``tau_0 = 0`` (1-based ``i``)."""
        return 0.0 if i == 0 else self.delays[i - 1]

    @property
    def intervals(self) -> list[tuple[float, float]]:
        """``[-tau_i, -tau_{i-1}]`` for ``i = 1..K`` (0-based list)."""
        return [(-self.tau(i), -self.tau(i - 1)) for i in range(1, self.K + 1)]

    def compression(self, i: int) -> float:
        """``a_i = (tau_i - tau_{i-1}) / tau_i`` for 0-based piece ``i``."""
        return (self.tau(i + 1) - self.tau(i)) / self.tau(i + 1)

    def stretch(self, i: int) -> tuple[float, float]:
        """``(alpha, beta)`` with ``rho_i(s) = alpha*s + beta = (s + tau_{i-1}) / a_i``."""
        a = self.compression(i)
        return 1.0 / a, self.tau(i) / a

    def piece_of(self, s: float) -> int:
        for i, (lo, hi) in enumerate(self.intervals):
            if lo <= s <= hi:
                return i
        raise ValueError(f"{s} lies outside [-{self.tau_max}, 0]")

    def __eq__(self, other) -> bool:
        return isinstance(other, IntervalGrid) and self.delays == other.delays

    def __hash__(self) -> int:
        return hash(self.delays)

    def __repr__(self) -> str:
        return f"IntervalGrid({list(self.delays)})"


@dataclass
class PiecewisePoly1D:
    grid: IntervalGrid
    pieces: list

    def __post_init__(self):
        if len(self.pieces) != self.grid.K:
            raise ValueError("need one piece per interval")
        shapes = {p.shape for p in self.pieces}
        if len(shapes) != 1:
            raise ValueError("all pieces must share dimensions")

    @property
    def shape(self):
        return self.pieces[0].shape

    def __add__(self, other: "PiecewisePoly1D") -> "PiecewisePoly1D":
        _same_grid(self.grid, other.grid)
        return PiecewisePoly1D(self.grid, [a + b for a, b in zip(self.pieces, other.pieces)])

    def __neg__(self):
        return PiecewisePoly1D(self.grid, [-p for p in self.pieces])

    def __sub__(self, other):
        return self + (-other)

    def map(self, fn) -> "PiecewisePoly1D":
        return PiecewisePoly1D(self.grid, [fn(p) for p in self.pieces])

    def assign(self, x) -> "PiecewisePoly1D":
        return self.map(lambda p: p.assign(x))

    def evaluate(self, s: float, x=None) -> np.ndarray:
        return self.pieces[self.grid.piece_of(s)].evaluate(s, 0.0, x)


@dataclass
class PiecewisePoly2D:
    grid: IntervalGrid
    pieces: list  # pieces[i][j] for s in interval i, theta in interval j

    def __post_init__(self):
        K = self.grid.K
        if len(self.pieces) != K or any(len(row) != K for row in self.pieces):
            raise ValueError("need a K x K grid of pieces")
        shapes = {p.shape for row in self.pieces for p in row}
        if len(shapes) != 1:
            raise ValueError("all pieces must share dimensions")

    @property
    def shape(self):
        return self.pieces[0][0].shape

    def __add__(self, other: "PiecewisePoly2D") -> "PiecewisePoly2D":
        _same_grid(self.grid, other.grid)
        return PiecewisePoly2D(
            self.grid, [[a + b for a, b in zip(ra, rb)] for ra, rb in zip(self.pieces, other.pieces)]
        )

    def __neg__(self):
        return self.map(lambda p: -p)

    def __sub__(self, other):
        return self + (-other)

    def map(self, fn) -> "PiecewisePoly2D":
        return PiecewisePoly2D(self.grid, [[fn(p) for p in row] for row in self.pieces])

    def assign(self, x) -> "PiecewisePoly2D":
        return self.map(lambda p: p.assign(x))

    def evaluate(self, s: float, theta: float, x=None) -> np.ndarray:
        return self.pieces[self.grid.piece_of(s)][self.grid.piece_of(theta)].evaluate(s, theta, x)


def _same_grid(a: IntervalGrid, b: IntervalGrid):
    if a != b:
        raise ValueError("piecewise polynomials live on different interval grids")


def project_onto(eqs: LinearEquations, x0) -> np.ndarray:
    """Closest point to ``x0`` satisfying ``eqs`` (dense least squares; small problems)."""
    x0 = np.asarray(x0, dtype=float).copy()
    if len(eqs) == 0:
        return x0
    A = eqs.A.toarray()
    if A.shape[1] < x0.size:
        A = np.hstack([A, np.zeros((A.shape[0], x0.size - A.shape[1]))])
    dx, *_ = np.linalg.lstsq(A, eqs.b - A @ x0, rcond=None)
    return x0 + dx
