"""Ground truth for delay systems: characteristic roots and simulation.

The spectrum comes from piecewise Chebyshev collocation of the solution
semigroup's generator on ``[-tau_K, 0]``, one Chebyshev mesh per delay
interval.  Candidate eigenvalues are polished by Newton's method on
``det(lambda I - A_0 - sum_i A_i exp(-lambda tau_i))`` and discarded unless
the characteristic matrix is numerically singular at the polished point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .operators import DelaySystem

RESIDUAL_TOL = 1e-6
REFINE_STEP = 8


@dataclass
class SpectrumResult:
    roots: np.ndarray  # rightmost first
    N: int
    converged: bool
    abscissa: float
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    history: list = field(default_factory=list)  # (N, abscissa) pairs tried

    def to_dict(self) -> dict:
        return {
            "abscissa": self.abscissa,
            "collocation": self.N,
            "converged": self.converged,
            "roots": [[float(z.real), float(z.imag)] for z in self.roots],
            "refinement": [[int(n), float(a)] for n, a in self.history],
        }


def cheb(N: int) -> tuple[np.ndarray, np.ndarray]:
    """Trefethen's differentiation matrix on ``cos(pi k / N)``, k = 0..N."""
    if N == 0:
        return np.zeros((1, 1)), np.ones(1)
    k = np.arange(N + 1)
    x = np.cos(np.pi * k / N)
    c = np.r_[2.0, np.ones(N - 1), 2.0] * (-1.0) ** k
    dX = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    D -= np.diag(D.sum(axis=1))
    return D, x


def collocation_matrix(sys: DelaySystem, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Discretised generator and its mesh (descending from 0 to ``-tau_K``).

    Mesh point 0 carries the delay-coupling row; every other point gets the
    derivative row of the interval lying to its left.
    """
    n, K = sys.n, sys.K
    if K == 0:
        return np.array(sys.A[0], dtype=float), np.zeros(1)
    if N < 8:
        raise ValueError("need at least 8 collocation points per interval")
    D, x = cheb(N)
    pts = [0.0]
    for lo, hi in sys.grid.intervals:
        pts.extend((hi + (lo - hi) * (1 - x[1:]) / 2).tolist())
    mesh = np.array(pts)
    size = len(mesh)
    L = np.zeros((size * n, size * n))
    L[:n, :n] = sys.A[0]
    for i in range(1, K + 1):
        j = i * N  # mesh index of -tau_i
        L[:n, j * n : (j + 1) * n] += sys.A[i]
    eye = np.eye(n)
    for i, (lo, hi) in enumerate(sys.grid.intervals):
        Di = D * (2.0 / (hi - lo))
        base = i * N  # mesh index of hi
        for r in range(1, N + 1):
            row = base + r
            L[row * n : (row + 1) * n, base * n : (base + N + 1) * n] = np.kron(Di[r], eye)
    return L, mesh


def char_matrix(sys: DelaySystem, lam: complex) -> np.ndarray:
    M = lam * np.eye(sys.n) - sys.A[0]
    for a, t in zip(sys.A[1:], sys.taus):
        M = M - a * np.exp(-lam * t)
    return M


def _char_derivative(sys: DelaySystem, lam: complex) -> np.ndarray:
    M = np.eye(sys.n, dtype=complex)
    for a, t in zip(sys.A[1:], sys.taus):
        M = M + a * t * np.exp(-lam * t)
    return M


def char_residual(sys: DelaySystem, lam: complex) -> float:
    """Smallest singular value of the characteristic matrix, relative to its scale."""
    M = char_matrix(sys, lam)
    scale = abs(lam) + sum(np.linalg.norm(a, 2) * abs(np.exp(-lam * t)) for a, t in zip(sys.A[1:], sys.taus))
    scale += np.linalg.norm(sys.A[0], 2)
    s = np.linalg.svd(M, compute_uv=False)
    return float(s[-1] / max(scale, 1.0))


def newton_root(sys: DelaySystem, lam: complex, steps: int = 20) -> complex:
    """Newton on ``det M(lambda)`` using ``det'/det = tr(M^-1 M')``."""
    for _ in range(steps):
        M = char_matrix(sys, lam)
        try:
            t = np.trace(np.linalg.solve(M, _char_derivative(sys, lam)))
        except np.linalg.LinAlgError:
            break
        if t == 0 or not np.isfinite(t):
            break
        step = 1.0 / t
        lam = lam - step
        if abs(step) <= 1e-15 * max(1.0, abs(lam)):
            break
    return complex(lam)


def _roots_at(sys: DelaySystem, N: int, keep: int) -> tuple[np.ndarray, np.ndarray]:
    L, _ = collocation_matrix(sys, N)
    ev = np.linalg.eigvals(L)
    ev = ev[np.argsort(-ev.real)]
    if sys.K == 0:
        return ev, np.zeros(len(ev))
    roots, res = [], []
    for z in ev[: max(keep * 4, 4 * sys.n)]:
        # far-left spurious seeds overflow exp(-lambda tau); they fail the checks below
        with np.errstate(over="ignore", invalid="ignore"):
            w = newton_root(sys, z)
        # a polished root must stay close to its seed and solve the equation
        if not abs(w - z) <= 1e-2 * max(1.0, abs(z)):
            continue
        try:
            r = char_residual(sys, w)
        except np.linalg.LinAlgError:
            continue
        if not r < RESIDUAL_TOL or any(abs(w - q) < 1e-8 * max(1.0, abs(w)) for q in roots):
            continue
        roots.append(w)
        res.append(r)
    order = np.argsort(-np.real(roots)) if roots else []
    return np.array(roots, dtype=complex)[order][:keep], np.array(res)[order][:keep]


def spectral_abscissa(sys: DelaySystem, N: int = 32, keep: int = 10) -> SpectrumResult:
    """Rightmost characteristic roots, refined once if ``N -> N+8`` is unstable."""
    if sys.K and N < 8:
        raise ValueError("need at least 8 collocation points per interval")
    history = []
    roots = res = None
    converged = False
    for attempt in range(2):
        r1, s1 = _roots_at(sys, N, keep)
        r2, s2 = _roots_at(sys, N + REFINE_STEP, keep)
        a1 = float(r1[0].real) if len(r1) else -math.inf
        a2 = float(r2[0].real) if len(r2) else -math.inf
        history += [(N, a1), (N + REFINE_STEP, a2)]
        roots, res = r2, s2
        if len(r1) and len(r2) and abs(a1 - a2) < 1e-6:
            converged = True
            break
        N += REFINE_STEP
    N = history[-1][0]
    abscissa = float(roots[0].real) if len(roots) else -math.inf
    return SpectrumResult(roots, N, converged, abscissa, res, history)


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray  # (len(t), n)
    decay: float  # slope of log envelope; -inf for the zero solution
    h: float

    def to_dict(self) -> dict:
        return {"T": float(self.t[-1]), "h": self.h, "decay_estimate": self.decay,
                "final_norm": float(np.linalg.norm(self.x[-1]))}


def _as_history(phi, n: int) -> Callable[[float], np.ndarray]:
    if callable(phi):
        return lambda s: np.asarray(phi(s), dtype=float).reshape(n)
    const = np.broadcast_to(np.asarray(phi, dtype=float), (n,)).copy()
    return lambda s: const


def decay_estimate(t: np.ndarray, x: np.ndarray, window: float) -> float:
    """Regression slope of the log of windowed max norms over the second half."""
    norms = np.linalg.norm(x, axis=1)
    if not np.any(norms > 0):
        return -math.inf
    edges = np.arange(0.0, t[-1] + 1e-12, window)
    if len(edges) < 5:
        edges = np.linspace(0.0, t[-1], 5)
    mids, env = [], []
    for lo, hi in zip(edges, edges[1:]):
        sel = (t >= lo) & (t <= hi)
        peak = norms[sel].max()
        if peak > 0:
            mids.append((lo + hi) / 2)
            env.append(math.log(peak))
    mids, env = np.array(mids), np.array(env)
    tail = mids >= mids[len(mids) // 2]
    if tail.sum() < 2:
        return -math.inf
    return float(np.polyfit(mids[tail], env[tail], 1)[0])


def simulate(sys: DelaySystem, phi, T: float, h: float | None = None) -> Trajectory:
    """Fixed-step RK4; delayed values come from cubic Lagrange interpolation."""
    n = sys.n
    gaps = np.diff((0.0,) + sys.taus)
    hmax = float(gaps.min()) / 4 if sys.K else T / 100
    h = hmax if h is None else float(h)
    if h <= 0 or h > hmax * (1 + 1e-12):
        raise ValueError(f"step must lie in (0, {hmax}]")
    hist = _as_history(phi, n)
    steps = int(math.ceil(T / h))
    t = np.arange(steps + 1) * h
    x = np.zeros((steps + 1, n))
    x[0] = hist(0.0)

    def delayed(s: float, upto: int) -> np.ndarray:
        if s <= 0:
            return hist(s)
        k = int(math.floor(s / h))
        k0 = min(max(k - 1, 0), upto - 3) if upto >= 3 else 0
        idx = np.arange(k0, min(k0 + 4, upto + 1))
        nodes = t[idx]
        w = np.ones(len(idx))
        for a in range(len(idx)):
            for b in range(len(idx)):
                if a != b:
                    w[a] *= (s - nodes[b]) / (nodes[a] - nodes[b])
        return w @ x[idx]

    def f(s: float, y: np.ndarray, upto: int) -> np.ndarray:
        out = sys.A[0] @ y
        for a, tau in zip(sys.A[1:], sys.taus):
            out = out + a @ delayed(s - tau, upto)
        return out

    for k in range(steps):
        s, y = t[k], x[k]
        k1 = f(s, y, k)
        k2 = f(s + h / 2, y + h / 2 * k1, k)
        k3 = f(s + h / 2, y + h / 2 * k2, k)
        k4 = f(s + h, y + h * k3, k)
        x[k + 1] = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    window = max(sys.tau_max, 1.0)
    return Trajectory(t, x, decay_estimate(t, x, window), h)
