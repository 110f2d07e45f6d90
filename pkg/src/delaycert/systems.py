"""Benchmark systems and their one-parameter families."""
from __future__ import annotations

import numpy as np

from .dual_lmi import ParameterizedFamily
from .operators import DelaySystem


def example_a(tau: float = 1.0) -> DelaySystem:
    """``x' = -x(t - tau)``, stable exactly for ``tau < pi/2``."""
    return DelaySystem([[[0.0]], [[-1.0]]], [tau])


def example_b(tau: float = 1.0) -> DelaySystem:
    return DelaySystem([[[0.0, 1.0], [-2.0, 0.1]], [[0.0, 0.0], [1.0, 0.0]]], [tau])


def example_c(b: float = 0.0, a: float = -2.0, c: float = -1.0) -> DelaySystem:
    """Scalar, delays 1 and 2; with ``a=-2, c=-1`` stable for ``b < 3``."""
    return DelaySystem([[[a]], [[b]], [[c]]], [1.0, 2.0])


def example_d(tau: float = 1.0) -> DelaySystem:
    """Delays ``tau/2`` and ``tau``."""
    return DelaySystem(
        [[[0.0, 1.0], [-1.0, 0.1]], [[0.0, 0.0], [-1.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]],
        [tau / 2, tau],
    )


def family_a() -> ParameterizedFamily:
    return ParameterizedFamily(example_a(1.0), "delay-scale", name="tau")


def family_b() -> ParameterizedFamily:
    return ParameterizedFamily(example_b(1.0), "delay-scale", name="tau")


def family_c() -> ParameterizedFamily:
    direction = [np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 1))]
    return ParameterizedFamily(example_c(0.0), "matrix", direction=direction, name="b")


def family_d() -> ParameterizedFamily:
    return ParameterizedFamily(example_d(1.0), "delay-scale", name="tau")


BENCHMARKS = {
    "A": (example_a, family_a),
    "B": (example_b, family_b),
    "C": (example_c, family_c),
    "D": (example_d, family_d),
}
