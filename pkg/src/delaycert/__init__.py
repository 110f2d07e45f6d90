"""Dual Lyapunov-Krasovskii stability certificates for linear multi-delay systems."""

__version__ = "0.1.0"
