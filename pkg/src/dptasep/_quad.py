"""Small shared quadrature helpers."""

from __future__ import annotations

import numpy as np


def circle_nodes(radius: float, M: int, phase: float = 0.0) -> np.ndarray:
    """M equispaced points on |zeta| = radius, optionally rotated."""
    ang = 2.0 * np.pi * (np.arange(M) + phase) / M
    return radius * np.exp(1j * ang)


def gauss_legendre(a: float, b: float, n: int) -> tuple:
    """Nodes and weights on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w
