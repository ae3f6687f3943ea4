"""Second-order finite-difference helpers shared by the solver and recovery."""

from __future__ import annotations

import numpy as np


def gradient(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Centered first derivative, one-sided second order at the ends."""
    return np.gradient(values, h, axis=axis, edge_order=2)


def second_diff(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second derivative along `axis`; one-sided 4-point stencil at the ends."""
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = v[2:] - 2.0 * v[1:-1] + v[:-2]
    out[0] = 2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]
    out[-1] = 2.0 * v[-1] - 5.0 * v[-2] + 4.0 * v[-3] - v[-4]
    return np.moveaxis(out, 0, axis) / (h * h)


def laplacian(values: np.ndarray, h: float) -> np.ndarray:
    """Sum of the three axis second derivatives."""
    return (
        second_diff(values, h, 0)
        + second_diff(values, h, 1)
        + second_diff(values, h, 2)
    )
