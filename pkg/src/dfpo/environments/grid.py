"""Coarse-grid control with a fine-grid total-variation cost.

The coarse field lives on ``m x m`` nodes spanning the unit square (axis 0 is
``x``, axis 1 is ``y``).  Refinement is the tensor-product cubic spline
(not-a-knot ends) evaluated on ``N = (m - 1) * ff + 1`` nodes per axis, so
coarse node ``k`` coincides with fine node ``k * ff``.

The cost is ``int |grad f| / sqrt(int max(f, 0))`` with node gradients from
central differences (one-sided on the boundary) and each fine cell weighted
by the mean of its four corners, i.e. the 2-D trapezoidal rule.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "DegenerateFieldError",
    "fine_size",
    "refine_matrix",
    "grid_refine",
    "grid_cost",
    "grid_cost_batch",
    "POSITIVITY_FLOOR",
]

POSITIVITY_FLOOR = 1e-6


class DegenerateFieldError(ValueError):
    pass


def fine_size(m, fine_factor):
    return (m - 1) * fine_factor + 1


@lru_cache(maxsize=32)
def refine_matrix(m, fine_factor):
    """``(N, m)`` matrix mapping coarse nodal values to the 1-D cubic interpolant on the fine nodes."""
    if m < 3:
        raise ValueError("coarse grid needs m >= 3")
    if fine_factor < 2:
        raise ValueError("fine_factor must be >= 2")
    xc = np.linspace(0.0, 1.0, m)
    xf = np.linspace(0.0, 1.0, fine_size(m, fine_factor))
    B = CubicSpline(xc, np.eye(m), bc_type="not-a-knot")(xf)
    # exact reproduction at coincident nodes
    B[::fine_factor] = np.eye(m)
    B.setflags(write=False)
    return B


def _as_grid(state, m=None):
    c = np.asarray(state, dtype=np.float64)
    if m is not None:
        return c.reshape(c.shape[:-1] + (m, m))
    if c.ndim >= 2 and c.shape[-1] == c.shape[-2] and c.shape[-1] >= 3:
        return c
    m = int(round(np.sqrt(c.shape[-1])))
    if m * m != c.shape[-1] or m < 3:
        raise ValueError(f"grid state of length {c.shape[-1]} is not an m*m field with m >= 3")
    return c.reshape(c.shape[:-1] + (m, m))


def grid_refine(state, fine_factor=4, m=None):
    """Bicubic refinement of an ``(m, m)`` field, or a batch of them.

    Pass ``m`` when the input is flat ``(..., m*m)``.
    """
    c = _as_grid(state, m)
    B = refine_matrix(c.shape[-1], int(fine_factor))
    return B @ c @ B.T


def _trapezoid_weights(N):
    w = np.ones(N)
    w[0] = w[-1] = 0.5
    h = 1.0 / (N - 1)
    return np.outer(w, w) * h * h


def grid_cost_batch(states, fine_factor=4, m=None):
    """Cost for a batch of fields; fields whose positive mass is at the floor give ``nan``."""
    fine = grid_refine(states, fine_factor, m)
    N = fine.shape[-1]
    h = 1.0 / (N - 1)
    gx, gy = np.gradient(fine, h, axis=(-2, -1))
    W = _trapezoid_weights(N)
    num = np.sum(np.hypot(gx, gy) * W, axis=(-2, -1))
    den = np.sum(np.maximum(fine, 0.0) * W, axis=(-2, -1))
    ok = den > POSITIVITY_FLOOR
    return np.where(ok, num / np.sqrt(np.where(ok, den, 1.0)), np.nan)


def grid_cost(state, fine_factor=4) -> float:
    """Total variation of the refined field over the square root of its (clamped) integral."""
    c = _as_grid(state)
    if c.ndim != 2:
        raise ValueError("grid_cost takes a single field; use grid_cost_batch for batches")
    val = grid_cost_batch(c, fine_factor)
    if not np.isfinite(val):
        raise DegenerateFieldError(f"integral of the refined field is below {POSITIVITY_FLOOR}")
    return float(val)
