"""Closed-curve shape cost: perimeter over the square root of enclosed area.

The boundary is the periodic cubic spline through ``n`` control points with
uniform parameterisation (segment ``i`` joins point ``i`` to point ``i+1``
over ``u in [0, 1]``).  States are flat ``(2n,)`` vectors
``(x0, y0, x1, y1, ...)``.
"""
from __future__ import annotations

import warnings
from functools import lru_cache

import numpy as np

__all__ = [
    "DegenerateShapeError",
    "SelfIntersectionWarning",
    "spline_second_derivatives",
    "spline_points",
    "surface_cost",
    "surface_cost_batch",
    "sample_star_polygon",
    "ISOPERIMETRIC_MIN",
]

ISOPERIMETRIC_MIN = 2.0 * np.sqrt(np.pi)
AREA_FLOOR = 1e-9
MAX_DENSITY = 1 << 16


class DegenerateShapeError(ValueError):
    pass


class SelfIntersectionWarning(UserWarning):
    pass


@lru_cache(maxsize=64)
def _cyclic_inverse(n):
    C = 4.0 * np.eye(n)
    idx = np.arange(n)
    C[idx, (idx + 1) % n] += 1.0
    C[idx, (idx - 1) % n] += 1.0
    inv = np.linalg.inv(C)
    inv.setflags(write=False)
    return inv


GAUSS_ORDER = 32


@lru_cache(maxsize=64)
def _gauss_nodes(q):
    """At least ``q`` nodes on ``[0, 1]``: composite Gauss-Legendre with at most 32 nodes per panel."""
    order = min(q, GAUSS_ORDER)
    panels = -(-q // order)
    u, w = np.polynomial.legendre.leggauss(order)
    u = (np.arange(panels)[:, None] + 0.5 * (u + 1.0)) / panels
    w = np.broadcast_to(0.5 * w / panels, u.shape)
    return u.ravel(), w.ravel()


def _as_points(states):
    states = np.asarray(states, dtype=np.float64)
    if states.shape[-1] % 2 or states.shape[-1] < 8:
        raise ValueError(f"surface state needs 2n entries with n >= 4, got {states.shape[-1]}")
    return states.reshape(states.shape[:-1] + (-1, 2))


def spline_second_derivatives(P):
    """Second derivatives at the knots of the closed spline, ``P`` shaped ``(..., n, 2)``."""
    rhs = 6.0 * (np.roll(P, -1, axis=-2) - 2.0 * P + np.roll(P, 1, axis=-2))
    return _cyclic_inverse(P.shape[-2]) @ rhs


def _segment_eval(P, M, u):
    """Position and first derivative on every segment at local parameters ``u``."""
    P0, P1 = P[..., :, None, :], np.roll(P, -1, axis=-2)[..., :, None, :]
    M0, M1 = M[..., :, None, :], np.roll(M, -1, axis=-2)[..., :, None, :]
    u = u[:, None]
    v = 1.0 - u
    pos = v * P0 + u * P1 + ((v ** 3 - v) * M0 + (u ** 3 - u) * M1) / 6.0
    der = P1 - P0 + ((1.0 - 3.0 * v ** 2) * M0 + (3.0 * u ** 2 - 1.0) * M1) / 6.0
    return pos, der


def spline_points(state, per_segment=16):
    """Sample the closed spline; returns ``(n * per_segment, 2)`` points."""
    P = _as_points(state)
    M = spline_second_derivatives(P)
    u = np.arange(per_segment) / per_segment
    pos, _ = _segment_eval(P, M, u)
    return pos.reshape(pos.shape[:-3] + (-1, 2))


def _spline_measures(P, density):
    n = P.shape[-2]
    q = max(3, -(-density // n))
    u, w = _gauss_nodes(q)
    M = spline_second_derivatives(P)
    pos, der = _segment_eval(P, M, u)
    speed = np.hypot(der[..., 0], der[..., 1])
    perimeter = np.sum(speed * w, axis=(-2, -1))
    cross = pos[..., 0] * der[..., 1] - pos[..., 1] * der[..., 0]
    area = 0.5 * np.sum(cross * w, axis=(-2, -1))
    return perimeter, area, der


def _polyline_measures(P):
    nxt = np.roll(P, -1, axis=-2)
    edges = nxt - P
    perimeter = np.sum(np.hypot(edges[..., 0], edges[..., 1]), axis=-1)
    area = 0.5 * np.sum(P[..., 0] * nxt[..., 1] - P[..., 1] * nxt[..., 0], axis=-1)
    return perimeter, area, edges[..., None, :]


def _turning_number(tangents):
    t = tangents.reshape(tangents.shape[:-3] + (-1, 2))
    ang = np.arctan2(t[..., 1], t[..., 0])
    dang = np.diff(np.concatenate([ang, ang[..., :1]], axis=-1), axis=-1)
    dang = (dang + np.pi) % (2.0 * np.pi) - np.pi
    return np.rint(np.sum(dang, axis=-1) / (2.0 * np.pi))


def _adaptive_spline(P, density, tol):
    """Per-shape doubling of the quadrature density until the cost moves by less than ``tol``."""
    per, area, tang = _spline_measures(P, density)
    per, area = per.copy(), area.copy()
    todo = np.arange(len(P))
    dens = density
    while todo.size and dens < MAX_DENSITY:
        dens *= 2
        chunk = max(1, (1 << 22) // (dens * 2))
        still = []
        for lo in range(0, todo.size, chunk):
            idx = todo[lo:lo + chunk]
            p2, a2, _ = _spline_measures(P[idx], dens)
            scale = np.sqrt(np.maximum(np.abs(a2), AREA_FLOOR))
            moved = np.abs(p2 - per[idx]) / scale
            per[idx], area[idx] = p2, a2
            still.append(idx[~(moved < tol)])
        todo = np.concatenate(still)
    return per, area, tang


def surface_cost_batch(states, mode="spline", density=1024, tol=1e-6, check_simple=True):
    """Vectorised cost over a batch of states ``(B, 2n)``.

    Returns ``(cost, flags)`` where degenerate shapes get ``cost = nan`` and
    ``flags`` holds ``0`` (ok), ``1`` (self-intersecting, cost still
    reported) or ``2`` (degenerate area).
    """
    P = _as_points(states)
    single = P.ndim == 2
    if single:
        P = P[None]
    if mode == "polyline":
        per, area, tang = _polyline_measures(P)
    elif mode == "spline":
        per, area, tang = _adaptive_spline(P, density, tol)
    else:
        raise ValueError(f"unknown surface evaluation mode {mode!r}")
    absarea = np.abs(area)
    degenerate = ~(absarea >= AREA_FLOOR) | ~np.isfinite(per)
    cost = np.where(degenerate, np.nan, per / np.sqrt(np.where(degenerate, 1.0, absarea)))
    flags = np.where(degenerate, 2, 0)
    if check_simple:
        wn = _turning_number(tang)
        flags = np.where(~degenerate & (np.abs(wn) != 1), 1, flags)
    if single:
        return cost[0], flags[0]
    return cost, flags


def surface_cost(state, mode="spline", density=1024, tol=1e-6) -> float:
    """Perimeter / sqrt(|area|) of one closed curve.

    Raises :class:`DegenerateShapeError` when ``|area| < 1e-9``; emits a
    :class:`SelfIntersectionWarning` when the curve's tangent does not turn
    exactly once.
    """
    cost, flag = surface_cost_batch(np.asarray(state, dtype=np.float64), mode, density, tol)
    if flag == 2:
        raise DegenerateShapeError("enclosed area below 1e-9")
    if flag == 1:
        warnings.warn("closed curve is self-intersecting; using |signed area|", SelfIntersectionWarning,
                      stacklevel=2)
    return float(cost)


def sample_star_polygon(n, rng, r_low=0.5, r_high=1.5):
    """Star-shaped polygon around the origin: sorted angles, uniform radii."""
    ang = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=n))
    r = rng.uniform(r_low, r_high, size=n)
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1).ravel()
