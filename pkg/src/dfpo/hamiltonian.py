"""Phase space, the symplectic structure and the explicit-Euler dual dynamics.

A phase point is a flat array ``x = (s, p)`` with ``len(s) == len(p)``.  All
functions accept a single point ``(d,)`` or a batch ``(..., d)``.

The dynamics operator built from a score ``g`` is::

    G(x) = x + dt * S @ grad g(x),    S = [[0, I], [-I, 0]]

so with ``g(s, p) = 0.5 |p|^2 + F(s)`` one step reads ``s' = s + dt p``,
``p' = p - dt grad F(s)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "NumericalError",
    "phase_point",
    "split_phase",
    "symplectic_apply",
    "DynamicsOperator",
    "Trajectory",
    "step",
    "rollout",
    "score_energy",
    "EnergyScore",
    "AnalyticHamiltonian",
    "analytic_flow",
    "euler_matrix",
    "SCORE_FORMS",
]

SCORE_FORMS = ("legendre", "paper_printed")


class NumericalError(ArithmeticError):
    """A non-finite gradient or state appeared during a rollout."""

    def __init__(self, msg, index=None, point=None):
        super().__init__(msg)
        self.index = index
        self.point = point


def phase_point(s, p=None):
    s = np.asarray(s, dtype=np.float64)
    p = np.zeros_like(s) if p is None else np.asarray(p, dtype=np.float64)
    if s.shape != p.shape:
        raise ValueError(f"state shape {s.shape} != adjoint shape {p.shape}")
    return np.concatenate([s, p], axis=-1)


def split_phase(x):
    x = np.asarray(x)
    if x.shape[-1] % 2:
        raise ValueError(f"phase dimension {x.shape[-1]} is odd")
    half = x.shape[-1] // 2
    return x[..., :half], x[..., half:]


def symplectic_apply(grad):
    """Multiply by ``S``: ``(dg/ds, dg/dp) -> (dg/dp, -dg/ds)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape[-1] % 2:
        raise ValueError(f"phase dimension {grad.shape[-1]} is odd")
    half = grad.shape[-1] // 2
    return np.concatenate([grad[..., half:], -grad[..., :half]], axis=-1)


@dataclass
class Trajectory:
    """``H`` phase points and the environment score at each of them."""

    points: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if len(self.points) != len(self.scores):
            raise ValueError("points and scores must have equal length")

    def __len__(self):
        return len(self.points)


@dataclass
class DynamicsOperator:
    """``G = Id + dt * S grad(score)``.

    ``score`` is anything with a ``grad(x)`` method accepting batches: a
    :class:`~dfpo.diffcore.ScoreNet`, an :class:`AnalyticHamiltonian` or an
    :class:`EnergyScore`.
    """

    dt: float
    score: object

    def __post_init__(self):
        if not self.dt >= 0:
            raise ValueError("dt must be nonnegative")

    def __call__(self, x):
        return step(self, x)


def step(op: DynamicsOperator, x):
    x = np.asarray(x, dtype=np.float64)
    if op.dt == 0:
        return x.copy()
    g = np.asarray(op.score.grad(x), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.all(np.isfinite(np.atleast_2d(g)), axis=-1)).ravel()
        pt = np.atleast_2d(x)[bad[0]] if bad.size else x
        raise NumericalError(f"non-finite score gradient at {pt}", index=bad, point=pt)
    return x + op.dt * symplectic_apply(g)


def rollout(op: DynamicsOperator, x0, H: int):
    """Return ``[x0, G(x0), ..., G^(H-1)(x0)]`` stacked on a new leading axis."""
    if H < 1:
        raise ValueError("H must be at least 1")
    x = np.asarray(x0, dtype=np.float64)
    out = np.empty((H,) + x.shape)
    out[0] = x
    for j in range(1, H):
        try:
            x = step(op, x)
        except NumericalError as exc:
            raise NumericalError(f"step {j}: {exc}", index=j, point=exc.point) from exc
        out[j] = x
    return out


def score_energy(s, p, F: Callable, mode="legendre"):
    """Score ``g(s, p)`` for the energy-regularised reward ``0.5|a|^2 - F(s)``.

    ``legendre``: ``0.5|p|^2 + F(s)``.  ``paper_printed``: ``0.5|p|^2 - r(s, p)``,
    which collapses to ``F(s)`` and makes ``dg/dp`` vanish.
    """
    p = np.asarray(p, dtype=np.float64)
    f = np.asarray(F(s), dtype=np.float64)
    if mode == "legendre":
        out = 0.5 * np.sum(p * p, axis=-1) + f
    elif mode == "paper_printed":
        out = f + 0.0 * np.sum(p * p, axis=-1)
    else:
        raise ValueError(f"unknown score form {mode!r}")
    return float(out) if np.ndim(out) == 0 else out


class EnergyScore:
    """True environment score with a finite-difference state gradient.

    Only diagnostic oracles use :meth:`grad`; the learned operator never
    needs ``grad F``.  ``F`` must accept a batch of states ``(B, d_S)``.
    """

    def __init__(self, F, mode="legendre", h=1e-4):
        self.F = F
        self.mode = mode
        self.h = h

    def value(self, x):
        s, p = split_phase(x)
        return score_energy(s, p, self.F, self.mode)

    def grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        xb = np.atleast_2d(x)
        s, p = split_phase(xb)
        n, ds = s.shape
        eye = np.eye(ds) * self.h
        plus = (s[:, None, :] + eye).reshape(-1, ds)
        minus = (s[:, None, :] - eye).reshape(-1, ds)
        gs = (np.asarray(self.F(plus)) - np.asarray(self.F(minus))).reshape(n, ds) / (2 * self.h)
        gp = p if self.mode == "legendre" else np.zeros_like(p)
        g = np.concatenate([gs, gp], axis=-1)
        return g[0] if x.ndim == 1 else g


class AnalyticHamiltonian:
    """``h(s, p) = 0.5|p|^2 + 0.5 s^T A s`` with closed-form value, gradient and flow.

    ``kind`` is ``"free"`` (``A = 0``), ``"harmonic"`` (``A = I``) or
    ``"quadratic"`` (any symmetric positive semidefinite ``A``).
    """

    KINDS = ("free", "harmonic", "quadratic")

    def __init__(self, kind="harmonic", A=None, dim=None):
        if kind not in self.KINDS:
            raise ValueError(f"unsupported Hamiltonian kind {kind!r}")
        self.kind = kind
        if kind == "quadratic":
            if A is None:
                raise ValueError("quadratic kind needs a matrix A")
            A = np.atleast_2d(np.asarray(A, dtype=np.float64))
            if A.shape[0] != A.shape[1] or not np.allclose(A, A.T):
                raise ValueError("A must be a symmetric square matrix")
            w, V = np.linalg.eigh(A)
            if w.min() < -1e-12:
                raise ValueError("A must be positive semidefinite")
            self._eig = (np.clip(w, 0.0, None), V)
        self.A = A
        self.dim = dim

    def _As(self, s):
        if self.kind == "free":
            return np.zeros_like(s)
        if self.kind == "harmonic":
            return s
        return s @ self.A

    def potential(self, s):
        s = np.asarray(s, dtype=np.float64)
        return 0.5 * np.sum(s * self._As(s), axis=-1)

    def value(self, x):
        s, p = split_phase(np.asarray(x, dtype=np.float64))
        out = 0.5 * np.sum(p * p, axis=-1) + self.potential(s)
        return float(out) if np.ndim(out) == 0 else out

    def grad(self, x):
        s, p = split_phase(np.asarray(x, dtype=np.float64))
        return np.concatenate([self._As(s), p], axis=-1)

    __call__ = value

    def flow(self, x0, t):
        """Exact solution of ``s' = p, p' = -A s`` at time ``t``."""
        s, p = split_phase(np.asarray(x0, dtype=np.float64))
        if self.kind == "free":
            return np.concatenate([s + t * p, p], axis=-1)
        if self.kind == "harmonic":
            c, sn = np.cos(t), np.sin(t)
            return np.concatenate([c * s + sn * p, -sn * s + c * p], axis=-1)
        w, V = self._eig
        a, b = s @ V, p @ V
        om = np.sqrt(w)
        c = np.cos(om * t)
        # sin(om t)/om, with the om -> 0 limit t
        sinc = np.where(om > 0, np.sin(om * t) / np.where(om > 0, om, 1.0), t)
        a_t = c * a + sinc * b
        b_t = -om * om * sinc * a + c * b
        return np.concatenate([a_t @ V.T, b_t @ V.T], axis=-1)


def analytic_flow(kind: AnalyticHamiltonian, x0, t):
    return kind.flow(x0, t)


def euler_matrix(dt, A=None, dim=1):
    """One explicit-Euler step of the quadratic system as a matrix on ``(s, p)``."""
    A = np.eye(dim) if A is None else np.atleast_2d(np.asarray(A, dtype=np.float64))
    n = A.shape[0]
    M = np.eye(2 * n)
    M[:n, n:] += dt * np.eye(n)
    M[n:, :n] -= dt * A
    return M
