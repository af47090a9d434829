"""Black-box environments: a cost functional, a start sampler and trajectory queries.

An environment only ever returns scalar scores along trajectories generated
by the policy it is handed; it never exposes ``grad F``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._parallel import map_chunks
from ..hamiltonian import (
    SCORE_FORMS,
    AnalyticHamiltonian,
    EnergyScore,
    NumericalError,
    Trajectory,
    phase_point,
    rollout,
    score_energy,
    split_phase,
)
from .grid import DegenerateFieldError, fine_size, grid_cost, grid_cost_batch, grid_refine
from .surface import (
    ISOPERIMETRIC_MIN,
    DegenerateShapeError,
    SelfIntersectionWarning,
    sample_star_polygon,
    surface_cost,
    surface_cost_batch,
)

__all__ = [
    "EnvSpec",
    "Environment",
    "QueryResult",
    "ConfigError",
    "make_env",
    "sample_rho0",
    "query",
    "quadratic_cost",
    "surface_cost",
    "surface_cost_batch",
    "grid_cost",
    "grid_cost_batch",
    "grid_refine",
    "fine_size",
    "start_rng",
    "DegenerateShapeError",
    "DegenerateFieldError",
    "SelfIntersectionWarning",
    "ISOPERIMETRIC_MIN",
]

KINDS = ("surface", "grid", "quadratic")
RHO0_DEFAULTS = {
    "surface": {"r_low": 0.5, "r_high": 1.5},
    "grid": {"v_low": 0.5, "v_high": 1.5},
    "quadratic": {"scale": 1.0},
}


class ConfigError(ValueError):
    """Invalid configuration; ``fields`` names the offending entries."""

    def __init__(self, msg, fields=()):
        super().__init__(msg)
        self.fields = list(fields)


@dataclass
class EnvSpec:
    kind: str
    d_S: int
    H: int
    dt: float
    fine_factor: int = 4
    rho0: dict = field(default_factory=dict)
    seed: int = 0
    score_form: str = "legendre"
    A: np.ndarray | None = None
    surface_mode: str = "spline"
    density: int = 1024

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"env.kind must be one of {KINDS}, got {self.kind!r}", ["env.kind"])
        self.d_S, self.H, self.fine_factor = int(self.d_S), int(self.H), int(self.fine_factor)
        self.dt = float(self.dt)
        if self.H < 1:
            raise ConfigError("env.H must be >= 1", ["env.H"])
        if not self.dt >= 0:
            raise ConfigError("env.dt must be >= 0", ["env.dt"])
        if self.score_form not in SCORE_FORMS:
            raise ConfigError(f"score_form must be one of {SCORE_FORMS}", ["env.score_form"])
        self.rho0 = {**RHO0_DEFAULTS[self.kind], **(self.rho0 or {})}
        if self.kind == "surface":
            if self.d_S % 2 or self.d_S < 8:
                raise ConfigError("surface env needs d_S = 2n with n >= 4 control points", ["env.d_S"])
            if self.surface_mode not in ("spline", "polyline"):
                raise ConfigError("surface_mode must be spline or polyline", ["env.surface_mode"])
        elif self.kind == "grid":
            m = int(round(np.sqrt(self.d_S)))
            if m * m != self.d_S or m < 3:
                raise ConfigError("grid env needs d_S = m*m with m >= 3", ["env.d_S"])
            if self.fine_factor < 2:
                raise ConfigError("env.fine_factor must be >= 2", ["env.fine_factor"])
        else:
            if self.d_S < 1:
                raise ConfigError("env.d_S must be >= 1", ["env.d_S"])
            A = np.eye(self.d_S) if self.A is None else np.atleast_2d(np.asarray(self.A, dtype=np.float64))
            if A.shape != (self.d_S, self.d_S) or not np.allclose(A, A.T):
                raise ConfigError("env.A must be a symmetric d_S x d_S matrix", ["env.A"])
            if np.linalg.eigvalsh(A).min() <= 0:
                raise ConfigError("env.A must be positive definite", ["env.A"])
            self.A = A

    @property
    def phase_dim(self):
        return 2 * self.d_S

    @property
    def n_points(self):
        return self.d_S // 2

    @property
    def m(self):
        return int(round(np.sqrt(self.d_S)))


@dataclass
class QueryResult:
    """Trajectories for a batch of starts.

    ``points`` is ``(N, H, d)`` and ``scores`` ``(N, H)``; a failed trajectory
    keeps its slot, has ``nan`` scores from the failure on, and is listed in
    ``failures`` (start index -> message).
    """

    starts: np.ndarray
    points: np.ndarray
    scores: np.ndarray
    failures: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.starts)

    @property
    def trajectories(self):
        return [Trajectory(pts, sc) for pts, sc in zip(self.points, self.scores)]

    @property
    def ok(self):
        mask = np.ones(len(self.starts), dtype=bool)
        mask[list(self.failures)] = False
        return mask


def start_rng(seed, stream, index):
    """Independent generator for start ``index`` of sampling stream ``stream``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index))))


def quadratic_cost(s, A=None):
    s = np.asarray(s, dtype=np.float64)
    As = s if A is None else s @ np.asarray(A, dtype=np.float64)
    out = 0.5 * np.sum(s * As, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


class Environment:
    """Concrete environment for an :class:`EnvSpec`."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def __repr__(self):
        return f"Environment({self.spec.kind}, d_S={self.spec.d_S}, H={self.spec.H}, dt={self.spec.dt})"

    def cost(self, states):
        """``F`` over a batch of states; degenerate states give ``nan``."""
        sp = self.spec
        states = np.asarray(states, dtype=np.float64)
        if sp.kind == "surface":
            return surface_cost_batch(states, mode=sp.surface_mode, density=sp.density)[0]
        if sp.kind == "grid":
            return grid_cost_batch(states, sp.fine_factor, m=sp.m)
        return quadratic_cost(states, sp.A)

    def score(self, x):
        s, p = split_phase(np.asarray(x, dtype=np.float64))
        return score_energy(s, p, self.cost, self.spec.score_form)

    def sample_state(self, rng):
        sp = self.spec
        r = sp.rho0
        if sp.kind == "surface":
            return sample_star_polygon(sp.n_points, rng, r["r_low"], r["r_high"])
        if sp.kind == "grid":
            return rng.uniform(r["v_low"], r["v_high"], size=sp.d_S)
        return r["scale"] * rng.standard_normal(sp.d_S)

    def sample_rho0(self, rng):
        """One start ``(s_0, p_0 = 0)``."""
        return phase_point(self.sample_state(rng))

    def sample_starts(self, n, seed, stream=0):
        return np.stack([self.sample_rho0(start_rng(seed, stream, i)) for i in range(n)]) if n else \
            np.zeros((0, self.spec.phase_dim))

    def oracle(self):
        """Ground-truth score object with a ``grad`` (finite differences outside the quadratic env)."""
        if self.spec.kind == "quadratic":
            if np.allclose(self.spec.A, np.eye(self.spec.d_S)):
                return AnalyticHamiltonian("harmonic")
            return AnalyticHamiltonian("quadratic", self.spec.A)
        return EnergyScore(self.cost, self.spec.score_form)

    def query(self, policy, starts):
        """Roll every start out for ``H`` points under ``policy`` and score every point."""
        starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
        if starts.shape[-1] != self.spec.phase_dim:
            raise ValueError(f"starts have width {starts.shape[-1]}, env phase dimension is {self.spec.phase_dim}")
        H = self.spec.H
        N = len(starts)

        def run(lo, hi):
            chunk = starts[lo:hi]
            fails = {}
            try:
                pts = np.moveaxis(rollout(policy, chunk, H), 0, 1) if hi > lo else np.zeros((0, H, chunk.shape[1]))
            except NumericalError:
                pts = np.full((hi - lo, H, chunk.shape[1]), np.nan)
                for i in range(hi - lo):
                    try:
                        pts[i] = rollout(policy, chunk[i], H)
                    except NumericalError as exc:
                        fails[lo + i] = f"rollout: {exc}"
            sc = self.score(pts.reshape(-1, pts.shape[-1])).reshape(hi - lo, H) if hi > lo else np.zeros((0, H))
            for i in np.flatnonzero(~np.all(np.isfinite(sc), axis=1)):
                if lo + i not in fails:
                    j = int(np.flatnonzero(~np.isfinite(sc[i]))[0])
                    fails[lo + i] = f"cost functional failed at step {j} (degenerate state)"
                    sc[i, j:] = np.nan
            return pts, sc, fails

        parts = map_chunks(run, N)
        failures = {}
        for _, _, f in parts:
            failures.update(f)
        return QueryResult(
            starts=starts,
            points=np.concatenate([p for p, _, _ in parts]) if parts else np.zeros((0, H, starts.shape[1])),
            scores=np.concatenate([s for _, s, _ in parts]) if parts else np.zeros((0, H)),
            failures=dict(sorted(failures.items())),
        )


def make_env(spec: EnvSpec) -> Environment:
    return Environment(spec)


def sample_rho0(spec: EnvSpec, rng):
    return Environment(spec).sample_rho0(rng)


def query(spec: EnvSpec, policy, starts) -> QueryResult:
    return Environment(spec).query(policy, starts)
