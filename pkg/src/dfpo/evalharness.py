"""Measurements: terminal cost, pointwise operator error, empirical regret, integrator checks.

Exports are CSV (fixed columns, 17 significant digits) or JSON.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .environments import Environment
from .hamiltonian import AnalyticHamiltonian, DynamicsOperator, euler_matrix, rollout, split_phase, step

__all__ = [
    "EvalReport",
    "RegretCurve",
    "UnsupportedEnvironment",
    "EVAL_STREAM",
    "eval_terminal",
    "pointwise_error",
    "pointwise_error_stats",
    "optimal_value",
    "policy_value",
    "regret_estimate",
    "regret_from_gaps",
    "fit_exponent",
    "integrator_order",
    "energy_drift",
    "export_report",
    "import_report",
]

EVAL_STREAM = 1_000_003
POINTWISE_STREAM = 1_000_033
REPORT_COLUMNS = ("episode", "terminal_cost", "seed")
REGRET_COLUMNS = ("episode", "gap", "cum_regret")


class UnsupportedEnvironment(ValueError):
    pass


def _fmt(v):
    return "%.17g" % v


@dataclass
class EvalReport:
    terminal_costs: list
    seed: int
    step_costs: list = field(default_factory=list)
    n_failed: int = 0

    @property
    def finite_costs(self):
        c = np.asarray(self.terminal_costs, dtype=np.float64)
        return c[np.isfinite(c)]

    @property
    def mean(self):
        c = self.finite_costs
        return float(np.mean(c)) if c.size else math.nan

    @property
    def std(self):
        c = self.finite_costs
        return float(np.std(c)) if c.size else math.nan

    def to_dict(self):
        d = asdict(self)
        d.update(mean=self.mean, std=self.std)
        return d


@dataclass
class RegretCurve:
    gaps: list
    n_clipped: int = 0
    window: float = 0.5

    @property
    def cumulative(self):
        return np.cumsum(np.asarray(self.gaps, dtype=np.float64)).tolist()

    @property
    def zero_regret(self):
        return not np.any(np.asarray(self.gaps) > 0)

    @property
    def exponent(self):
        if self.zero_regret:
            return math.nan
        return fit_exponent(self.cumulative, self.window)

    def to_dict(self):
        d = asdict(self)
        d.update(cumulative=self.cumulative, exponent=self.exponent, zero_regret=self.zero_regret)
        return d


def eval_terminal(policy: DynamicsOperator, env: Environment, n_episodes=200, seed=0) -> EvalReport:
    """Roll ``n_episodes`` fresh starts for ``H`` points and record ``F`` at the last one."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    starts = env.sample_starts(n_episodes, seed, stream=EVAL_STREAM)
    res = env.query(policy, starts)
    H = env.spec.H
    states = split_phase(res.points.reshape(-1, res.points.shape[-1]))[0]
    F = np.asarray(env.cost(states), dtype=np.float64).reshape(n_episodes, H)
    bad = ~res.ok
    F[bad] = np.nan
    with np.errstate(all="ignore"):
        curve = np.nanmean(F[~bad], axis=0) if (~bad).any() else np.full(H, np.nan)
    return EvalReport(F[:, -1].tolist(), int(seed), curve.tolist(), int(bad.sum()))


def _standard_starts(dim, n, seed):
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(POINTWISE_STREAM,)))
    return rng.standard_normal((n, 2 * dim))


def pointwise_error_stats(policy: DynamicsOperator, oracle, j, n=500, seed=0, env: Environment | None = None):
    """Mean and standard error of ``|policy^(j)(X) - G^(j)(X)|`` with ``G`` the oracle's Euler map.

    Starts are drawn from ``env``'s start distribution when given, otherwise
    standard normal over the whole phase space.
    """
    if j < 1:
        raise ValueError("j must be >= 1")
    dim = policy.score.input_dim // 2 if hasattr(policy.score, "input_dim") else None
    if env is not None:
        X = env.sample_starts(n, seed, stream=POINTWISE_STREAM)
    else:
        if dim is None:
            raise ValueError("pass env= when the policy dimension cannot be inferred")
        X = _standard_starts(dim, n, seed)
    exact = DynamicsOperator(policy.dt, oracle)
    a = rollout(policy, X, j + 1)[-1]
    b = rollout(exact, X, j + 1)[-1]
    err = np.linalg.norm(a - b, axis=-1)
    return float(err.mean()), float(err.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def pointwise_error(policy: DynamicsOperator, oracle, j, n=500, seed=0, env: Environment | None = None) -> float:
    return pointwise_error_stats(policy, oracle, j, n, seed, env)[0]


def _reward(x, F):
    s, p = split_phase(x)
    return 0.5 * np.sum(p * p, axis=-1) - F(s)


def optimal_value(oracle: AnalyticHamiltonian, starts, H, dt, refine=100):
    """Left Riemann sum of the reward along the exact flow over ``[0, H dt)`` at step ``dt/refine``."""
    starts = np.atleast_2d(starts)
    h = dt / refine
    total = np.zeros(len(starts))
    for i in range(H * refine):
        total += _reward(oracle.flow(starts, i * h), oracle.potential)
    return total * h


def policy_value(op: DynamicsOperator, starts, H, F):
    traj = rollout(op, np.atleast_2d(starts), H)
    return np.sum(_reward(traj, F), axis=0) * op.dt


def fit_exponent(cumulative, window=0.5):
    """Slope of ``log cum`` against ``log K`` over the last ``window`` fraction of episodes."""
    c = np.asarray(cumulative, dtype=np.float64)
    K = np.arange(1, len(c) + 1)
    lo = int(len(c) * (1.0 - window))
    sel = slice(lo, None)
    k, v = K[sel], c[sel]
    keep = v > 0
    if keep.sum() < 2:
        return math.nan
    slope, _ = np.polyfit(np.log(k[keep]), np.log(v[keep]), 1)
    return float(slope)


def regret_from_gaps(gaps, window=0.5) -> RegretCurve:
    g = np.asarray(gaps, dtype=np.float64)
    clipped = g < 0
    return RegretCurve(np.where(clipped, 0.0, g).tolist(), int(clipped.sum()), window)


def regret_estimate(history, env: Environment, refine=100, window=0.5) -> RegretCurve:
    """Per-episode optimality gap ``V(s) - V_pi(s)`` using the snapshot active at each episode.

    Only the quadratic environment has an oracle value; negative gaps are
    floored at zero and counted.
    """
    if env.spec.kind != "quadratic":
        raise UnsupportedEnvironment("regret needs an oracle value function (quadratic environment only)")
    oracle = env.oracle()
    H, dt = env.spec.H, env.spec.dt
    stages = np.asarray(history.episode_stage)
    starts = np.asarray(history.episode_starts)
    gaps = np.empty(len(stages))
    for k in np.unique(stages):
        sel = stages == k
        v_opt = optimal_value(oracle, starts[sel], H, dt, refine)
        v_pi = policy_value(DynamicsOperator(dt, history.snapshots[int(k)]), starts[sel], H, oracle.potential)
        gaps[sel] = v_opt - v_pi
    return regret_from_gaps(gaps, window)


def integrator_order(dt0=0.01, halvings=3, x0=(1.0, 0.0)):
    """One-step error of the Euler operator against the exact harmonic flow, and per-halving ratios."""
    osc = AnalyticHamiltonian("harmonic")
    x0 = np.asarray(x0, dtype=np.float64)
    errs = []
    dt = dt0
    for _ in range(halvings + 1):
        errs.append(float(np.linalg.norm(step(DynamicsOperator(dt, osc), x0) - osc.flow(x0, dt))))
        dt /= 2
    ratios = [a / b for a, b in zip(errs[:-1], errs[1:])]
    return errs, ratios


def energy_drift(dt=0.01, H=20, x0=(1.0, 0.0)):
    """Max relative change of the harmonic energy along an ``H``-point Euler rollout."""
    osc = AnalyticHamiltonian("harmonic")
    traj = rollout(DynamicsOperator(dt, osc), np.asarray(x0, dtype=np.float64), H)
    e = osc.value(traj)
    return float(np.max(np.abs(e - e[0]) / e[0]))


def euler_power_check(dt=0.01, n_max=20, x0=(1.0, 0.0)):
    """Max deviation between an Euler rollout and powers of the Euler matrix."""
    osc = AnalyticHamiltonian("harmonic")
    x0 = np.asarray(x0, dtype=np.float64)
    traj = rollout(DynamicsOperator(dt, osc), x0, n_max + 1)
    M = euler_matrix(dt, dim=len(x0) // 2)
    ref = np.stack([np.linalg.matrix_power(M, n) @ x0 for n in range(n_max + 1)])
    return float(np.max(np.abs(traj - ref)))


def export_report(obj, path, fmt="CSV"):
    """Write an :class:`EvalReport` or :class:`RegretCurve` as CSV or JSON."""
    path = Path(path)
    fmt = fmt.upper()
    try:
        if fmt == "JSON":
            path.write_text(json.dumps({"type": type(obj).__name__, **obj.to_dict()}, indent=2, allow_nan=True))
            return
        if fmt != "CSV":
            raise ValueError(f"unknown export format {fmt!r}")
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if isinstance(obj, EvalReport):
                w.writerow(REPORT_COLUMNS)
                for i, c in enumerate(obj.terminal_costs):
                    w.writerow([i, _fmt(c), obj.seed])
            elif isinstance(obj, RegretCurve):
                w.writerow(REGRET_COLUMNS)
                for i, (g, c) in enumerate(zip(obj.gaps, obj.cumulative)):
                    w.writerow([i, _fmt(g), _fmt(c)])
            else:
                raise TypeError(f"cannot export {type(obj).__name__}")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def import_report(path, fmt="CSV"):
    path = Path(path)
    fmt = fmt.upper()
    if fmt == "JSON":
        d = json.loads(path.read_text())
        kind = d.pop("type")
        if kind == "EvalReport":
            return EvalReport(d["terminal_costs"], d["seed"], d.get("step_costs", []), d.get("n_failed", 0))
        return RegretCurve(d["gaps"], d.get("n_clipped", 0), d.get("window", 0.5))
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = tuple(rows[0])
    body = rows[1:]
    if header == REPORT_COLUMNS:
        costs = [float(r[1]) for r in body]
        seed = int(body[0][2]) if body else 0
        return EvalReport(costs, seed, [], int(sum(1 for c in costs if not math.isfinite(c))))
    if header == REGRET_COLUMNS:
        return RegretCurve([float(r[1]) for r in body])
    raise ValueError(f"{path}: unrecognised CSV header {header}")
