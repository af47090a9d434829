"""Stage-wise differential policy optimisation.

Stage ``k`` (``1 <= k <= H-1``) rolls ``N_k`` fresh starts out under the
previous operator, stores the true score at trajectory position ``k-1`` and
the previous network's own predictions at positions ``1..k-2``, then refits
the score network on the whole replay memory with the smooth-L1 loss.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    BOOTSTRAPPED,
    TRUE_SCORE,
    LabeledSample,
    OptimizerState,
    ScoreNet,
    batch_loss,
    forward,
    grad_params,
    opt_step,
)
from .environments import ConfigError, Environment, EnvSpec
from .hamiltonian import DynamicsOperator

log = logging.getLogger(__name__)

__all__ = [
    "StageSchedule",
    "ReplayMemory",
    "NetConfig",
    "OptConfig",
    "StageRecord",
    "TrainHistory",
    "StageError",
    "make_schedule",
    "expected_memory_size",
    "init_net",
    "policy",
    "run_stage",
    "train",
    "audit_memory",
]

SCHEDULE_MODES = ("budget", "theory_general", "theory_special")
THEORY_CAP = 10 ** 6


class StageError(RuntimeError):
    def __init__(self, stage, msg):
        super().__init__(f"stage {stage}: {msg}")
        self.stage = stage


@dataclass
class StageSchedule:
    """Per-stage sample counts ``N[k-1]`` and confidence levels ``delta[k-1]`` for ``k = 1..H-1``."""

    N: list
    delta: list
    mode: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.N) != len(self.delta) or not self.N:
            raise ConfigError("schedule needs one N and one delta per stage", ["schedule"])
        if any(int(n) < 1 for n in self.N):
            raise ConfigError("every N_k must be >= 1", ["schedule.N"])
        self.N = [int(n) for n in self.N]

    @property
    def H(self):
        return len(self.N) + 1

    @property
    def total_episodes(self):
        return sum(self.N)


def make_schedule(mode, H, total=None, eps=None, delta=0.05, d=None, C=1.0, cap=THEORY_CAP):
    """Build a :class:`StageSchedule`.

    ``budget``: ``N_k = ceil(total / (H-1))``.  ``theory_general``:
    ``N_k = ceil(C eps^-(2d+4))``.  ``theory_special``: ``N_k = ceil(C eps^-6)``.
    Theory counts above ``cap`` are clipped with a warning.  In every mode
    ``delta_k = delta / 3^(H-k)``.
    """
    H = int(H)
    if H < 2:
        raise ConfigError("H must be >= 2 for at least one stage", ["env.H"])
    if mode not in SCHEDULE_MODES:
        raise ConfigError(f"schedule.mode must be one of {SCHEDULE_MODES}", ["schedule.mode"])
    deltas = [delta / 3.0 ** (H - k) for k in range(1, H)]
    params = {"delta": delta}
    if mode == "budget":
        if total is None or int(total) < H - 1:
            raise ConfigError(f"budget of {total} episodes is below H-1 = {H - 1}", ["schedule.total"])
        n = math.ceil(int(total) / (H - 1))
        params["total"] = int(total)
    else:
        if eps is None or not 0 < eps:
            raise ConfigError("theory schedules need eps > 0", ["schedule.eps"])
        if mode == "theory_general":
            if d is None:
                raise ConfigError("theory_general needs the phase dimension d", ["schedule.d"])
            power = 2 * int(d) + 4
        else:
            power = 6
        # log-space so astronomically large counts do not overflow
        log_n = math.log(C) - power * math.log(eps)
        if log_n > math.log(cap):
            warnings.warn(f"{mode}: N_k = {C} * eps^-{power} exceeds the cap {cap}; clipping", RuntimeWarning,
                          stacklevel=2)
            n = int(cap)
        else:
            n = math.ceil(C * eps ** (-power) - 1e-9)
        params.update(eps=eps, C=C, power=power)
    return StageSchedule([n] * (H - 1), deltas, mode, params)


def expected_memory_size(N, k):
    """Closed-form replay-memory size after stage ``k``: ``sum_j N_j max(1, j-1)``."""
    return sum(N[j - 1] * max(1, j - 1) for j in range(1, k + 1))


class ReplayMemory:
    """Append-only labelled samples with a per-stage index.

    :meth:`append_stage` either adds a whole stage block or nothing.
    """

    def __init__(self, dim):
        self.dim = int(dim)
        self._blocks = []  # (stage, x, y, provenance)
        self.stage_index = {}
        self._cache = None

    def __len__(self):
        return sum(len(b[2]) for b in self._blocks)

    def append_stage(self, stage, x, y, provenance):
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        provenance = np.asarray(provenance, dtype=np.int8).reshape(-1)
        if not (len(x) == len(y) == len(provenance)):
            raise ValueError("x, y and provenance lengths differ")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise ValueError("non-finite sample")
        if stage in self.stage_index:
            raise ValueError(f"stage {stage} already stored")
        start = len(self)
        self._blocks.append((int(stage), x.copy(), y.copy(), provenance.copy()))
        self.stage_index[int(stage)] = (start, start + len(y))
        self._cache = None

    def _arrays(self):
        if self._cache is None:
            if not self._blocks:
                self._cache = (np.zeros((0, self.dim)), np.zeros(0), np.zeros(0, np.int8), np.zeros(0, int))
            else:
                self._cache = (
                    np.concatenate([b[1] for b in self._blocks]),
                    np.concatenate([b[2] for b in self._blocks]),
                    np.concatenate([b[3] for b in self._blocks]),
                    np.concatenate([np.full(len(b[2]), b[0]) for b in self._blocks]),
                )
        return self._cache

    @property
    def x(self):
        return self._arrays()[0]

    @property
    def y(self):
        return self._arrays()[1]

    @property
    def provenance(self):
        return self._arrays()[2]

    @property
    def stage(self):
        return self._arrays()[3]

    def samples(self):
        x, y, prov, st = self._arrays()
        return [LabeledSample(x[i], float(y[i]), int(st[i]), int(prov[i])) for i in range(len(y))]


@dataclass
class NetConfig:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    init_scale: float = 1e-2
    bound: float | None = None


@dataclass
class OptConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    plateau: float = 1e-6
    beta: float = 1.0
    warm_start: bool = True


@dataclass
class StageRecord:
    stage: int
    n_starts: int
    n_failed: int
    memory_size: int
    epoch_losses: list
    true_loss_before: float
    true_loss_after: float
    seconds: float


@dataclass
class TrainHistory:
    """Everything measured during a run.

    ``snapshots[k]`` is the network that generated stage ``k``'s episodes,
    so episode ``e`` ran under ``snapshots[episode_stage[e]]``.
    """

    stages: list = field(default_factory=list)
    episode_stage: list = field(default_factory=list)
    episode_starts: list = field(default_factory=list)
    terminal_scores: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def memory_sizes(self):
        return [s.memory_size for s in self.stages]

    @property
    def loss_curves(self):
        return [s.epoch_losses for s in self.stages]

    @property
    def n_episodes(self):
        return len(self.episode_stage)


def init_net(dim, cfg: NetConfig, rng):
    return ScoreNet.init([dim, *cfg.hidden, 1], rng, activation=cfg.activation, output_scale=cfg.init_scale,
                         bound=cfg.bound)


def policy(net, dt):
    """``G = Id + dt S grad g`` for a score network."""
    return DynamicsOperator(dt, net)


def _fit(net, memory, cfg: OptConfig, rng):
    x, y = memory.x, memory.y
    state = OptimizerState.for_net(net, cfg.learning_rate, cfg.batch_size)
    losses = []
    n = len(y)
    bs = cfg.batch_size
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            grads, loss = grad_params(net, x[idx], y[idx], cfg.beta, return_loss=True)
            opt_step(net, state, grads)
            total += loss * len(idx)
        losses.append(total / n)
        if len(losses) > 1 and abs(losses[-2] - losses[-1]) < cfg.plateau:
            break
    return losses


def run_stage(k, prev_net, memory: ReplayMemory, env: Environment, schedule: StageSchedule, rng, opt_cfg=None,
              seed=0, history: TrainHistory | None = None):
    """Execute stage ``k``; returns the new score network."""
    opt_cfg = opt_cfg or OptConfig()
    spec = env.spec
    H = spec.H
    if not 1 <= k <= H - 1:
        raise StageError(k, f"stage index outside 1..{H - 1}")
    t0 = time.perf_counter()
    starts = env.sample_starts(schedule.N[k - 1], seed, stream=k)
    try:
        result = env.query(policy(prev_net, spec.dt), starts)
    except Exception as exc:
        raise StageError(k, f"environment query failed: {exc}") from exc
    ok = result.ok
    if result.failures:
        log.warning("stage %d: %d of %d trajectories failed", k, len(result.failures), len(starts))
    pts = result.points[ok]
    xs = [pts[:, k - 1]]
    ys = [result.scores[ok, k - 1]]
    prov = [np.full(len(pts), TRUE_SCORE)]
    for j in range(1, k - 1):
        xs.append(pts[:, j])
        ys.append(forward(prev_net, pts[:, j]))
        prov.append(np.full(len(pts), BOOTSTRAPPED))
    memory.append_stage(k, np.concatenate(xs), np.concatenate(ys), np.concatenate(prov))

    net = prev_net.copy() if opt_cfg.warm_start else ScoreNet.init(prev_net.layer_widths, rng, prev_net.activation)
    true_mask = memory.provenance == TRUE_SCORE
    before = batch_loss(net, memory.x[true_mask], memory.y[true_mask], opt_cfg.beta)
    losses = _fit(net, memory, opt_cfg, rng)
    after = batch_loss(net, memory.x[true_mask], memory.y[true_mask], opt_cfg.beta)
    rec = StageRecord(k, len(starts), len(result.failures), len(memory), losses, before, after,
                      time.perf_counter() - t0)
    if history is not None:
        history.stages.append(rec)
        history.snapshots[k] = prev_net.copy()
        history.episode_stage += [k] * len(starts)
        history.episode_starts += list(starts)
        history.terminal_scores += list(result.scores[:, H - 1])
    log.info("stage %d/%d: memory %d, loss %.4g -> %.4g (%d epochs, %.1fs)", k, H - 1, len(memory), before,
             after, len(losses), rec.seconds)
    return net


def train(spec: EnvSpec, schedule: StageSchedule, net_cfg: NetConfig | None = None, opt_cfg: OptConfig | None = None,
          seed=0, on_stage=None, resume=None):
    """Run stages ``1..H-1``; returns ``(final_net, history, memory)``.

    ``on_stage(k, net, history, memory)`` is called after each stage.
    ``resume=(net, memory, last_stage)`` continues after ``last_stage``; since
    each stage draws from streams keyed on ``(seed, k)`` the result matches
    an uninterrupted run.
    """
    net_cfg = net_cfg or NetConfig()
    opt_cfg = opt_cfg or OptConfig()
    if schedule.H != spec.H:
        raise ConfigError(f"schedule has {schedule.H - 1} stages but env.H = {spec.H}", ["schedule", "env.H"])
    env = Environment(spec)
    net = init_net(spec.phase_dim, net_cfg, np.random.default_rng(seed))
    memory = ReplayMemory(spec.phase_dim)
    first = 1
    if resume is not None:
        net, memory, last = resume[0].copy(), resume[1], int(resume[2])
        if len(memory) != expected_memory_size(schedule.N, last):
            raise StageError(last, "resumed replay memory does not match the schedule")
        first = last + 1
    history = TrainHistory()
    t0 = time.perf_counter()
    for k in range(first, spec.H):
        stage_rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(10_000 + k,)))
        try:
            net = run_stage(k, net, memory, env, schedule, stage_rng, opt_cfg, seed=seed, history=history)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(k, str(exc)) from exc
        history.wall_clock = time.perf_counter() - t0
        if on_stage is not None:
            on_stage(k, net, history, memory)
    return net, history, memory


def audit_memory(memory: ReplayMemory, env: Environment, snapshots=None):
    """Recompute labels: max relative error of true scores, and of bootstrapped ones if snapshots are given."""
    x, y, prov, st = memory.x, memory.y, memory.provenance, memory.stage
    t = prov == TRUE_SCORE
    true_err = 0.0
    if t.any():
        ref = env.score(x[t])
        true_err = float(np.max(np.abs(ref - y[t]) / np.maximum(np.abs(ref), 1e-300)))
    boot_err = 0.0
    if snapshots is not None and (~t).any():
        for k in np.unique(st[~t]):
            sel = (~t) & (st == k)
            ref = forward(snapshots[int(k)], x[sel])
            boot_err = max(boot_err, float(np.max(np.abs(ref - y[sel]) / np.maximum(np.abs(ref), 1e-300))))
    return true_err, boot_err
