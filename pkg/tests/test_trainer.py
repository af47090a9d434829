import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfpo.diffcore import BOOTSTRAPPED, TRUE_SCORE, ScoreNet, forward
from dfpo.environments import ConfigError, Environment, EnvSpec
from dfpo.trainer import (
    NetConfig,
    OptConfig,
    ReplayMemory,
    StageError,
    TrainHistory,
    audit_memory,
    expected_memory_size,
    init_net,
    make_schedule,
    policy,
    run_stage,
    train,
)

SMOKE_OPT = OptConfig(epochs=3)
SMOKE_NET = NetConfig(hidden=(8, 8))


def quad_spec(H=5, dt=0.1, d=2):
    return EnvSpec("quadratic", d, H, dt)


class TestSchedule:
    def test_budget(self):
        s = make_schedule("budget", 20, total=5000)
        assert s.N == [264] * 19 and s.H == 20 and s.total_episodes == 264 * 19

    def test_deltas(self):
        s = make_schedule("budget", 20, total=5000, delta=0.05)
        assert s.delta[18] == pytest.approx(0.05 / 3, rel=1e-15)
        assert s.delta[17] == pytest.approx(0.05 / 9, rel=1e-15)
        assert all(b == pytest.approx(3 * a, rel=1e-12) for a, b in zip(s.delta, s.delta[1:]))

    def test_theory_special(self):
        assert make_schedule("theory_special", 5, eps=0.5).N == [64] * 4

    def test_theory_general(self):
        assert make_schedule("theory_general", 3, eps=0.5, d=1, C=1.0).N == [64, 64]

    def test_theory_cap_warns(self):
        with pytest.warns(RuntimeWarning):
            s = make_schedule("theory_general", 4, eps=0.1, d=40)
        assert s.N == [10 ** 6] * 3

    @pytest.mark.parametrize("kwargs,field", [
        (dict(mode="budget", H=20, total=10), "schedule.total"),
        (dict(mode="budget", H=1, total=10), "env.H"),
        (dict(mode="magic", H=5, total=10), "schedule.mode"),
        (dict(mode="theory_special", H=5), "schedule.eps"),
    ])
    def test_errors(self, kwargs, field):
        with pytest.raises(ConfigError) as exc:
            make_schedule(**kwargs)
        assert field in exc.value.fields

    def test_memory_closed_form(self):
        assert expected_memory_size([264] * 19, 19) == 45408
        assert expected_memory_size([5, 5, 5], 3) == 5 + 5 + 10


class TestReplayMemory:
    def test_transactional(self):
        mem = ReplayMemory(2)
        mem.append_stage(1, np.zeros((3, 2)), np.ones(3), np.zeros(3))
        with pytest.raises(ValueError):
            mem.append_stage(2, np.zeros((3, 2)), [1.0, np.nan, 1.0], np.zeros(3))
        with pytest.raises(ValueError):
            mem.append_stage(2, np.zeros((3, 2)), np.ones(2), np.zeros(3))
        with pytest.raises(ValueError):
            mem.append_stage(1, np.zeros((1, 2)), np.ones(1), np.zeros(1))
        assert len(mem) == 3 and mem.stage_index == {1: (0, 3)}

    def test_samples(self):
        mem = ReplayMemory(2)
        mem.append_stage(1, np.ones((2, 2)), [1.0, 2.0], [TRUE_SCORE, BOOTSTRAPPED])
        s = mem.samples()
        assert s[1].y == 2.0 and s[1].provenance == BOOTSTRAPPED and s[0].stage == 1


class TestRunStage:
    def _stage(self, k, N=4, H=6):
        spec = quad_spec(H=H)
        env = Environment(spec)
        sched = make_schedule("budget", H, total=N * (H - 1))
        mem = ReplayMemory(spec.phase_dim)
        # fill earlier stages with placeholders so indices line up
        for j in range(1, k):
            n = N * max(1, j - 1)
            mem.append_stage(j, np.zeros((n, spec.phase_dim)), np.zeros(n), np.zeros(n))
        net = init_net(spec.phase_dim, SMOKE_NET, np.random.default_rng(0))
        before = len(mem)
        hist = TrainHistory()
        run_stage(k, net, mem, env, sched, np.random.default_rng(1), SMOKE_OPT, history=hist)
        lo, hi = mem.stage_index[k]
        return mem, lo, hi, before, net, env, hist

    def test_stage1_one_true_sample_per_start(self):
        mem, lo, hi, before, _, env, _ = self._stage(1)
        assert hi - lo == 4
        assert np.all(mem.provenance[lo:hi] == TRUE_SCORE)
        starts = env.sample_starts(4, 0, stream=1)
        assert np.array_equal(mem.x[lo:hi], starts)

    def test_stage2_one_sample(self):
        mem, lo, hi, *_ = self._stage(2)
        assert hi - lo == 4 and np.all(mem.provenance[lo:hi] == TRUE_SCORE)

    def test_stage4_bootstrapped(self):
        mem, lo, hi, _, net, env, _ = self._stage(4)
        prov = mem.provenance[lo:hi]
        assert hi - lo == 12
        assert (prov == TRUE_SCORE).sum() == 4 and (prov == BOOTSTRAPPED).sum() == 8
        boot = slice(lo, hi)
        sel = mem.provenance[boot] == BOOTSTRAPPED
        assert np.array_equal(mem.y[boot][sel], forward(net, mem.x[boot][sel]))

    def test_history(self):
        *_, hist = self._stage(3)
        assert len(hist.stages) == 1 and hist.stages[0].stage == 3
        assert len(hist.episode_stage) == 4 and 3 in hist.snapshots

    def test_bad_index(self):
        spec = quad_spec(H=3)
        with pytest.raises(StageError):
            run_stage(3, init_net(4, SMOKE_NET, np.random.default_rng(0)), ReplayMemory(4), Environment(spec),
                      make_schedule("budget", 3, total=4), np.random.default_rng(0))


class TestTrain:
    def test_h2_one_stage(self):
        net, hist, mem = train(quad_spec(H=2), make_schedule("budget", 2, total=6), SMOKE_NET, SMOKE_OPT, seed=0)
        assert len(hist.stages) == 1 and len(mem) == 6

    def test_deterministic(self):
        args = (quad_spec(H=4), make_schedule("budget", 4, total=15), SMOKE_NET, SMOKE_OPT)
        a = train(*args, seed=3)[0]
        b = train(*args, seed=3)[0]
        c = train(*args, seed=4)[0]
        assert np.array_equal(a.flat_params(), b.flat_params())
        assert not np.array_equal(a.flat_params(), c.flat_params())

    def test_memory_counts_each_stage(self):
        sched = make_schedule("budget", 7, total=30)
        sizes = []
        train(quad_spec(H=7), sched, SMOKE_NET, SMOKE_OPT, seed=1,
              on_stage=lambda k, net, h, m: sizes.append((k, len(m))))
        assert sizes == [(k, expected_memory_size(sched.N, k)) for k in range(1, 7)]

    def test_audit(self):
        spec = quad_spec(H=6)
        net, hist, mem = train(spec, make_schedule("budget", 6, total=25), SMOKE_NET, SMOKE_OPT, seed=2)
        true_err, boot_err = audit_memory(mem, Environment(spec), hist.snapshots)
        assert true_err < 1e-12 and boot_err < 1e-12

    def test_resume_matches_uninterrupted(self):
        spec = quad_spec(H=5)
        sched = make_schedule("budget", 5, total=20)
        full, _, _ = train(spec, sched, SMOKE_NET, SMOKE_OPT, seed=5)
        saved = {}

        def grab(k, net, h, m):
            if k == 2:
                saved["state"] = (net.copy(), m, 2)
                raise KeyboardInterrupt

        with pytest.raises(KeyboardInterrupt):
            train(spec, sched, SMOKE_NET, SMOKE_OPT, seed=5, on_stage=grab)
        resumed, hist, _ = train(spec, sched, SMOKE_NET, SMOKE_OPT, seed=5, resume=saved["state"])
        assert [s.stage for s in hist.stages] == [3, 4]
        assert np.array_equal(full.flat_params(), resumed.flat_params())

    def test_resume_rejects_wrong_memory(self):
        spec = quad_spec(H=4)
        with pytest.raises(StageError):
            train(spec, make_schedule("budget", 4, total=9), SMOKE_NET, SMOKE_OPT,
                  resume=(init_net(4, SMOKE_NET, np.random.default_rng(0)), ReplayMemory(4), 2))

    def test_schedule_mismatch(self):
        with pytest.raises(ConfigError):
            train(quad_spec(H=4), make_schedule("budget", 5, total=9))

    def test_environment_failure_surfaces_stage(self, monkeypatch):
        spec = quad_spec(H=4)

        def boom(self, policy, starts):
            raise RuntimeError("engine offline")

        monkeypatch.setattr(Environment, "query", boom)
        with pytest.raises(StageError) as exc:
            train(spec, make_schedule("budget", 4, total=9), SMOKE_NET, SMOKE_OPT)
        assert exc.value.stage == 1

    def test_true_loss_not_increased_on_smoke(self):
        _, hist, _ = train(quad_spec(H=3), make_schedule("budget", 3, total=30), NetConfig(hidden=(16, 16)),
                           OptConfig(epochs=5), seed=0)
        for rec in hist.stages:
            assert rec.true_loss_after <= rec.true_loss_before

    def test_initial_policy_near_identity(self):
        net = init_net(8, NetConfig(), np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((10, 8))
        assert np.max(np.abs(policy(net, 0.01)(x) - x)) < 1e-3


@settings(max_examples=15, deadline=None)
@given(H=st.integers(2, 6), per_stage=st.integers(1, 4), seed=st.integers(0, 1000))
def test_memory_size_property(H, per_stage, seed):
    sched = make_schedule("budget", H, total=per_stage * (H - 1))
    sizes = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train(quad_spec(H=H), sched, NetConfig(hidden=(4,)), OptConfig(epochs=1), seed=seed,
              on_stage=lambda k, net, h, m: sizes.append(len(m) - expected_memory_size(sched.N, k)))
    assert sizes == [0] * (H - 1)
