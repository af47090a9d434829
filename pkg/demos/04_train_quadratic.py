"""Stage-wise training on the quadratic task, where the optimal map is known.

F(s) = |s|^2 / 2, so the reduced score is the harmonic Hamiltonian and the
oracle step G is available in closed form.  We train with a small budget,
then measure how far the learned map is from G after j steps and how the
cumulative regret grows over training episodes.
"""
import numpy as np

from dfpo.environments import Environment, EnvSpec
from dfpo.evalharness import eval_terminal, pointwise_error_stats, regret_estimate
from dfpo.trainer import NetConfig, OptConfig, make_schedule, policy, train

spec = EnvSpec("quadratic", d_S=2, H=10, dt=0.1)
env = Environment(spec)
schedule = make_schedule("budget", spec.H, total=1000)
print("episodes per stage:", schedule.N[0], " stages:", len(schedule.N))

net, history, memory = train(spec, schedule, NetConfig(), OptConfig(), seed=0)
print("replay memory: %d samples, %.0fs" % (len(memory), history.wall_clock))
for rec in history.stages[::3]:
    print("  stage %d  true-score loss %.4f -> %.4f" % (rec.stage, rec.true_loss_before, rec.true_loss_after))

op = policy(net, spec.dt)
for j in (1, 2, 3):
    m, se = pointwise_error_stats(op, env.oracle(), j, n=500, seed=0, env=env)
    print("j=%d  E|G_theta^j - G^j| = %.4f +/- %.4f" % (j, m, se))

curve = regret_estimate(history, env)
print("regret after %d episodes %.3f, fitted exponent %.3f" % (len(curve.gaps), curve.cumulative[-1], curve.exponent))

rep = eval_terminal(op, env, 200, seed=0)
print("terminal cost %.4f (start distribution mean %.4f)" % (rep.mean, np.mean(rep.step_costs[0])))
