"""One Euler step of the dual flow, on the harmonic oscillator.

With h(s, p) = (p^2 + s^2) / 2 the exact flow is a rotation, and the explicit
Euler step is multiplication by [[1, dt], [-dt, 1]].  Energy grows by exactly
(1 + dt^2) per step, which is the price of a first-order integrator.
"""
import numpy as np

from dfpo.hamiltonian import AnalyticHamiltonian, DynamicsOperator, euler_matrix, rollout

osc = AnalyticHamiltonian("harmonic")
dt, H = 0.01, 20
op = DynamicsOperator(dt, osc)
x0 = np.array([1.0, 0.0])

traj = rollout(op, x0, H)
powers = np.array([np.linalg.matrix_power(euler_matrix(dt), n) @ x0 for n in range(H)])
print("max deviation from matrix powers: %.1e" % np.abs(traj - powers).max())

exact = osc.flow(x0, dt * (H - 1))
print("Euler endpoint", traj[-1], " exact", exact)

e = osc.value(traj)
print("relative energy drift after %d steps: %.2e" % (H, e[-1] / e[0] - 1))

# one-step error shrinks 4x per halving of dt
for k in range(4):
    h = dt / 2 ** k
    err = np.linalg.norm(rollout(DynamicsOperator(h, osc), x0, 2)[1] - osc.flow(x0, h))
    print("dt = %.5f  one-step error %.3e" % (h, err))
