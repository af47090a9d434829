"""A scalar score network and its input gradient.

The policy only ever needs g(x) and grad_x g(x), so the network is a small
tanh MLP with a hand-written backward pass.  Here we build one, compare the
analytic gradient with central differences, and take a few Adam steps on a
toy regression.
"""
import numpy as np

from dfpo.diffcore import OptimizerState, ScoreNet, batch_loss, finite_diff_check, forward, grad_input, grad_params, opt_step

rng = np.random.default_rng(0)
net = ScoreNet.init([4, 32, 32, 1], rng, output_scale=1.0)
print("parameters:", net.n_params())

x = rng.standard_normal(4)
print("g(x) =", forward(net, x))
print("grad g(x) =", grad_input(net, x))

# reverse mode against central differences, a few random points
errs = [finite_diff_check(net, p) for p in rng.standard_normal((20, 4))]
print("worst relative gradient error: %.2e" % max(errs))

# fit g to a quadratic bowl with smooth-L1 and Adam
X = rng.standard_normal((512, 4))
y = 0.5 * np.sum(X ** 2, axis=1)
state = OptimizerState.for_net(net, learning_rate=1e-2)
for it in range(301):
    idx = rng.choice(len(X), 64, replace=False)
    opt_step(net, state, grad_params(net, X[idx], y[idx]))
    if it % 100 == 0:
        print("step %3d  loss %.4f" % (it, batch_loss(net, X, y)))

# the learned gradient should now point roughly along x
print("grad at x:", np.round(grad_input(net, x), 3), " target:", np.round(x, 3))
