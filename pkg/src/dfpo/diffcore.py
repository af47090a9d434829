"""Scalar-output feed-forward networks with hand-written reverse-mode derivatives.

A :class:`ScoreNet` maps a phase point ``x`` of width ``d`` to a single real.
Two derivative passes are provided: :func:`grad_input` (gradient with respect
to ``x``, which drives the dynamics operator) and :func:`grad_params`
(gradient of the mean smooth-L1 loss with respect to every weight and bias,
which drives training).  Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ScoreNet",
    "OptimizerState",
    "LabeledSample",
    "TRUE_SCORE",
    "BOOTSTRAPPED",
    "forward",
    "grad_input",
    "grad_params",
    "smooth_l1",
    "smooth_l1_grad",
    "batch_loss",
    "opt_step",
    "finite_diff_check",
]

TRUE_SCORE = 0
BOOTSTRAPPED = 1


def _tanh(z):
    return np.tanh(z)


def _tanh_d(z, a):
    return 1.0 - a * a


def _softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_d(z, a):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _sigmoid_d(z, a):
    return a * (1.0 - a)


# Every entry is C^2, which the convergence argument for the learned operator needs.
ACTIVATIONS = {
    "tanh": (_tanh, _tanh_d),
    "softplus": (_softplus, _softplus_d),
    "sigmoid": (_sigmoid, _sigmoid_d),
}


@dataclass
class ScoreNet:
    """Fully connected network ``R^d -> R``.

    ``weights[l]`` has shape ``(fan_in, fan_out)`` and ``biases[l]`` shape
    ``(fan_out,)``.  The activation is applied after every layer except the
    last.  ``bound`` optionally clips every parameter to ``[-bound, bound]``
    after each optimizer step.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    bound: float | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {sorted(ACTIVATIONS)}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be nonempty lists of equal length")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: fan-in {w.shape[0]} != previous fan-out {self.weights[i - 1].shape[1]}")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("score network must have a single output")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise ValueError("non-finite parameter")

    @classmethod
    def init(cls, widths, rng=None, activation="tanh", output_scale=1.0, bound=None):
        """Uniform fan-in initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

        ``widths`` lists every layer width including input and output (which
        must be 1).  ``output_scale`` multiplies the last layer, so a small
        value gives a nearly flat score and a nearly identity policy.
        """
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-lim, lim, size=fan_out))
        weights[-1] *= output_scale
        biases[-1] *= output_scale
        return cls(weights, biases, activation=activation, bound=bound)

    @classmethod
    def zeros(cls, widths, activation="tanh"):
        widths = [int(w) for w in widths]
        return cls(
            [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
            [np.zeros(b) for b in widths[1:]],
            activation=activation,
        )

    @property
    def layer_widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def params(self) -> list[np.ndarray]:
        """Parameters in declaration order ``[W0, b0, W1, b1, ...]`` (views)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_shapes(self) -> list[tuple[int, ...]]:
        return [p.shape for p in self.params()]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for p in self.params():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise ValueError(f"expected {offset} parameters, got {flat.size}")

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "ScoreNet":
        return ScoreNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        activation=self.activation, bound=self.bound)

    # Protocol shared with analytic Hamiltonians: value(x) and grad(x).
    def value(self, x):
        return forward(self, x)

    def grad(self, x):
        return grad_input(self, x)

    __call__ = value


@dataclass
class LabeledSample:
    x: np.ndarray
    y: float
    stage: int
    provenance: int = TRUE_SCORE

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if not np.isfinite(self.y):
            raise ValueError("label must be finite")
        if self.stage < 1:
            raise ValueError("stage index starts at 1")


@dataclass
class OptimizerState:
    """Adam moments for one network."""

    learning_rate: float = 1e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be > 0 and batch_size >= 1")

    @classmethod
    def for_net(cls, net: ScoreNet, learning_rate=1e-3, batch_size=32, **kw):
        st = cls(learning_rate=learning_rate, batch_size=batch_size, **kw)
        st.m = [np.zeros_like(p) for p in net.params()]
        st.v = [np.zeros_like(p) for p in net.params()]
        return st


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.input_dim:
        raise ValueError(f"input shape {x.shape} does not match network input width {net.input_dim}")
    return xb, single


def _forward_cache(net, xb):
    act, _ = ACTIVATIONS[net.activation]
    zs, hs = [], [xb]
    h = xb
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if i < last:
            zs.append(z)
            h = act(z)
            hs.append(h)
        else:
            h = z
    return zs, hs, h[:, 0]


def forward(net: ScoreNet, x):
    """Evaluate the score; ``x`` may be one point ``(d,)`` or a batch ``(B, d)``."""
    xb, single = _as_batch(net, x)
    out = _forward_cache(net, xb)[2]
    return float(out[0]) if single else out


def _backward(net, zs, hs, upstream, want_params):
    """Propagate ``upstream`` (dL/dg per row) back through the network."""
    _, dact = ACTIVATIONS[net.activation]
    delta = upstream[:, None]
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        if want_params:
            grads[2 * i] = hs[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
        if i > 0:
            delta = delta * dact(zs[i - 1], hs[i])
    return delta, grads


def grad_input(net: ScoreNet, x):
    """Gradient of the score with respect to its input, by reverse accumulation."""
    xb, single = _as_batch(net, x)
    zs, hs, _ = _forward_cache(net, xb)
    gx, _ = _backward(net, zs, hs, np.ones(xb.shape[0]), want_params=False)
    return gx[0] if single else gx


def smooth_l1(residual, beta=1.0):
    """Huber-type loss: ``0.5 r^2 / beta`` inside ``|r| < beta``, ``|r| - beta/2`` outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    r = np.abs(residual)
    out = np.where(r < beta, 0.5 * r * r / beta, r - 0.5 * beta)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(residual, beta=1.0):
    r = np.asarray(residual, dtype=np.float64)
    return np.where(np.abs(r) < beta, r / beta, np.sign(r))


def _unpack_batch(batch, y):
    if y is not None:
        return np.asarray(batch, dtype=np.float64), np.asarray(y, dtype=np.float64).reshape(-1)
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    return np.stack([s.x for s in batch]), np.array([s.y for s in batch], dtype=np.float64)


def batch_loss(net, batch, y=None, beta=1.0) -> float:
    x, y = _unpack_batch(batch, y)
    if y.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(smooth_l1(forward(net, x) - y, beta)))


def grad_params(net: ScoreNet, batch, y=None, beta=1.0, return_loss=False):
    """Gradient of the mean smooth-L1 loss over a batch, one array per parameter.

    ``batch`` is either a list of :class:`LabeledSample` or an ``(B, d)`` array
    with targets passed as ``y``.
    """
    x, y = _unpack_batch(batch, y)
    if y.size == 0:
        raise ValueError("empty batch")
    xb, _ = _as_batch(net, x)
    zs, hs, out = _forward_cache(net, xb)
    resid = out - y
    upstream = smooth_l1_grad(resid, beta) / y.size
    _, grads = _backward(net, zs, hs, upstream, want_params=True)
    if return_loss:
        return grads, float(np.mean(smooth_l1(resid, beta)))
    return grads


def opt_step(net: ScoreNet, state: OptimizerState, grads):
    """One Adam update, in place.  Returns ``(net, state)`` for convenience."""
    params = net.params()
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match network parameters")
    if any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer moments do not match network parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if net.bound is not None:
            np.clip(p, -net.bound, net.bound, out=p)
    return net, state


def finite_diff_check(net: ScoreNet, x, h=1e-5, floor=1e-12, elementwise=False) -> float:
    """Max coordinate-wise relative error of :func:`grad_input` against central differences.

    Each coordinate's discrepancy is divided by the larger of the two
    gradient vectors' max-norms, so a coordinate that is nearly zero is not
    judged by rounding noise in the difference quotient.  ``elementwise=True``
    divides by ``max(|analytic_i|, |numeric_i|)`` instead.  Anything below
    ``floor`` in magnitude counts as zero error.
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = grad_input(net, x)
    d = x.size
    probes = np.repeat(x[None, :], 2 * d, axis=0)
    idx = np.arange(d)
    probes[idx, idx] += h
    probes[d + idx, idx] -= h
    vals = forward(net, probes)
    numeric = (vals[:d] - vals[d:]) / (2.0 * h)
    if elementwise:
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
    else:
        scale = np.full(d, max(np.abs(analytic).max(), np.abs(numeric).max()))
    err = np.where(scale < floor, 0.0, np.abs(analytic - numeric) / np.where(scale < floor, 1.0, scale))
    return float(err.max())
