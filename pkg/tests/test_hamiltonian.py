import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfpo.hamiltonian import (
    AnalyticHamiltonian,
    DynamicsOperator,
    EnergyScore,
    NumericalError,
    Trajectory,
    analytic_flow,
    euler_matrix,
    phase_point,
    rollout,
    score_energy,
    step,
    symplectic_apply,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


class NanScore:
    def grad(self, x):
        return np.full_like(np.asarray(x, dtype=float), np.nan)


class TestSymplectic:
    @pytest.mark.parametrize("g,out", [((1, 0), (0, -1)), ((0, 1), (1, 0)), ((2, 3), (3, -2))])
    def test_examples(self, g, out):
        assert np.array_equal(symplectic_apply(np.array(g, float)), out)

    def test_odd_dimension(self):
        with pytest.raises(ValueError):
            symplectic_apply(np.zeros(3))

    @given(arrays(np.float64, st.integers(1, 6).map(lambda n: 2 * n), elements=finite))
    def test_square_is_minus_identity(self, v):
        assert np.array_equal(symplectic_apply(symplectic_apply(v)), -v)

    @given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
    def test_antisymmetric(self, a, b):
        lhs = a @ symplectic_apply(b)
        rhs = -(symplectic_apply(a) @ b)
        assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))


class TestStep:
    def test_free_particle(self):
        out = step(DynamicsOperator(0.01, AnalyticHamiltonian("free")), np.array([0.0, 1.0]))
        assert np.allclose(out, [0.01, 1.0], atol=1e-15)

    def test_harmonic(self):
        op = DynamicsOperator(0.01, AnalyticHamiltonian("harmonic"))
        assert np.allclose(step(op, np.array([1.0, 0.0])), [1.0, -0.01], atol=1e-15)
        assert np.allclose(step(op, step(op, np.array([1.0, 0.0]))), [0.9999, -0.02], atol=1e-15)

    @given(arrays(np.float64, 4, elements=finite))
    def test_zero_dt_is_identity(self, x):
        out = step(DynamicsOperator(0.0, NanScore()), x)
        assert np.array_equal(out, x)

    def test_nonfinite_gradient_reports_point(self):
        with pytest.raises(NumericalError) as exc:
            step(DynamicsOperator(0.1, NanScore()), np.array([1.0, 2.0]))
        assert np.array_equal(exc.value.point, [1.0, 2.0])

    def test_negative_dt_rejected(self):
        with pytest.raises(ValueError):
            DynamicsOperator(-0.1, AnalyticHamiltonian())

    def test_legendre_energy_step(self):
        F = lambda s: 0.5 * np.sum(np.asarray(s) ** 2, axis=-1)
        x = np.array([0.3, -0.2, 0.5, 0.1])
        out = step(DynamicsOperator(0.1, EnergyScore(F)), x)
        s, p = x[:2], x[2:]
        assert np.allclose(out, np.concatenate([s + 0.1 * p, p - 0.1 * s]), atol=1e-9)


class TestRollout:
    def test_h1(self):
        x0 = np.array([0.2, 0.4])
        out = rollout(DynamicsOperator(0.1, AnalyticHamiltonian()), x0, 1)
        assert out.shape == (1, 2) and np.array_equal(out[0], x0)

    def test_free_drift(self):
        out = rollout(DynamicsOperator(0.1, AnalyticHamiltonian("free")), np.array([0.0, 1.0]), 3)
        assert np.allclose(out[:, 0], [0.0, 0.1, 0.2], atol=1e-15)

    def test_matrix_power(self):
        dt = 0.01
        out = rollout(DynamicsOperator(dt, AnalyticHamiltonian()), np.array([1.0, 0.0]), 21)
        M = np.array([[1.0, dt], [-dt, 1.0]])
        for n in range(21):
            assert np.max(np.abs(out[n] - np.linalg.matrix_power(M, n) @ [1.0, 0.0])) <= 1e-12

    def test_equals_repeated_step(self):
        op = DynamicsOperator(0.05, AnalyticHamiltonian("quadratic", np.diag([2.0, 0.5])))
        x = np.array([1.0, -1.0, 0.3, 0.2])
        traj = rollout(op, x, 8)
        for j in range(8):
            assert np.array_equal(traj[j], x)
            x = step(op, x)

    def test_failing_index(self):
        with pytest.raises(NumericalError) as exc:
            rollout(DynamicsOperator(0.1, NanScore()), np.zeros(2), 3)
        assert exc.value.index == 1

    def test_bad_h(self):
        with pytest.raises(ValueError):
            rollout(DynamicsOperator(0.1, AnalyticHamiltonian()), np.zeros(2), 0)

    def test_batched(self):
        op = DynamicsOperator(0.1, AnalyticHamiltonian())
        X = np.random.default_rng(0).standard_normal((5, 2))
        traj = rollout(op, X, 4)
        assert traj.shape == (4, 5, 2)
        assert np.allclose(traj[:, 2], rollout(op, X[2], 4))


class TestScoreEnergy:
    def test_examples(self):
        assert score_energy(np.zeros(2), np.zeros(2), lambda s: 12.5) == 12.5
        assert score_energy(np.zeros(2), np.ones(2), lambda s: 0.0) == 1.0
        F = lambda s: 0.5 * float(np.sum(np.asarray(s) ** 2))
        assert score_energy(np.array([3.0, 4.0]), np.array([1.0, 0.0]), F) == pytest.approx(13.0, abs=1e-12)

    def test_printed_form(self):
        F = lambda s: 0.5 * float(np.sum(np.asarray(s) ** 2))
        assert score_energy(np.array([3.0, 4.0]), np.array([1.0, 0.0]), F, "paper_printed") == 12.5

    def test_printed_form_freezes_state(self):
        F = lambda s: 0.5 * np.sum(np.asarray(s) ** 2, axis=-1)
        x = np.array([0.3, -0.2, 0.5, 0.1])
        out = step(DynamicsOperator(0.1, EnergyScore(F, mode="paper_printed")), x)
        assert np.array_equal(out[:2], x[:2])

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            score_energy(np.zeros(1), np.zeros(1), lambda s: 0.0, "other")


class TestAnalytic:
    def test_free_flow(self):
        assert np.allclose(analytic_flow(AnalyticHamiltonian("free"), np.array([0.0, 1.0]), 1.0), [1.0, 1.0])

    def test_harmonic_flow(self):
        h = AnalyticHamiltonian()
        assert np.allclose(analytic_flow(h, np.array([1.0, 0.0]), np.pi / 2), [0.0, -1.0], atol=1e-15)
        assert np.allclose(analytic_flow(h, np.array([1.0, 0.0]), 0.2),
                           [0.9800665778412416, -0.19866933079506122], atol=1e-15)

    def test_quadratic_flow_matches_ode(self):
        from scipy.integrate import solve_ivp

        A = np.array([[2.0, 0.3], [0.3, 0.5]])
        h = AnalyticHamiltonian("quadratic", A)
        x0 = np.array([1.0, -0.5, 0.2, 0.4])
        sol = solve_ivp(lambda t, x: np.concatenate([x[2:], -A @ x[:2]]), (0, 1.3), x0, rtol=1e-12, atol=1e-12)
        assert np.allclose(h.flow(x0, 1.3), sol.y[:, -1], atol=1e-9)

    def test_gradient_matches_value(self):
        h = AnalyticHamiltonian("quadratic", np.array([[1.5, 0.2], [0.2, 0.7]]))
        x = np.array([0.4, -0.3, 0.9, 0.1])
        eps = 1e-6
        fd = np.array([(h.value(x + eps * e) - h.value(x - eps * e)) / (2 * eps) for e in np.eye(4)])
        assert np.allclose(h.grad(x), fd, atol=1e-8)

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            AnalyticHamiltonian("morse")
        with pytest.raises(ValueError):
            AnalyticHamiltonian("quadratic", np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_euler_matrix(self):
        assert np.array_equal(euler_matrix(0.01), [[1.0, 0.01], [-0.01, 1.0]])

    def test_first_order_consistency(self):
        h = AnalyticHamiltonian()
        x0 = np.array([1.0, 0.0])
        errs = []
        for k in range(4):
            dt = 0.01 / 2 ** k
            errs.append(np.linalg.norm(step(DynamicsOperator(dt, h), x0) - h.flow(x0, dt)))
        assert all(a / b >= 3.9 for a, b in zip(errs, errs[1:]))

    def test_energy_drift(self):
        h = AnalyticHamiltonian()
        traj = rollout(DynamicsOperator(0.01, h), np.array([1.0, 0.0]), 20)
        e = h.value(traj)
        assert np.max(np.abs(e - e[0]) / e[0]) < 5e-3
        # explicit Euler multiplies the harmonic energy by exactly (1 + dt^2) per step
        assert np.allclose(e / e[0], (1 + 1e-4) ** np.arange(20), rtol=1e-12)


def test_phase_point_and_trajectory():
    assert np.array_equal(phase_point([1.0, 2.0]), [1.0, 2.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        phase_point([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.001, 0.2), arrays(np.float64, 2, elements=st.floats(-3, 3)))
def test_euler_power_property(dt, x0):
    op = DynamicsOperator(dt, AnalyticHamiltonian())
    traj = rollout(op, x0, 10)
    M = euler_matrix(dt)
    for n in range(10):
        assert np.allclose(traj[n], np.linalg.matrix_power(M, n) @ x0, atol=1e-12)
