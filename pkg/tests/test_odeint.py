"""Solver accuracy against analytic solutions, convergence orders, and
differentiability through the integration steps."""

import numpy as np
import pytest

from odeebm.nn import MLP, frozen
from odeebm.odeint import (
    OdeFunc,
    SolverError,
    SolverSpec,
    convergence_order,
    ode_solve,
    ode_solve_dense,
)
from odeebm.tensor import ShapeError, Tape, Tensor, narrow, sum_

RNG = np.random.default_rng(11)


def zero_f(t, z):
    return Tensor(np.zeros_like(z.data))


def decay_f(t, z):
    return z * -1.0


def rotation_f(t, z):
    # dz/dt = [[0,-1],[1,0]] z
    x = narrow(z, 0, 1)
    y = narrow(z, 1, 2)
    from odeebm.tensor import concat, neg

    return concat([neg(y), x], axis=-1)


class TestOdeSolve:
    def test_zero_field_constant_solution(self):
        z0 = Tensor(RNG.normal(size=(3, 4)))
        traj = ode_solve(zero_f, z0, [0.0, 0.3, 1.1, 2.0], SolverSpec(h=0.05))
        for i in range(4):
            assert np.array_equal(traj.data[:, i, :], z0.data)

    def test_exponential_decay(self):
        traj = ode_solve(decay_f, Tensor([[1.0]]), [0.0, 1.0],
                         SolverSpec(method="rk4", h=0.01))
        assert abs(traj.data[0, -1, 0] - np.exp(-1.0)) < 1e-6

    def test_rotation_quarter_turn(self):
        traj = ode_solve(rotation_f, Tensor([[1.0, 0.0]]), [0.0, np.pi / 2],
                         SolverSpec(method="rk4", h=0.01))
        assert np.max(np.abs(traj.data[0, -1] - [0.0, 1.0])) < 1e-5

    def test_euler_decay_coarse(self):
        traj = ode_solve(decay_f, Tensor([[1.0]]), [0.0, 1.0],
                         SolverSpec(method="euler", h=0.001))
        assert abs(traj.data[0, -1, 0] - np.exp(-1.0)) < 1e-3

    def test_non_monotone_times_rejected(self):
        with pytest.raises(SolverError, match="increasing"):
            ode_solve(zero_f, Tensor([[0.0]]), [0.0, 1.0, 0.5], SolverSpec())

    def test_bad_z0_shape(self):
        with pytest.raises(ShapeError):
            ode_solve(zero_f, Tensor([1.0]), [0.0, 1.0], SolverSpec())

    def test_interval_additivity(self):
        z0 = Tensor(RNG.normal(size=(2, 3)))

        def f(t, z):
            from odeebm.tensor import tanh

            return tanh(z) * 0.5

        spec = SolverSpec(h=0.25)
        joint = ode_solve(f, z0, [0.0, 2.0], spec)
        first = ode_solve(f, z0, [0.0, 1.0], spec)
        second = ode_solve(f, Tensor(first.data[:, -1, :]), [1.0, 2.0], spec)
        assert np.max(np.abs(joint.data[:, -1, :] - second.data[:, -1, :])) < 1e-12

    def test_query_set_consistency_on_aligned_grid(self):
        # binary-representable grid times keep the substeps bit-identical
        z0 = Tensor(RNG.normal(size=(1, 2)))
        spec = SolverSpec(h=0.25)
        sparse = ode_solve(decay_f, z0, [0.0, 0.5, 1.5], spec)
        dense = ode_solve(decay_f, z0, [0.0, 0.5, 1.0, 1.5], spec)
        assert np.array_equal(sparse.data[:, 1], dense.data[:, 1])
        assert np.array_equal(sparse.data[:, 2], dense.data[:, 3])

    def test_gradient_through_solver(self):
        # d z(t_end) / d z0 for dz/dt = -z is exp(-t_end)
        t_end = 1.3
        z0 = Tensor([[1.0]], requires_grad=True)
        with Tape() as tp:
            traj = ode_solve(decay_f, z0, [0.0, t_end], SolverSpec(h=0.01))
            out = sum_(narrow(traj, 0, 1))
        tp.backward(out)
        grad = z0.grad[0, 0] - 1.0  # minus the initial-slot contribution
        assert abs(grad - np.exp(-t_end)) < 1e-4

    def test_gradient_matches_finite_differences_for_mlp_field(self):
        net = MLP.create([3, 8, 2], ["tanh", "identity"], np.random.default_rng(5))
        func = OdeFunc(net, 2)
        x0 = RNG.normal(size=(1, 2))

        def endpoint(z0_data):
            traj = ode_solve(func, Tensor(z0_data), [0.0, 0.8], SolverSpec(h=0.05))
            return float(np.sum(traj.data[:, -1, :]))

        z0 = Tensor(x0.copy(), requires_grad=True)
        with frozen(net.params()):
            with Tape() as tp:
                traj = ode_solve(func, z0, [0.0, 0.8], SolverSpec(h=0.05))
                out = sum_(narrow(traj, 0, net.out_dim)) - sum_(z0)
            tp.backward(out)
        h = 1e-5
        for idx in np.ndindex(1, 2):
            xp, xm = x0.copy(), x0.copy()
            xp[idx] += h
            xm[idx] -= h
            want = (endpoint(xp) - endpoint(xm)) / (2 * h)
            assert abs(z0.grad[idx] - want) < 1e-4 * max(1.0, abs(want))


class TestConvergenceOrder:
    def test_rk4_order_four(self):
        p = convergence_order(decay_f, Tensor([[1.0]]), 0.0, 1.0, "rk4",
                              np.exp(-1.0), h0=0.2, levels=3)
        assert 3.7 <= p <= 4.3

    def test_euler_order_one(self):
        p = convergence_order(decay_f, Tensor([[1.0]]), 0.0, 1.0, "euler",
                              np.exp(-1.0), h0=0.2, levels=3)
        assert 0.8 <= p <= 1.2

    def test_zero_field_reports_exact(self):
        p = convergence_order(zero_f, Tensor([[2.0]]), 0.0, 1.0, "rk4", 2.0)
        assert p == float("inf")


class TestDopri5:
    def test_decay_accuracy(self):
        spec = SolverSpec(method="dopri5", h=0.2, rtol=1e-8, atol=1e-10)
        traj = ode_solve(decay_f, Tensor([[1.0]]), [0.0, 1.0], spec)
        assert abs(traj.data[0, -1, 0] - np.exp(-1.0)) < 1e-7

    def test_rotation_accuracy(self):
        spec = SolverSpec(method="dopri5", h=0.3, rtol=1e-9, atol=1e-11)
        traj = ode_solve(rotation_f, Tensor([[1.0, 0.0]]), [0.0, np.pi / 2], spec)
        assert np.max(np.abs(traj.data[0, -1] - [0.0, 1.0])) < 1e-7

    def test_step_budget_overflow(self):
        spec = SolverSpec(method="dopri5", h=0.1, rtol=1e-12, atol=1e-14,
                          max_steps=3)
        with pytest.raises(SolverError, match="max_steps"):
            ode_solve(decay_f, Tensor([[1.0]]), [0.0, 10.0], spec)

    def test_gradient_flows(self):
        z0 = Tensor([[1.0]], requires_grad=True)
        spec = SolverSpec(method="dopri5", h=0.2, rtol=1e-8, atol=1e-10)
        with Tape() as tp:
            traj = ode_solve(decay_f, z0, [0.0, 1.0], spec)
            out = sum_(narrow(traj, 0, 1)) - sum_(z0)
        tp.backward(out)
        assert abs(z0.grad[0, 0] - np.exp(-1.0)) < 1e-4


class TestDenseSolution:
    def test_grid_aligned_queries_match_exact_stepping(self):
        net = MLP.create([3, 8, 2], ["tanh", "identity"], np.random.default_rng(5))
        func = OdeFunc(net, 2)
        z0 = Tensor(RNG.normal(size=(4, 2)))
        times = np.linspace(0.0, 2.0, 11)
        exact = ode_solve(func, z0, times, SolverSpec(h=0.2))
        sol = ode_solve_dense(func, z0, 0.0, np.full(4, 2.0), 10)
        dense = sol.at(np.broadcast_to(times, (4, 11)))
        assert np.max(np.abs(exact.data - dense.data)) < 1e-12

    def test_off_grid_queries_interpolate_accurately(self):
        z0 = Tensor([[1.0]])
        sol = ode_solve_dense(decay_f, z0, 0.0, 2.0, 40)
        q = np.array([[0.123, 0.777, 1.595]])
        got = sol.at(q).data[0, :, 0]
        assert np.max(np.abs(got - np.exp(-q[0]))) < 1e-6

    def test_per_element_spans(self):
        z0 = Tensor([[1.0], [1.0]])
        sol = ode_solve_dense(decay_f, z0, 0.0, np.array([1.0, 2.0]), 30)
        got = sol.at(np.array([[1.0], [2.0]])).data[:, 0, 0]
        assert np.max(np.abs(got - np.exp(-np.array([1.0, 2.0])))) < 1e-6

    def test_zero_span_degenerates_to_z0(self):
        z0 = Tensor([[3.0, -1.0]])
        sol = ode_solve_dense(zero_f, z0, 0.0, 0.0, 1)
        got = sol.at(np.array([[0.0, 0.0]]))
        assert np.array_equal(got.data[0, 0], z0.data[0])
        assert np.array_equal(got.data[0, 1], z0.data[0])


class TestOdeFunc:
    def test_width_validation(self):
        net = MLP.create([4, 8, 2], ["tanh", "identity"], RNG)
        with pytest.raises(ShapeError, match="input width"):
            OdeFunc(net, 2)  # wants state 2 + time 1 = 3, net has 4
        net2 = MLP.create([3, 8, 3], ["tanh", "identity"], RNG)
        with pytest.raises(ShapeError, match="output width"):
            OdeFunc(net2, 2)

    def test_zd_is_appended(self):
        net = MLP.create([4, 4, 2], ["identity", "identity"],
                         np.random.default_rng(0))
        zd = Tensor(np.full((3, 1), 0.5))
        func = OdeFunc(net, 2, zd=zd)
        out = func(0.25, Tensor(np.zeros((3, 2))))
        manual = net(Tensor(np.concatenate(
            [np.zeros((3, 2)), np.full((3, 1), 0.5), np.full((3, 1), 0.25)], axis=1)))
        assert np.array_equal(out.data, manual.data)


def test_solver_spec_validation():
    with pytest.raises(ValueError):
        SolverSpec(method="rk9")
    with pytest.raises(ValueError):
        SolverSpec(h=-0.1)
