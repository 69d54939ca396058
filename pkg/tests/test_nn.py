"""MLP forward/backward behavior and the Adam recursion."""

import numpy as np
import pytest

from odeebm.nn import MLP, AdamState, adam_step, frozen, grads_of, zero_grads
from odeebm.tensor import ShapeError, Tape, Tensor, square, sum_

RNG = np.random.default_rng(7)


def make_net(widths, acts, scale=1.0, rng=None):
    return MLP.create(widths, acts, rng or np.random.default_rng(3), out_scale=scale)


class TestMlpApply:
    def test_zero_weights_identity_returns_bias(self):
        net = make_net([3, 2], ["identity"])
        net.weights[0].data[:] = 0.0
        net.biases[0].data[:] = [1.5, -2.0]
        for _ in range(4):
            out = net(Tensor(RNG.normal(size=(5, 3))))
            assert np.allclose(out.data, [1.5, -2.0])

    def test_one_layer_linear(self):
        net = make_net([1, 1], ["identity"])
        net.weights[0].data[:] = [[2.0]]
        net.biases[0].data[:] = [1.0]
        assert np.allclose(net(Tensor([[3.0]])).data, [[7.0]])

    def test_three_layer_gelu_finite_on_wide_inputs(self):
        net = make_net([4, 16, 16, 2], ["gelu", "gelu", "identity"])
        x = Tensor(RNG.uniform(-10, 10, size=(64, 4)))
        assert np.all(np.isfinite(net(x).data))

    def test_width_mismatch(self):
        net = make_net([3, 2], ["identity"])
        with pytest.raises(ShapeError, match="width"):
            net(Tensor(np.zeros((4, 5))))

    def test_gradients_vs_finite_differences(self):
        # the fused-node backward against the same oracle as every other op
        net = make_net([3, 8, 8, 2], ["gelu", "tanh", "identity"])
        x0 = RNG.normal(size=(4, 3))

        def loss_value():
            return sum_(square(net(Tensor(x0)))).item()

        params = net.params()
        zero_grads(params)
        with Tape() as tp:
            loss = sum_(square(net(Tensor(x0, requires_grad=True))))
        tp.backward(loss)
        h = 1e-5
        for p in params:
            it = np.nditer(p.data, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = p.data[idx]
                p.data[idx] = orig + h
                up = loss_value()
                p.data[idx] = orig - h
                down = loss_value()
                p.data[idx] = orig
                want = (up - down) / (2 * h)
                got = p.grad[idx]
                assert abs(got - want) / max(abs(want), 1.0) < 1e-4
                it.iternext()

    def test_input_gradient_vs_finite_differences(self):
        net = make_net([3, 6, 1], ["tanh", "identity"])
        x0 = RNG.normal(size=(2, 3))
        x = Tensor(x0.copy(), requires_grad=True)
        with frozen(net.params()):
            with Tape() as tp:
                loss = sum_(net(x))
            tp.backward(loss)
        h = 1e-5
        for idx in np.ndindex(*x0.shape):
            xp, xm = x0.copy(), x0.copy()
            xp[idx] += h
            xm[idx] -= h
            want = (sum_(net(Tensor(xp))).item() - sum_(net(Tensor(xm))).item()) / (2 * h)
            assert abs(x.grad[idx] - want) < 1e-4 * max(abs(want), 1.0)

    def test_frozen_skips_weight_grads(self):
        net = make_net([2, 4, 1], ["tanh", "identity"])
        x = Tensor(RNG.normal(size=(3, 2)), requires_grad=True)
        with frozen(net.params()):
            with Tape() as tp:
                loss = sum_(net(x))
            tp.backward(loss)
        assert all(p.grad is None for p in net.params())
        assert x.grad is not None


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        st = AdamState.for_params([p], lr=0.1)
        adam_step([p], [np.zeros(2)], st)
        assert np.array_equal(p.data, [1.0, -2.0])
        assert st.step == 1

    def test_first_step_is_signed_lr(self):
        # bias-corrected first step: -lr * g / (|g| + eps)
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        st = AdamState.for_params([p], lr=0.05)
        g = np.array([3.0, -0.2])
        adam_step([p], [g], st)
        assert np.allclose(p.data, -0.05 * np.sign(g), atol=1e-6)

    def test_hundred_steps_matches_scalar_recursion(self):
        # oracle: run the textbook recursion directly on floats
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        w, m, v = 1.0, 0.0, 0.0
        trail = []
        for t in range(1, 101):
            g = 2.0 * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            trail.append(w)

        p = Tensor(np.array([1.0]), requires_grad=True)
        st = AdamState.for_params([p], lr=lr)
        for _ in range(100):
            adam_step([p], [2.0 * p.data], st)
        assert np.allclose(p.data[0], trail[-1], rtol=1e-12)
        assert abs(p.data[0]) < 0.1

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        st = AdamState.for_params([p], lr=0.1)
        with pytest.raises(ShapeError):
            adam_step([p], [np.zeros(4)], st)

    def test_determinism(self):
        def run():
            p = Tensor(np.array([0.3, -0.4]), requires_grad=True)
            st = AdamState.for_params([p], lr=0.01)
            for i in range(10):
                adam_step([p], [np.array([np.sin(i), np.cos(i)])], st)
            return p.data.copy()

        assert np.array_equal(run(), run())


def test_grads_of_substitutes_zeros():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    a.grad = np.ones(2)
    gs = grads_of([a, b])
    assert np.array_equal(gs[0], np.ones(2))
    assert np.array_equal(gs[1], np.zeros(3))
