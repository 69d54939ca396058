"""Gradient-correctness oracle for every tape op: central finite differences."""

import numpy as np
import pytest

from odeebm.tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    axpy,
    append_cols,
    clamp,
    concat,
    div,
    exp,
    gather_steps,
    gelu,
    log,
    matmul,
    mean_,
    moveaxis01,
    mul,
    narrow,
    neg,
    no_grad,
    power,
    repeat_mid,
    reshape,
    sigmoid,
    square,
    stack0,
    sub,
    sum_,
    tanh,
)


def numeric_grad(fn, x, h=1e-5):
    """Central differences of a scalar-valued fn at x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
        it.iternext()
    return g


def tape_grad(fn, x):
    t = Tensor(x.copy(), requires_grad=True)
    with Tape() as tp:
        out = fn(t)
    tp.backward(out)
    return t.grad


def check_op(build, x, rtol=1e-4):
    got = tape_grad(build, x)
    want = numeric_grad(lambda a: build(Tensor(a)).data.item(), x)
    scale = np.maximum(np.abs(want), 1.0)
    assert np.max(np.abs(got - want) / scale) < rtol, f"{got} vs {want}"


RNG = np.random.default_rng(42)


def rnd(*shape):
    return RNG.normal(size=shape)


class TestGradientOracle:
    """Each op vs finite differences; ~100 random trials in total."""

    def test_elementwise_ops(self):
        other = rnd(3, 4)
        cases = [
            lambda t: sum_(add(t, Tensor(other))),
            lambda t: sum_(sub(t, Tensor(other))),
            lambda t: sum_(mul(t, Tensor(other))),
            lambda t: sum_(div(t, Tensor(np.abs(other) + 1.0))),
            lambda t: sum_(neg(t)),
            lambda t: sum_(square(t)),
            lambda t: sum_(power(t, 3)),
            lambda t: sum_(exp(mul(t, 0.3))),
            lambda t: sum_(tanh(t)),
            lambda t: sum_(sigmoid(t)),
            lambda t: sum_(gelu(t)),
            lambda t: sum_(clamp(t, -0.8, 0.8)),
        ]
        for build in cases:
            for _ in range(5):
                check_op(build, rnd(3, 4))

    def test_log_positive_domain(self):
        for _ in range(5):
            check_op(lambda t: sum_(log(t)), np.abs(rnd(3, 3)) + 0.5)

    def test_matmul_both_sides(self):
        w = rnd(4, 2)
        for _ in range(5):
            check_op(lambda t: sum_(square(matmul(t, Tensor(w)))), rnd(3, 4))
        x = rnd(3, 4)
        for _ in range(5):
            check_op(lambda t: sum_(square(matmul(Tensor(x), t))), rnd(4, 2))

    def test_reductions_and_shapes(self):
        cases = [
            lambda t: mean_(square(t)),
            lambda t: sum_(sum_(t, axis=0)),
            lambda t: sum_(square(sum_(t, axis=1, keepdims=True))),
            lambda t: sum_(square(reshape(t, (4, 3)))),
            lambda t: sum_(square(narrow(t, 1, 3))),
        ]
        for build in cases:
            for _ in range(4):
                check_op(build, rnd(3, 4))

    def test_structural_ops(self):
        other = rnd(3, 2)
        for _ in range(4):
            check_op(lambda t: sum_(square(concat([t, Tensor(other)], axis=-1))),
                     rnd(3, 4))
            check_op(lambda t: sum_(square(repeat_mid(t, 5))), rnd(3, 4))
            check_op(lambda t: sum_(square(axpy(t, Tensor(other[:, :1] @ np.ones((1, 4))), 0.7))),
                     rnd(3, 4))
            check_op(lambda t: sum_(square(append_cols(t, Tensor(other), np.ones((3, 1))))),
                     rnd(3, 4))

    def test_stack_move_gather(self):
        idx = np.array([[0, 2], [1, 0]])

        def build(t):
            s = stack0([t, square(t), mul(t, 2.0)])           # [3, 2, d]
            g = gather_steps(s, idx)                          # [2, 2, d]
            return sum_(square(moveaxis01(g)))

        for _ in range(5):
            check_op(build, rnd(2, 3))

    def test_broadcast_bias_add(self):
        x = rnd(5, 3)
        for _ in range(3):
            check_op(lambda t: sum_(square(add(Tensor(x), t))), rnd(3))


class TestBackwardContract:
    def test_spec_example_sum_square(self):
        x = Tensor([3.0, 4.0], requires_grad=True)
        with Tape() as tp:
            y = sum_(square(x))
        assert y.item() == 25.0
        tp.backward(y)
        assert np.array_equal(x.grad, [6.0, 8.0])

    def test_spec_example_matmul_norm(self):
        w = Tensor(np.eye(2), requires_grad=True)
        x = np.array([[1.0], [0.0]])
        with Tape() as tp:
            y = sum_(square(matmul(w, Tensor(x))))
        tp.backward(y)
        assert np.array_equal(w.grad, [[2.0, 0.0], [0.0, 0.0]])

    def test_linearity_of_backward(self):
        x0 = rnd(4)
        a, b = 2.5, -1.25

        def f(t):
            return sum_(square(t))

        def g(t):
            return sum_(tanh(t))

        gf = tape_grad(f, x0)
        gg = tape_grad(g, x0)
        combo = tape_grad(lambda t: add(mul(f(t), a), mul(g(t), b)), x0)
        assert np.allclose(combo, a * gf + b * gg, rtol=1e-12)

    def test_reuse_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tp:
            y = sum_(add(square(x), square(x)))
        tp.backward(y)
        assert np.allclose(x.grad, [8.0])

    def test_non_scalar_output_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tp:
            y = square(x)
        with pytest.raises(ShapeError, match="scalar"):
            tp.backward(y)

    def test_untracked_leaf_gets_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        c = Tensor([2.0])
        with Tape() as tp:
            y = sum_(mul(x, c))
        tp.backward(y)
        assert c.grad is None
        assert np.allclose(x.grad, [2.0])

    def test_no_grad_suspends_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tp:
            with no_grad():
                y = square(x)
            assert not y.requires_grad
            assert len(tp.nodes) == 0

    def test_tapes_do_not_nest(self):
        with Tape():
            with pytest.raises(RuntimeError, match="nest"):
                with Tape():
                    pass


class TestShapeErrors:
    def test_matmul_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_add_mismatch(self):
        with pytest.raises(ShapeError, match="broadcast"):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestValues:
    def test_matmul_hand_computed(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_gelu_fixes_origin(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_gelu_matches_gaussian_cdf_form(self):
        from scipy.stats import norm

        x = rnd(50)
        got = gelu(Tensor(x)).data
        assert np.allclose(got, x * norm.cdf(x), atol=1e-12)

    def test_determinism(self):
        def run():
            x = Tensor(np.linspace(-2, 2, 64).reshape(8, 8), requires_grad=True)
            with Tape() as tp:
                y = sum_(square(tanh(matmul(x, Tensor(np.full((8, 8), 0.1))))))
            tp.backward(y)
            return y.item(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        assert np.array_equal(g1, g2)

    def test_finite_outputs_invariant(self):
        x = Tensor(RNG.uniform(-10, 10, size=(16, 8)))
        for fn in (tanh, sigmoid, gelu, square):
            assert np.all(np.isfinite(fn(x).data))
