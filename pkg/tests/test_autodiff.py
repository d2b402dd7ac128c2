import numpy as np
import pytest

from minicnn import layers as L
from minicnn.autodiff import Tape, check_gradients, kink_signature, relative_error
from minicnn.errors import BudgetExceededError, NonScalarLossError, UnknownOpError


def test_product_rule_by_hand():
    tape = Tape()
    a = tape.leaf([2.0, 3.0], "a")
    b = tape.leaf([5.0, 7.0], "b")
    loss = (a * b + a).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [6.0, 8.0])
    np.testing.assert_array_equal(b.grad, [2.0, 3.0])


def test_fan_out_accumulates():
    tape = Tape()
    x = tape.leaf([3.0], "x")
    y = x * x * x  # d/dx = 3x^2 = 27
    tape.backward(y)
    assert x.grad[0] == 27.0


def test_matmul_and_mean():
    tape = Tape()
    a = tape.leaf(np.arange(6.0).reshape(2, 3), "a")
    b = tape.leaf(np.ones((3, 2)), "b")
    tape.backward((a @ b).mean())
    np.testing.assert_allclose(a.grad, np.full((2, 3), 2 / 4))
    np.testing.assert_allclose(b.grad, np.repeat(a.value.sum(axis=0)[:, None] / 4, 2, axis=1))


def test_unused_leaf_gets_zeros():
    tape = Tape()
    x = tape.leaf([1.0], "x")
    unused = tape.leaf([[1.0, 2.0]], "u")
    tape.backward(x * 2.0)
    np.testing.assert_array_equal(unused.grad, [[0.0, 0.0]])


def test_nonscalar_loss_rejected():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(NonScalarLossError):
        tape.backward(x * 2.0)


def test_unknown_op():
    with pytest.raises(UnknownOpError):
        Tape().record("frobnicate", [])


def test_foreign_node_rejected():
    other = Tape().leaf([1.0])
    tape = Tape()
    with pytest.raises(ValueError):
        tape.record("add", [tape.leaf([1.0]), other])


def test_requires_grad_false_is_skipped():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1, 4, 4)), requires_grad=False)
    w = tape.leaf(np.ones((2, 1, 3, 3)), "w")
    b = tape.leaf(np.zeros(2), "b")
    out = L.conv2d(x, L.ConvParams(w, b, 1, 1))
    assert out.ctx["needs_grad"] == (False, True, True)
    tape.backward(out.sum())
    np.testing.assert_array_equal(x.grad, np.zeros((1, 1, 4, 4)))
    assert w.grad.sum() > 0


def test_named_grads():
    tape = Tape()
    x = tape.leaf([1.0, 2.0], "x")
    tape.backward((x * x).sum())
    assert set(tape.named_grads()) == {"x"}


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)


class TestCheckGradients:
    def test_smooth_function_passes(self):
        rng = np.random.default_rng(0)

        def loss(tape, leaves):
            z = L.activation("tanh", leaves["a"] @ leaves["b"])
            return z.mean()

        report = check_gradients(loss, {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))})
        assert report.passed
        assert report["a"].checked == 12
        assert "overall: PASS" in report.table()

    def test_three_layer_mlp_at_small_step(self):
        rng = np.random.default_rng(3)
        arrays = {"x": rng.normal(size=(5, 4))}
        for i, (m, n) in enumerate([(4, 6), (6, 5), (5, 3)]):
            arrays[f"w{i}"] = rng.normal(size=(m, n)) / np.sqrt(m)
            arrays[f"b{i}"] = rng.normal(size=n)

        def loss(tape, lv):
            h = lv["x"]
            for i in range(3):
                h = L.dense(h, lv[f"w{i}"], lv[f"b{i}"])
                if i < 2:
                    h = L.activation("tanh", h)
            return L.softmax_cross_entropy(h, [0, 1, 2, 0, 1])

        report = check_gradients(loss, arrays, eps=1e-6)
        assert max(p.max_rel_err for p in report.params) < 1e-5

    def test_wrong_gradient_is_caught(self):
        from minicnn.autodiff import OPS

        class Bad:
            @staticmethod
            def forward(ctx, x):
                return x * x

            @staticmethod
            def backward(ctx, g):
                return (g,)  # should be 2 x g

        OPS["bad_square"] = Bad
        try:
            report = check_gradients(lambda t, lv: t.record("bad_square", [lv["x"]]).sum(), {"x": [0.7, 1.3]})
        finally:
            del OPS["bad_square"]
        assert not report.passed
        assert "FAIL" in report.lines()[0]

    def test_kink_straddling_elements_are_masked(self):
        # relu input exactly at 0: the +-eps evaluations take different branches.
        report = check_gradients(lambda t, lv: L.relu(lv["x"]).sum(), {"x": [0.0, 1.0, -1.0]})
        assert report["x"].masked == 1
        assert report["x"].checked == 2
        assert report.passed

    def test_kink_signature_records_relu_masks(self):
        tape = Tape()
        L.relu(tape.leaf([-1.0, 2.0]))
        sig = kink_signature(tape)
        assert len(sig) == 1

    def test_budget(self):
        with pytest.raises(BudgetExceededError):
            check_gradients(lambda t, lv: lv["x"].sum(), {"x": np.zeros(30)}, budget=10)
