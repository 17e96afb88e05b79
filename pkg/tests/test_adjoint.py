"""Finite-difference certification of the registered adjoint rules."""

import numpy as np
import pytest

import symdec.decoder  # noqa: F401  (populates the adjoint registry)
import symdec.training  # noqa: F401
from symdec.grid import AdjointError, AdjointRule, Tensor, check_adjoint, ops, registry


class TestCheckAdjoint:
    def test_linear_operation_at_noise_floor(self):
        rule = AdjointRule(
            name="permutation",
            forward=lambda a: ops.rotate90(a, 1),
        )
        rng = np.random.default_rng(0)
        err = check_adjoint(rule, [rng.standard_normal((2, 6, 6))], seed=1)
        assert err < 1e-9

    def test_sigmoid_derivative_quarter_at_zero(self):
        rule = AdjointRule(name="sigmoid", forward=ops.sigmoid)
        x = Tensor(np.zeros((1,), dtype=np.float64), requires_grad=True)
        y = ops.sigmoid(x)
        y.backward(np.ones(1))
        assert x.grad[0] == pytest.approx(0.25, abs=1e-12)
        err = check_adjoint(rule, [np.zeros((3,))], seed=2)
        assert err < 1e-6

    def test_nonfinite_input_reported(self):
        rule = AdjointRule(name="exp", forward=ops.exp)
        with pytest.raises(AdjointError, match="non-finite input"):
            check_adjoint(rule, [np.array([np.nan, 1.0])], seed=0)

    def test_nonfinite_forward_reported(self):
        rule = AdjointRule(name="log", forward=ops.log)
        with pytest.raises(AdjointError, match="non-finite"):
            check_adjoint(rule, [np.array([-1.0, 1.0])], seed=0)

    def test_backward_shape_contract(self):
        rule = AdjointRule(name="sum", forward=lambda a: ops.sum_(a, axis=0))
        rng = np.random.default_rng(3)
        xs = [Tensor(rng.standard_normal((4, 3)))]
        grads = rule.pullback(xs, np.ones(3))
        assert grads[0].shape == (4, 3)


@pytest.mark.parametrize("name", sorted(registry()))
def test_registered_rule_passes_finite_differences(name):
    rule = registry()[name]
    rng = np.random.default_rng(sum(name.encode()))
    inputs = rule.sample_inputs(rng)
    err = check_adjoint(rule, inputs, seed=17)
    assert err < 1e-3, f"{name}: finite-difference mismatch {err}"


class TestBackwardMechanics:
    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([1.0, 2.0], dtype=np.float64), requires_grad=True)
        y = ops.add(ops.mul(x, x), x)  # x^2 + x
        y.backward(np.ones(2))
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_no_grad_suppresses_graph(self):
        from symdec.grid import no_grad

        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = ops.mul(x, x)
        assert not y.requires_grad

    def test_cotangent_shape_checked(self):
        from symdec.grid import GridError

        x = Tensor(np.ones(3), requires_grad=True)
        y = ops.mul(x, x)
        with pytest.raises(GridError):
            y.backward(np.ones(4))

    def test_mismatched_shapes_rejected(self):
        from symdec.grid import GridError

        with pytest.raises(GridError):
            ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
