import math

import numpy as np
import pytest

from conftest import assert_gradients
from quadrecon.autodiff import Linear, MLP, Tape, Tensor, grad_of_grad, no_record, ops
from quadrecon.errors import NonFiniteError, SeedShapeError, ShapeError, UnsupportedSecondOrderError


class TestForwardValues:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            y = x * x
        (g,) = tape.gradient(y, [x])
        assert y.item() == 9.0
        assert g.item() == 6.0

    def test_softplus_at_zero(self):
        assert ops.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_broadcast_add_reduces_gradient(self):
        a = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            out = ops.sum_(a + b)
        ga, gb = tape.gradient(out, [a, b])
        np.testing.assert_array_equal(ga.data, np.ones((4, 3)))
        np.testing.assert_array_equal(gb.data, np.full(3, 4.0))

    def test_unrelated_source_gets_zeros(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(5), requires_grad=True)
        with Tape() as tape:
            out = ops.sum_(a * 2.0)
        (gb,) = tape.gradient(out, [b])
        np.testing.assert_array_equal(gb.data, np.zeros(5))

    def test_numpy_array_on_the_left_defers_to_tensor(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = np.eye(2) @ a
        assert isinstance(out, Tensor)
        assert len(tape.nodes) == 1


class TestGradients:
    @pytest.mark.parametrize(
        "fn",
        [ops.exp, ops.sin, ops.cos, ops.tanh, ops.sigmoid, ops.softplus, ops.silu, ops.neg],
        ids=lambda f: f.__name__,
    )
    def test_elementwise(self, fn, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert_gradients(lambda: fn(x), [x])

    def test_log_sqrt_on_positive_inputs(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
        assert_gradients(lambda: ops.log(x) + ops.sqrt(x), [x])

    def test_division_and_power(self, rng):
        a = Tensor(rng.normal(size=(3,)), requires_grad=True)
        b = Tensor(rng.uniform(1.0, 2.0, size=(3,)), requires_grad=True)
        assert_gradients(lambda: a / b + ops.power(b, 2.5), [a, b])

    def test_matmul_and_reductions(self, rng):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        assert_gradients(lambda: ops.mean(ops.matmul(a, b), axis=0) * ops.sum_(a, axis=(0, 1)), [a, b])

    def test_shape_ops(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

        def build():
            joined = ops.concat([a, b], axis=-1)
            stacked = ops.stack([a, b], axis=0)
            return ops.reshape(joined, (3, 4)) @ np.ones((4, 1)) + ops.sum_(stacked[1] * stacked[0])

        assert_gradients(build, [a, b])

    def test_fancy_index_with_repeats(self, rng):
        table = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        idx = np.array([0, 3, 3, 1])
        assert_gradients(lambda: table[idx] * np.arange(8.0).reshape(4, 2), [table])

    def test_cumsum_where_norm(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        cond = rng.uniform(size=(3, 4)) > 0.5

        def build():
            return ops.cumsum(x, axis=-1) + ops.where(cond, x * 2.0, ops.exp(x)) + ops.normalize(x + 5.0)

        assert_gradients(build, [x])

    def test_first_order_only_ops(self, rng):
        x = Tensor(rng.uniform(0.2, 0.8, size=(6,)), requires_grad=True)
        y = Tensor(rng.uniform(0.2, 0.8, size=(6,)), requires_grad=True)
        assert_gradients(lambda: ops.maximum(x, 0.1) + ops.minimum(y, 0.9) + ops.abs_(x - 0.1) + ops.arcsin(x) + ops.atan2(x, y), [x, y])

    def test_mlp(self, rng):
        mlp = MLP([3, 8, 2], rng, activation=ops.silu)
        x = Tensor(rng.normal(size=(5, 3)))
        params = mlp.parameters()
        assert_gradients(lambda: mlp(x), params)


class TestSecondOrder:
    def test_gradient_of_gradient(self):
        x = Tensor(np.array([1.0, 2.0, -1.5]), requires_grad=True)
        with Tape() as tape:
            y = ops.sum_(x * x * x)
            (g,) = tape.gradient(y, [x], create_graph=True)
            z = ops.sum_(g)
        (gg,) = tape.gradient(z, [x])
        np.testing.assert_allclose(g.data, 3.0 * x.data**2)
        np.testing.assert_allclose(gg.data, 6.0 * x.data)

    def test_grad_of_grad_helper(self, rng):
        w = Tensor(np.array(0.7), requires_grad=True)
        positions = rng.normal(size=(4, 3))
        result = grad_of_grad(lambda x: ops.sum_(x * x, axis=-1) * w, positions, [w])
        np.testing.assert_allclose(result.dsigma_dx, 2.0 * 0.7 * positions)
        np.testing.assert_allclose(result.param_grads[0], 2.0 * positions.sum())

    def test_first_order_op_refuses_create_graph(self):
        x = Tensor(np.array([0.3, -0.2]), requires_grad=True)
        with Tape() as tape:
            y = ops.sum_(ops.abs_(x))
            with pytest.raises(UnsupportedSecondOrderError) as exc:
                tape.gradient(y, [x], create_graph=True)
        assert exc.value.op == "abs"


class TestErrors:
    def test_non_finite_names_the_op(self):
        with pytest.raises(NonFiniteError) as exc:
            ops.log(Tensor(np.array([1.0, 0.0])))
        assert exc.value.op == "log"
        assert exc.value.context == {"op": "log"}

    def test_shape_mismatch_names_the_op(self):
        with pytest.raises(ShapeError) as exc:
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert exc.value.op == "matmul"

    def test_seed_shape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(SeedShapeError):
            tape.gradient(y, [x], seed=np.ones(4))

    def test_seed_weights_output(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        (g,) = tape.gradient(y, [x], seed=np.array([1.0, 0.0, 3.0]))
        np.testing.assert_array_equal(g.data, [2.0, 0.0, 6.0])


class TestRecording:
    def test_no_record_leaves_tape_empty(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_record():
                ops.exp(x)
        assert tape.nodes == []

    def test_untracked_inputs_are_not_recorded(self):
        with Tape() as tape:
            ops.exp(Tensor(np.ones(3)))
        assert tape.nodes == []

    def test_backward_covers_all_leaves(self, rng):
        layer = Linear(3, 2, rng)
        with Tape() as tape:
            out = ops.sum_(layer(Tensor(np.ones((1, 3)))))
        grads = tape.backward(out)
        assert set(map(id, grads)) == {id(layer.weight), id(layer.bias)}
        np.testing.assert_array_equal(grads[layer.bias], np.ones(2))

    def test_state_dict_round_trip(self, rng):
        a, b = MLP([2, 4, 1], rng), MLP([2, 4, 1], np.random.default_rng(99))
        b.load_state_dict(a.state_dict())
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_load_state_dict_rejects_wrong_shape(self, rng):
        mlp = MLP([2, 4, 1], rng)
        state = mlp.state_dict()
        state["layers.0.weight"] = np.zeros((3, 4))
        with pytest.raises(ValueError):
            mlp.load_state_dict(state)
