import numpy as np
import pytest

from convnilm import autodiff as ad
from convnilm.autodiff import Tensor


def _grads(loss_fn, *arrays):
    with ad.fresh_tape() as tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = loss_fn(*leaves)
        out = tape.backward(loss, leaves)
    return [out[t.node].data for t in leaves]


class TestElementwise:
    def test_mul_hand(self):
        out = ad.mul(Tensor([1, 2, 3]), Tensor([4, 5, 6]))
        np.testing.assert_array_equal(out.data, [4, 10, 18])

    def test_add_zero_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(ad.add(Tensor(x), 0.0).data, x)

    def test_elementwise_kinds(self):
        a, b = Tensor([6.0, 8.0]), Tensor([2.0, 4.0])
        assert ad.elementwise("sub", a, b).data.tolist() == [4, 4]
        assert ad.elementwise("div", a, b).data.tolist() == [3, 2]
        with pytest.raises(ValueError):
            ad.elementwise("pow", a, b)

    def test_grad_of_product_is_other_factor(self, rng):
        a, b = rng.normal(size=5), rng.normal(size=5)
        ga, gb = _grads(lambda x, y: (x * y).sum(), a, b)
        np.testing.assert_allclose(ga, b, rtol=0, atol=1e-15)
        np.testing.assert_allclose(gb, a, rtol=0, atol=1e-15)
        assert ad.grad_check(lambda x, y: (x * y).sum(), [a, b], eps=1e-6) < 1e-4

    def test_broadcast_trailing_extent_one(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))
        out = ad.add(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.data, a + b)
        _, gb = _grads(lambda x, y: (x * y).sum(), a, b)
        np.testing.assert_allclose(gb, a.sum(axis=(0, 2))[:, None], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_division_by_zero(self):
        with pytest.raises(ZeroDivisionError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_nonfinite_result_raises(self):
        with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
            ad.exp(Tensor([1e4]))


class TestReduce:
    def test_sum_axis(self):
        out = ad.reduce("sum", Tensor([[1, 2], [3, 4]]), axes=[1])
        assert out.data.tolist() == [3, 7]

    def test_mean_of_constant(self):
        assert ad.reduce("mean", Tensor(np.full((2, 3), 2.5))).item() == 2.5

    def test_mean_gradient_quarter(self):
        (g,) = _grads(lambda x: x.mean(), np.arange(4.0))
        np.testing.assert_array_equal(g, [0.25] * 4)
        assert ad.grad_check(lambda x: x.mean(), [np.arange(4.0)]) < 1e-4

    def test_empty_axes_is_identity(self, rng):
        x = rng.normal(size=(2, 2))
        np.testing.assert_array_equal(ad.reduce("sum", Tensor(x), axes=[]).data, x)

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            ad.reduce("sum", Tensor(np.ones((2, 2))), axes=[2])

    def test_max_gradient_splits_ties(self):
        (g,) = _grads(lambda x: x.max(), np.array([1.0, 3.0, 3.0]))
        np.testing.assert_array_equal(g, [0, 0.5, 0.5])


class TestBackward:
    def test_linear(self):
        (g,) = _grads(lambda x: x.sum(), np.zeros(3))
        np.testing.assert_array_equal(g, [1, 1, 1])

    def test_square(self):
        (g,) = _grads(lambda x: (x * x).sum(), np.array([2.0, -3.0]))
        np.testing.assert_array_equal(g, [4, -6])

    def test_unused_leaf_gets_zero(self):
        ga, gb = _grads(lambda x, y: (x * 2.0).sum(), np.ones(2), np.ones(3))
        np.testing.assert_array_equal(ga, [2, 2])
        np.testing.assert_array_equal(gb, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        with ad.fresh_tape() as tape:
            x = Tensor(np.ones(3), requires_grad=True)
            with pytest.raises(ValueError):
                tape.backward(x * 2.0, [x])

    def test_fan_out_accumulates(self):
        (g,) = _grads(lambda x: (x * x + x).sum(), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(g, [3, 5])

    def test_clear_keeps_forward_values(self):
        with ad.fresh_tape() as tape:
            x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
            y = x * 3.0
            tape.clear()
            assert len(tape.records) == 0
        np.testing.assert_array_equal(y.data, [3, 6])

    def test_tape_topological(self):
        with ad.fresh_tape() as tape:
            x = Tensor(np.ones(2), requires_grad=True)
            ((x * 2.0).sum() + x.sum())
            seen = {x.node}
            for rec in tape.records:
                assert all(i in seen for i in rec.inputs if i is not None)
                seen.add(rec.output)

    def test_no_grad_records_nothing(self):
        with ad.fresh_tape() as tape, ad.no_grad():
            x = Tensor(np.ones(2), requires_grad=True)
            y = x * 2.0
            assert not y.requires_grad
            assert len(tape.records) == 0

    def test_constants_not_on_tape(self):
        with ad.fresh_tape() as tape:
            x = Tensor(np.ones(2), requires_grad=True)
            c = Tensor(np.ones(2))
            (x * c).sum()
            assert c.node is None
            assert all(ids == (x.node, None) for ids in [tape.records[0].inputs])


class TestGradCheck:
    def test_linear_is_exact(self, rng):
        assert ad.grad_check(lambda x: x.sum(), [rng.uniform(-1, 1, 8)]) < 1e-10

    def test_square(self, rng):
        assert ad.grad_check(lambda x: (x * x).sum(), [rng.uniform(-1, 1, 8)], eps=1e-6) < 1e-4

    @pytest.mark.parametrize("op", [ad.exp, ad.sigmoid, ad.neg,
                                    lambda t: ad.power(t, 3.0),
                                    lambda t: ad.leaky_relu(t, 0.1),
                                    lambda t: ad.cumsum(t),
                                    lambda t: ad.pad_last(t, 2, 1),
                                    lambda t: t[1:3] * t[0:2]])
    def test_unary_ops(self, op, rng):
        x = rng.uniform(0.2, 1.0, 6) * rng.choice([-1, 1], 6)
        w = rng.normal(size=op(Tensor(x)).shape)
        assert ad.grad_check(lambda t: (op(t) * Tensor(w)).sum(), [x]) < 1e-4

    def test_log_sqrt_positive(self, rng):
        x = rng.uniform(0.5, 2.0, 5)
        assert ad.grad_check(lambda t: (ad.log(t) + ad.sqrt(t)).sum(), [x]) < 1e-4

    def test_prelu(self, rng):
        x = rng.uniform(0.2, 1.0, (2, 4)) * rng.choice([-1, 1], (2, 4))
        alpha = np.array([0.3])
        assert ad.grad_check(lambda t, a: (ad.prelu(t, a) ** 2.0).sum(), [x, alpha]) < 1e-4


def test_precision_switch():
    try:
        ad.set_precision("float32")
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        ad.set_precision("float64")
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_precision("float16")
