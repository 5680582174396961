import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from facadet import tensor as T
from facadet.gradcheck import check_gradients
from facadet.tensor import GradientError, ShapeError, Tape, Tensor, backward, no_grad, use_tape


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype), requires_grad=True)


class TestTensorBasics:
    def test_default_dtype_is_float32(self):
        assert Tensor([[1, 2]]).dtype == np.float32

    def test_item_rejects_non_scalar(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_ops_preserve_dtype(self):
        a = Tensor(np.ones((2, 2), np.float32))
        assert (a * 2.0 + 1.0).dtype == np.float32
        assert T.silu(a).dtype == np.float32

    def test_grad_shape_matches_data(self, rng):
        x = leaf(rng.standard_normal((2, 3, 4, 4)))
        with use_tape():
            backward((x * x).sum())
        assert x.grad.shape == x.shape


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_dot(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_zeros(self, rng):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(rng.standard_normal((3, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_gradient_rules(self, rng):
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        g = rng.standard_normal((3, 2))
        with use_tape():
            backward((T.matmul(a, b) * g).sum())
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestSoftmax:
    @pytest.mark.parametrize("row, expected", [
        ([0.0, 0.0], [0.5, 0.5]),
        ([1000.0, 1000.0], [0.5, 0.5]),
        ([0.0, np.log(3.0)], [0.25, 0.75]),
    ])
    def test_examples(self, row, expected):
        out = T.softmax_lastdim(Tensor(np.array([row])))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-7)
        assert np.isfinite(out.data).all()

    @given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax_lastdim(Tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


class TestSilu:
    def test_values(self):
        out = T.silu(Tensor(np.array([0.0, 1.0, 40.0])))
        assert out.data[0] == 0.0
        assert out.data[1] == pytest.approx(0.7310585786, abs=1e-9)
        assert out.data[2] == pytest.approx(40.0, rel=1e-12)


class TestConcatChannels:
    def test_single_is_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        assert T.concat_channels([x]) is x

    def test_shape_and_round_trip(self, rng):
        a = Tensor(rng.standard_normal((2, 2, 3, 3)))
        b = Tensor(rng.standard_normal((2, 3, 3, 3)))
        out = T.concat_channels([a, b])
        assert out.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(out.data[:, :2], a.data)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels([Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 2)))])

    def test_backward_routes_slices(self, rng):
        a, b = leaf(rng.standard_normal((1, 2, 2, 2))), leaf(rng.standard_normal((1, 1, 2, 2)))
        g = rng.standard_normal((1, 3, 2, 2))
        with use_tape():
            backward((T.concat_channels([a, b]) * g).sum())
        np.testing.assert_array_equal(a.grad, g[:, :2])
        np.testing.assert_array_equal(b.grad, g[:, 2:])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.standard_normal((2, 3, 4)))
        with use_tape():
            backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = leaf([1.0, 2.0])
        with use_tape():
            backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = leaf([1.0, 2.0])
        with use_tape(), pytest.raises(GradientError):
            backward(x * 2.0)

    def test_repeated_calls_accumulate(self):
        x = leaf([1.0, 2.0])
        with use_tape() as tape:
            loss = (x * 3.0).sum()
            tape.backward(loss)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_reset_clears_grads_and_records(self):
        x = leaf([1.0, 2.0])
        tape = Tape()
        with use_tape(tape):
            tape.backward((x * x).sum())
        assert len(tape) > 0
        tape.reset()
        assert len(tape) == 0
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_reverse_order_visit(self):
        x = leaf([2.0])
        seen = []
        tape = Tape()
        with use_tape(tape):
            y = x * 3.0
            z = y + 1.0
            loss = z.sum()
        for i, rec in enumerate(tape.records):
            fn = rec.backward
            rec.backward = (lambda fn, i: lambda g: (seen.append(i), fn(g))[1])(fn, i)
        tape.backward(loss)
        assert seen == sorted(seen, reverse=True)
        # every record's inputs were produced before it
        produced = set()
        for rec in tape.records:
            for t in rec.inputs:
                assert not t._is_op or id(t) in produced
            produced.add(id(rec.out))

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with use_tape() as tape, no_grad():
            y = x * 2.0
        assert len(tape) == 0 and not y.requires_grad

    def test_shared_subexpression(self, rng):
        x = leaf(rng.standard_normal(4))
        with use_tape():
            y = T.exp(x)
            backward((y * y + y).sum())
        np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x.data) + np.exp(x.data))


class TestDeterminism:
    def test_bit_identical(self, rng):
        x = rng.standard_normal((2, 8)).astype(np.float32)
        w = rng.standard_normal((8, 3)).astype(np.float32)
        a = T.softmax_lastdim(T.matmul(Tensor(x), Tensor(w))).data
        b = T.softmax_lastdim(T.matmul(Tensor(x), Tensor(w))).data
        assert a.tobytes() == b.tobytes()


UNARY = {
    "exp": T.exp,
    "log": lambda t: T.log(t * t + 1.0),
    "sqrt": lambda t: T.sqrt(t * t + 0.5),
    "atan": T.atan,
    "sigmoid": T.sigmoid,
    "silu": T.silu,
    "softplus": T.softplus,
    "power": lambda t: T.power(t * t + 1.0, 1.5),
    "neg": T.neg,
    "softmax": T.softmax_lastdim,
    "transpose": lambda t: T.transpose(t, (2, 0, 1)),
    "getitem_basic": lambda t: t[:, 1:, ::2],
    "getitem_fancy": lambda t: t[np.array([0, 1, 1]), np.array([2, 0, 2])],
    "mean_axis": lambda t: T.mean(t, axis=1),
}


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, name, rng):
        x = leaf(rng.uniform(-1, 1, (2, 3, 4)))
        errs = check_gradients(lambda: UNARY[name](x), [x], eps=1e-4)
        assert max(errs) <= 1e-3

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "maximum", "minimum"])
    def test_binary_broadcast(self, op, rng):
        a = leaf(rng.uniform(-1, 1, (2, 3, 4)))
        b = leaf(rng.uniform(0.5, 1.5, (3, 1)))
        fn = getattr(T, op)
        errs = check_gradients(lambda: fn(a, b), [a, b], eps=1e-5)
        assert max(errs) <= 1e-3

    def test_bce_with_logits(self, rng):
        x = leaf(rng.uniform(-3, 3, (4, 5)))
        t = rng.uniform(0, 1, (4, 5))
        assert max(check_gradients(lambda: T.bce_with_logits(x, t), [x], eps=1e-4)) <= 1e-3

    def test_bce_matches_definition(self, rng):
        x = rng.uniform(-5, 5, 20)
        t = rng.uniform(0, 1, 20)
        p = 1 / (1 + np.exp(-x))
        np.testing.assert_allclose(T.bce_with_logits(Tensor(x), t).data, -(t * np.log(p) + (1 - t) * np.log(1 - p)))

    @given(hnp.arrays(np.float64, (2, 3), elements=st.floats(-1, 1)),
           hnp.arrays(np.float64, (3, 2), elements=st.floats(-1, 1)))
    def test_matmul_property(self, a, b):
        ta, tb = leaf(a), leaf(b)
        errs = check_gradients(lambda: T.matmul(ta, tb), [ta, tb], eps=1e-5)
        assert max(errs) <= 1e-3
