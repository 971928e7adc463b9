import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textloc.autodiff import (
    ContractError,
    ParameterError,
    ShapeError,
    Tape,
    Tensor,
    add,
    concat,
    embedding,
    gather_rows,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    slice_,
    softmax_rows,
    sum_,
)


class TestMatmul:
    def test_identity_scalar(self):
        out = matmul(Tensor([[1.0]]), Tensor([[1.0]]))
        assert out.data.tolist() == [[1.0]]

    def test_identity_matrix(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = matmul(Tensor(a), Tensor(np.eye(3)))
        np.testing.assert_allclose(out.data, a)

    def test_hand_expansion(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_backward_rule(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
        with Tape() as t:
            c = matmul(a, b)
            t.backward(sum_(c))
        g = np.ones((2, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_associativity(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))
            left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).data
            right = matmul(Tensor(a), matmul(Tensor(b), Tensor(c))).data
            np.testing.assert_allclose(left, right, atol=1e-9)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_stability(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-12)

    def test_closed_form(self):
        out = softmax_rows(Tensor([[1.0, 2.0]]))
        e = np.e
        np.testing.assert_allclose(out.data, [[1 / (1 + e), e / (1 + e)]], rtol=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            softmax_rows(Tensor([[1.0, 2.0]]), temperature=0.0)

    @given(
        st.lists(
            st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=5),
            min_size=1,
            max_size=4,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    @settings(max_examples=80, deadline=None)
    def test_rows_sum_to_one(self, rows):
        out = softmax_rows(Tensor(rows)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


class TestLayerNorm:
    def test_constant_vector(self):
        out = layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)),
                         Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_already_normalized(self):
        out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-5)

    def test_affine_collapse(self):
        out = layer_norm(Tensor([[1.0, 7.0, 2.0]]), Tensor(np.zeros(3)),
                         Tensor(np.full(3, 4.0)))
        np.testing.assert_allclose(out.data, 4.0)

    def test_mean_zero_var_one(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 16))
        out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)),
                         eps=1e-12).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)),
                       Tensor(np.zeros(3)))


class TestBackward:
    def test_identity(self):
        x = Tensor(5.0, requires_grad=True)
        with Tape() as t:
            y = scale_id(x)
            t.backward(y)
        np.testing.assert_allclose(x.grad, 1.0)

    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        with Tape() as t:
            y = mul(x, x)
            t.backward(y)
        np.testing.assert_allclose(x.grad, 6.0)

    def test_non_scalar_terminal(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as t:
            y = mul(x, x)
            with pytest.raises(ContractError):
                t.backward(y)

    def test_accumulation_is_additive(self):
        x = Tensor(2.0, requires_grad=True)
        for _ in range(2):
            with Tape() as t:
                t.backward(mul(x, x))
        np.testing.assert_allclose(x.grad, 8.0)

    def test_linearity_of_separate_tapes(self):
        def grad_of(f):
            x = Tensor(1.5, requires_grad=True)
            with Tape() as t:
                t.backward(f(x))
            return x.grad

        g1 = grad_of(lambda x: mul(x, x))
        g2 = grad_of(lambda x: add(x, x))
        x = Tensor(1.5, requires_grad=True)
        with Tape() as t:
            t.backward(mul(x, x))
        with Tape() as t:
            t.backward(add(x, x))
        np.testing.assert_allclose(x.grad, g1 + g2)

    def test_retained_intermediate_gets_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as t:
            h = mul(x, x)
            h.retain_grad = True
            t.backward(sum_(h))
        np.testing.assert_allclose(h.grad, [1.0, 1.0])

    def test_unretained_intermediate_has_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as t:
            h = mul(x, x)
            t.backward(sum_(h))
        assert h.grad is None


def scale_id(x):
    from textloc.autodiff import scale

    return scale(x, 1.0)


class TestFiniteDifferences:
    """Tape gradients vs central differences on random compositions."""

    @pytest.mark.parametrize("seed", range(20))
    def test_random_small_network(self, seed):
        rng = np.random.default_rng(seed)
        w1 = Tensor(rng.normal(0, 0.5, (3, 4)), requires_grad=True)
        w2 = Tensor(rng.normal(0, 0.5, (4, 2)), requires_grad=True)
        b = Tensor(rng.normal(0, 0.5, 2), requires_grad=True)
        x = rng.normal(size=(2, 3))

        def loss_value():
            h = gelu(matmul(Tensor(x), w1))
            y = add(matmul(h, w2), b)
            p = softmax_rows(y)
            return sum_(mul(p, p)).item()

        with Tape() as t:
            h = gelu(matmul(Tensor(x), w1))
            y = add(matmul(h, w2), b)
            p = softmax_rows(y)
            t.backward(sum_(mul(p, p)))

        h_step = 1e-5
        for p_ in (w1, w2, b):
            flat = p_.data.reshape(-1)
            grad = p_.grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h_step
                up = loss_value()
                flat[i] = orig - h_step
                down = loss_value()
                flat[i] = orig
                fd = (up - down) / (2 * h_step)
                assert abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6) < 1e-4


class TestStructuralOps:
    def test_embedding_scatter(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        ids = np.array([1, 1, 3])
        with Tape() as t:
            out = embedding(table, ids)
            t.backward(sum_(out))
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_allclose(table.grad, expected)

    def test_gather_rows(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
        out = gather_rows(x, np.array([2, 0]))
        np.testing.assert_allclose(out.data[0], x.data[0, 2])
        np.testing.assert_allclose(out.data[1], x.data[1, 0])

    def test_concat_split_roundtrip(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        with Tape() as t:
            c = concat([a, b], axis=0)
            t.backward(sum_(slice_(c, np.s_[2:, :])))
        np.testing.assert_allclose(a.grad, 0.0)
        np.testing.assert_allclose(b.grad, 1.0)

    def test_l2_normalize_unit_rows(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 8))
        out = l2_normalize(Tensor(x)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-9)

    def test_mean_matches_numpy(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(mean(Tensor(x), axis=1).data, x.mean(axis=1))

    def test_reshape_preserves_grad_shape(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape() as t:
            t.backward(sum_(reshape(x, (6,))))
        assert x.grad.shape == (2, 3)

    def test_no_nan_on_finite_inputs(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(0, 100, (4, 4)))
        for op in (lambda v: softmax_rows(v),
                   lambda v: l2_normalize(v),
                   lambda v: gelu(v)):
            assert np.all(np.isfinite(op(x).data))
