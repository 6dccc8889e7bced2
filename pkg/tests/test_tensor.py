import numpy as np
import pytest

from conftest import check_gradients, finite_difference, rel_error, tape_gradients
from keymatch.tensor import (
    GradTape,
    Tensor,
    backward,
    bmm,
    clamp_min,
    concat_rows,
    exp,
    gather_rows,
    log,
    relu,
    row_softmax,
    scatter_add_rows,
    sinkhorn_normalize,
    slice_rows,
    swap_last_axes,
    weighted_sum,
)


class TestRowSoftmax:
    def test_equal_logits_give_uniform_row(self):
        out = row_softmax(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_max_subtraction_prevents_overflow(self):
        out = row_softmax(Tensor([[100.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data[0, 0], 1.0, atol=1e-15)
        assert out.data[0, 1] < 1e-40

    def test_two_row_example(self):
        # Expected values computed with a 40-digit mpmath evaluation of
        # exp(x) / sum(exp(x)) per row.
        out = row_softmax(Tensor([[1.0, 2.0], [3.0, 1.0]]))
        expected = [
            [0.26894142136999512, 0.73105857863000488],
            [0.88079707797788244, 0.11920292202211756],
        ]
        np.testing.assert_allclose(out.data, expected, atol=1e-4)

    def test_empty_input_raises(self):
        with pytest.raises(ValueError, match="empty input"):
            row_softmax(Tensor(np.zeros((0, 3))))

    def test_rows_sum_to_one_up_to_512(self, rng):
        for shape in [(2, 3), (64, 64), (512, 512)]:
            m = rng.normal(scale=50.0, size=shape)
            out = row_softmax(Tensor(m))
            np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(out.data >= 0.0)


class TestSinkhorn:
    def test_single_entry_normalizes_to_one(self):
        np.testing.assert_array_equal(sinkhorn_normalize(Tensor([[5.0]])).data, [[1.0]])

    def test_doubly_stochastic_fixed_point(self, rng):
        # A doubly-stochastic matrix built by normalizing a random one.
        m = rng.uniform(0.5, 2.0, size=(4, 4))
        for _ in range(500):
            m /= m.sum(axis=1, keepdims=True)
            m /= m.sum(axis=0, keepdims=True)
        m /= m.sum(axis=1, keepdims=True)
        out = sinkhorn_normalize(Tensor(np.log(m)), max_iters=50, tol=1e-9)
        np.testing.assert_allclose(out.data, m, atol=1e-6)

    def test_two_by_two_example(self):
        # Fixed point computed by iterating the normalization in an
        # independent numpy script on exp(K) = [[2, 1], [1, 2]].
        k = Tensor(np.log([[2.0, 1.0], [1.0, 2.0]]))
        out = sinkhorn_normalize(k, max_iters=100, tol=1e-9)
        np.testing.assert_allclose(out.data, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-6)

    def test_square_rows_and_columns_converge(self, rng):
        for n in (2, 5, 16):
            k = rng.normal(scale=2.0, size=(n, n))
            out = sinkhorn_normalize(Tensor(k), max_iters=500, tol=1e-9).data
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
            np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)

    def test_rectangular_row_sums_one_column_sums_below_one(self, rng):
        k = rng.normal(scale=2.0, size=(8, 12))
        out = sinkhorn_normalize(Tensor(k), max_iters=500, tol=1e-9).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out.sum(axis=0) <= 1.0 + 1e-6)

    def test_source_larger_than_target_raises(self):
        with pytest.raises(ValueError, match="source larger than target"):
            sinkhorn_normalize(Tensor(np.zeros((3, 2))))

    def test_empty_input_raises(self):
        with pytest.raises(ValueError, match="empty input"):
            sinkhorn_normalize(Tensor(np.zeros((0, 2))))


class TestBackward:
    def test_square_function(self):
        x = Tensor(3.0)
        with GradTape() as tape:
            tape.watch(x)
            y = x * x
        grads = backward(y, tape)
        assert grads[x] == pytest.approx(6.0)

    def test_softmax_jacobian_closed_form(self):
        # d softmax(x)[0] / d x[0] = s0 * (1 - s0) for a single row.
        x = Tensor([[0.4, -1.3]])
        with GradTape() as tape:
            tape.watch(x)
            s = row_softmax(x)
            picked = (s * Tensor([[1.0, 0.0]])).sum()
        grads = backward(picked, tape)
        s0 = row_softmax(Tensor([[0.4, -1.3]])).data[0, 0]
        assert grads[x][0, 0] == pytest.approx(s0 * (1 - s0), rel=1e-12)

    def test_five_op_chain_matches_finite_differences(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        c = Tensor(rng.normal(size=(3, 5)), requires_grad=True)

        def build():
            scores = a @ b + c
            probs = row_softmax(scores)
            return log(clamp_min(probs, 1e-12)).sum()

        check_gradients(build, [a, b, c], tol=1e-4)

    def test_unused_parameter_gets_exact_zero(self):
        x = Tensor(2.0)
        unused = Tensor(np.ones((2, 2)))
        with GradTape() as tape:
            tape.watch(x, unused)
            y = x * x
        grads = backward(y, tape)
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))

    def test_non_scalar_loss_raises(self):
        x = Tensor([1.0, 2.0])
        with GradTape() as tape:
            tape.watch(x)
            y = x * x
        with pytest.raises(ValueError, match="scalar"):
            backward(y, tape)

    def test_determinism_bit_identical(self, rng):
        def run(seed):
            r = np.random.default_rng(seed)
            a = Tensor(r.normal(size=(6, 6)))
            b = Tensor(r.normal(size=(6, 6)))
            return row_softmax(a @ b).data

        assert np.array_equal(run(11), run(11))


def _projection_loss(out, proj):
    return (out * Tensor(proj)).sum()


class TestPrimitiveGradients:
    """Finite-difference checks for every primitive the pipeline records."""

    def test_add_sub_mul_div(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)) + 3.0, requires_grad=True)
        proj = [rng.normal(size=(3, 4)) for _ in range(4)]

        def build():
            return (
                _projection_loss(a + b, proj[0])
                + _projection_loss(a - b, proj[1])
                + _projection_loss(a * b, proj[2])
                + _projection_loss(a / b, proj[3])
            )

        check_gradients(build, [a, b])

    def test_broadcasting_add(self, rng):
        a = Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 5, 4)), requires_grad=True)
        proj = rng.normal(size=(3, 5, 4))
        check_gradients(lambda: _projection_loss(a - b, proj), [a, b])

    def test_matmul_and_transpose(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        proj = rng.normal(size=(2, 3))
        check_gradients(lambda: _projection_loss((a @ b).T, proj), [a, b])

    def test_bmm_and_swap_last_axes(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        proj = rng.normal(size=(2, 3, 3))
        check_gradients(
            lambda: _projection_loss(bmm(a, swap_last_axes(b)), proj), [a, b]
        )

    def test_relu_away_from_kink(self, rng):
        vals = rng.normal(size=(4, 4))
        vals[np.abs(vals) < 0.1] += 0.2
        a = Tensor(vals, requires_grad=True)
        proj = rng.normal(size=(4, 4))
        check_gradients(lambda: _projection_loss(relu(a), proj), [a])

    def test_exp_log_clamp(self, rng):
        a = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
        proj = [rng.normal(size=(3, 3)) for _ in range(3)]

        def build():
            return (
                _projection_loss(exp(a), proj[0])
                + _projection_loss(log(a), proj[1])
                + _projection_loss(clamp_min(a, 1.0 + 1e-3), proj[2])
            )

        check_gradients(build, [a])

    def test_sum_axes_and_reshape(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

        proj0 = rng.normal(size=4)

        def build():
            return (
                _projection_loss(a.sum(axis=0), proj0)
                + _projection_loss(a.sum(axis=1, keepdims=True), np.ones((3, 1)))
                + _projection_loss(a.reshape((2, 6)), np.full((2, 6), 0.7))
                + a.sum()
            )

        check_gradients(build, [a])

    def test_row_softmax(self, rng):
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        proj = rng.normal(size=(4, 5))
        check_gradients(lambda: _projection_loss(row_softmax(a), proj), [a])

    def test_gather_and_scatter_by_edge_index(self, rng):
        a = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        idx = np.array([0, 2, 2, 4, 1, 0])
        proj_g = rng.normal(size=(6, 3))
        proj_s = rng.normal(size=(4, 3))

        def build():
            gathered = gather_rows(a, idx)
            scattered = scatter_add_rows(gathered, np.array([3, 0, 1, 1, 2, 3]), 4)
            return _projection_loss(gathered, proj_g) + _projection_loss(scattered, proj_s)

        check_gradients(build, [a])

    def test_concat_and_slice_rows(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        proj = rng.normal(size=(3, 3))
        check_gradients(
            lambda: _projection_loss(slice_rows(concat_rows([a, b]), 1, 4), proj),
            [a, b],
        )

    def test_weighted_sum(self, rng):
        mats = [Tensor(rng.normal(size=(3, 3)), requires_grad=True) for _ in range(3)]
        w = Tensor(rng.normal(size=3), requires_grad=True)
        proj = rng.normal(size=(3, 3))
        check_gradients(
            lambda: _projection_loss(weighted_sum(mats, w), proj), mats + [w]
        )

    def test_sinkhorn_composite_gradient(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        proj = rng.normal(size=(3, 4))
        check_gradients(
            lambda: _projection_loss(sinkhorn_normalize(a, max_iters=5), proj), [a]
        )


class TestWeightedSumValues:
    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            weighted_sum([Tensor(np.ones((2, 2)))], Tensor(np.ones(2)))

    def test_linear_combination(self, rng):
        mats = [rng.normal(size=(2, 3)) for _ in range(2)]
        w = np.array([0.5, -1.5])
        out = weighted_sum([Tensor(m) for m in mats], Tensor(w))
        np.testing.assert_allclose(out.data, 0.5 * mats[0] - 1.5 * mats[1], atol=1e-15)


def test_gradients_through_repeated_use(rng):
    # One tensor feeding several operations accumulates gradient once per use.
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    proj = rng.normal(size=(3, 3))

    def build():
        return _projection_loss(x * x + x, proj)

    grads = tape_gradients(build, [x])
    fd = finite_difference(lambda: build().item(), x.data)
    assert rel_error(grads[x], fd) < 1e-4
