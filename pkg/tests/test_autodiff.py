"""Unit tests for the differentiable kernel layer."""

import numpy as np
import pytest

from groupact import autodiff as ad
from groupact.errors import DegenerateInputError, DomainError, ShapeError
from groupact.optim import AdamW, adamw_step, warmup_lr

from gradcheck import check_gradients


def weighted_sum(x, rng):
    """Scalar loss with asymmetric weights; catches transposition bugs."""
    w = ad.Tensor(rng.standard_normal(x.shape))
    return ad.sum_all(ad.mul(x, w))


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        out = ad.matmul(ad.Tensor(eye), ad.Tensor(eye))
        assert np.array_equal(out.data, eye)

    def test_hand_product(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0], [3.0, 4.0]]), ad.Tensor([[0.0], [1.0]]))
        assert np.array_equal(out.data, [[2.0], [4.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            ad.matmul(ad.Tensor(np.zeros((3, 4))), ad.Tensor(np.zeros((2, 2))))
        assert "(3, 4)" in str(exc.value) and "(2, 2)" in str(exc.value)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = ad.Parameter(rng.standard_normal((3, 4)))
        b = ad.Parameter(rng.standard_normal((4, 2)))
        check_gradients(lambda: ad.sum_all(ad.matmul(a, b)), [a, b], tol=1e-6)


class TestRowSoftmax:
    def test_symmetric_row(self):
        out = ad.row_softmax(ad.Tensor([[0.0, 0.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_analytic_row(self):
        out = ad.row_softmax(ad.Tensor([[np.log(3.0), 0.0]]))
        assert np.allclose(out.data, [[0.75, 0.25]], atol=1e-12)

    def test_sharp_temperature(self):
        out = ad.row_softmax(ad.Tensor([[10.0, 0.0]]), temperature=0.1)
        assert out.data[0, 0] > 1.0 - 1e-10

    def test_rows_sum_to_one_over_wide_range(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = ad.Tensor(rng.uniform(-50.0, 50.0, size=(5, 7)))
            out = ad.row_softmax(x)
            assert np.all(out.data >= 0.0)
            assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_temperature_domain(self):
        with pytest.raises(DomainError):
            ad.row_softmax(ad.Tensor([[1.0, 2.0]]), temperature=0.0)
        with pytest.raises(DomainError):
            ad.row_softmax(ad.Tensor([[1.0, 2.0]]), temperature=-1.0)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = ad.Parameter(rng.standard_normal((4, 6)))
        check_gradients(lambda: weighted_sum(ad.row_softmax(x, temperature=0.7),
                                             np.random.default_rng(3)),
                        [x], tol=1e-6)


class TestRowKL:
    def test_zero_when_equal(self):
        p = np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]])
        assert ad.row_kl(ad.Tensor(p), ad.Tensor(p.copy())).item() == 0.0

    def test_one_hot_vs_uniform(self):
        p = ad.Tensor([[1.0, 0.0, 0.0, 0.0]])
        q = ad.Tensor([[0.25, 0.25, 0.25, 0.25]])
        assert ad.row_kl(p, q).item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.row_kl(ad.Tensor(np.ones((2, 3)) / 3), ad.Tensor(np.ones((3, 3)) / 3))

    def test_gradient_through_softmax_logits(self):
        rng = np.random.default_rng(4)
        p = ad.Tensor(ad.row_softmax(ad.Tensor(rng.standard_normal((3, 5)))).data)
        logits = ad.Parameter(rng.standard_normal((3, 5)))
        check_gradients(lambda: ad.row_kl(p, ad.row_softmax(logits)), [logits], tol=1e-6)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = ad.row_softmax(ad.Tensor(rng.standard_normal((2, 4)))).data
            q = ad.row_softmax(ad.Tensor(rng.standard_normal((2, 4)))).data
            kl = ad.row_kl(ad.Tensor(p), ad.Tensor(q)).item()
            assert kl >= 0.0
            if not np.allclose(p, q):
                assert kl > 0.0


class TestRowCrossEntropy:
    def test_one_hot_at_argmax(self):
        p = ad.Tensor([[1.0, 0.0]])
        q = ad.Tensor([[0.9, 0.1]])
        assert ad.row_cross_entropy(p, q).item() == pytest.approx(-np.log(0.9), abs=1e-12)

    def test_uniform_two(self):
        u = ad.Tensor([[0.5, 0.5]])
        assert ad.row_cross_entropy(u, u).item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_ce_minus_kl_is_entropy(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            p = ad.row_softmax(ad.Tensor(rng.standard_normal((3, 5)))).data
            q = ad.row_softmax(ad.Tensor(rng.standard_normal((3, 5)))).data
            ce = ad.row_cross_entropy(ad.Tensor(p), ad.Tensor(q)).item()
            kl = ad.row_kl(ad.Tensor(p), ad.Tensor(q)).item()
            entropy = -(p * np.log(p)).sum() / p.shape[0]
            assert abs((ce - kl) - entropy) < 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(7)
        p = ad.Tensor(ad.row_softmax(ad.Tensor(rng.standard_normal((4, 3)))).data)
        logits = ad.Parameter(rng.standard_normal((4, 3)))
        check_gradients(lambda: ad.row_cross_entropy(p, ad.row_softmax(logits)),
                        [logits], tol=1e-6)


class TestCosineSimilarity:
    def test_unit_diagonal_on_self(self):
        rng = np.random.default_rng(8)
        x = ad.Tensor(rng.standard_normal((5, 4)))
        out = ad.cosine_similarity_matrix(x, x)
        assert np.allclose(np.diag(out.data), 1.0, atol=1e-12)
        assert np.all(np.abs(out.data) <= 1.0 + 1e-9)

    def test_orthogonal_rows(self):
        x = ad.Tensor([[1.0, 0.0]])
        y = ad.Tensor([[0.0, 1.0]])
        assert abs(ad.cosine_similarity_matrix(x, y).data[0, 0]) < 1e-15

    def test_scale_invariance(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 6))
        y = rng.standard_normal((3, 6))
        scales = rng.uniform(0.1, 10.0, size=(4, 1))
        a = ad.cosine_similarity_matrix(ad.Tensor(x), ad.Tensor(y)).data
        b = ad.cosine_similarity_matrix(ad.Tensor(x * scales), ad.Tensor(y)).data
        assert np.abs(a - b).max() < 1e-9

    def test_zero_norm_row_names_index(self):
        x = np.ones((3, 2))
        x[1] = 0.0
        with pytest.raises(DegenerateInputError, match="row 1"):
            ad.cosine_similarity_matrix(ad.Tensor(x), ad.Tensor(np.ones((2, 2))))

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            ad.cosine_similarity_matrix(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 4))))

    def test_gradient(self):
        rng = np.random.default_rng(10)
        x = ad.Parameter(rng.standard_normal((3, 4)))
        y = ad.Parameter(rng.standard_normal((2, 4)))
        check_gradients(lambda: weighted_sum(ad.cosine_similarity_matrix(x, y),
                                             np.random.default_rng(11)),
                        [x, y], tol=1e-6)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = ad.Tensor(np.full((2, 5), 3.7))
        gain = ad.Tensor(np.ones((1, 5)))
        bias = ad.Tensor(np.zeros((1, 5)))
        out = ad.layer_norm(x, gain, bias)
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_row_mean_is_zero(self):
        rng = np.random.default_rng(12)
        x = ad.Tensor(rng.standard_normal((4, 9)))
        out = ad.layer_norm(x, ad.Tensor(np.ones((1, 9))), ad.Tensor(np.zeros((1, 9))))
        assert np.abs(out.data.mean(axis=1)).max() < 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ad.layer_norm(ad.Tensor(np.ones((2, 4))), ad.Tensor(np.ones((1, 3))),
                          ad.Tensor(np.zeros((1, 4))))

    def test_gradient(self):
        rng = np.random.default_rng(13)
        x = ad.Parameter(rng.standard_normal((3, 6)))
        gain = ad.Parameter(rng.uniform(0.5, 1.5, size=(1, 6)))
        bias = ad.Parameter(rng.standard_normal((1, 6)))
        check_gradients(lambda: weighted_sum(ad.layer_norm(x, gain, bias),
                                             np.random.default_rng(14)),
                        [x, gain, bias], tol=1e-6)


class TestStructuralOps:
    """Gradient checks for the plumbing primitives at random small shapes."""

    @pytest.mark.parametrize("seed", range(3))
    def test_broadcast_add_mul(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = ad.Parameter(rng.standard_normal((4, 5)))
        b = ad.Parameter(rng.standard_normal((1, 5)))
        s = ad.Parameter(rng.standard_normal((1, 1)))
        def loss():
            return ad.sum_all(ad.mul(ad.add(ad.mul(x, b), x), ad.add(s, 2.0)))
        check_gradients(loss, [x, b, s], tol=1e-6)

    def test_gather_slice_concat(self):
        rng = np.random.default_rng(200)
        x = ad.Parameter(rng.standard_normal((6, 4)))
        idx = [3, 0, 0, 5, 2]
        def loss():
            g = ad.gather_rows(x, idx)
            left = ad.slice_cols(g, 0, 2)
            right = ad.slice_cols(g, 2, 4)
            joined = ad.concat_cols([right, left])
            stacked = ad.concat_rows([joined, ad.mul(joined, 0.5)])
            return weighted_sum(stacked, np.random.default_rng(201))
        check_gradients(loss, [x], tol=1e-6)

    def test_gelu_div_mean_transpose(self):
        rng = np.random.default_rng(300)
        x = ad.Parameter(rng.standard_normal((5, 3)))
        s = ad.Parameter(np.array([[0.7]]))
        def loss():
            y = ad.gelu(ad.div_by_scalar(x, s))
            return weighted_sum(ad.mean_rows(ad.transpose(y)), np.random.default_rng(301))
        check_gradients(loss, [x, s], tol=1e-6)

    def test_random_shape_sweep(self):
        rng = np.random.default_rng(400)
        for _ in range(5):
            n = int(rng.integers(1, 9))
            d = int(rng.integers(1, 9))
            k = int(rng.integers(1, 9))
            a = ad.Parameter(rng.standard_normal((n, d)))
            b = ad.Parameter(rng.standard_normal((d, k)))
            def loss():
                return weighted_sum(ad.row_softmax(ad.matmul(ad.gelu(a), b)),
                                    np.random.default_rng(401))
            check_gradients(loss, [a, b], tol=1e-6)


class TestAdamW:
    def test_zero_gradients_leave_params_unchanged(self):
        p = ad.Parameter(np.array([[1.5, -2.0]]))
        before = p.data.copy()
        adamw_step([p], lr=0.1, betas=(0.9, 0.999), weight_decay=0.0, step=1, state={})
        assert np.array_equal(p.data, before)

    def test_constant_gradient_monotone_decrease(self):
        p = ad.Parameter(np.array([[1.0]]))
        state = {}
        prev = p.item()
        for step in range(1, 11):
            p.grad[:] = 1.0
            adamw_step([p], lr=0.05, betas=(0.9, 0.999), weight_decay=0.0,
                       step=step, state=state)
            assert p.item() < prev
            prev = p.item()

    def test_hand_computed_first_step(self):
        p = ad.Parameter(np.array([[1.0]]))
        p.grad[:] = 1.0
        adamw_step([p], lr=0.1, betas=(0.9, 0.999), weight_decay=0.0, step=1, state={})
        assert p.item() == pytest.approx(0.9, abs=1e-7)

    def test_frozen_parameter_bit_identical(self):
        frozen = ad.Parameter(np.array([[1.0, 2.0]]), trainable=False)
        live = ad.Parameter(np.array([[3.0, 4.0]]))
        frozen.grad = np.ones_like(frozen.data)   # would move it if applied
        live.grad[:] = 1.0
        before = frozen.data.tobytes()
        adamw_step([frozen, live], lr=0.1, betas=(0.9, 0.999), weight_decay=0.01,
                   step=1, state={})
        assert frozen.data.tobytes() == before
        assert not np.array_equal(live.data, [[3.0, 4.0]])

    def test_decoupled_weight_decay(self):
        p = ad.Parameter(np.array([[2.0]]))
        adamw_step([p], lr=0.1, betas=(0.9, 0.999), weight_decay=0.5, step=1, state={})
        # zero gradient: only the decay term applies
        assert p.item() == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-12)

    def test_optimizer_wrapper_and_warmup(self):
        rng = np.random.default_rng(42)
        p = ad.Parameter(rng.standard_normal((2, 2)))
        opt = AdamW([p], lr=0.1)
        p.grad[:] = 1.0
        opt.step()
        assert opt.step_count == 1
        assert warmup_lr(1e-4, 0, 5) == pytest.approx(2e-5)
        assert warmup_lr(1e-4, 4, 5) == pytest.approx(1e-4)
        assert warmup_lr(1e-4, 17, 5) == pytest.approx(1e-4)
        assert warmup_lr(1e-4, 0, 0) == pytest.approx(1e-4)


class TestGraphMechanics:
    def test_frozen_parameter_gets_no_gradient(self):
        frozen = ad.Parameter(np.ones((2, 2)), trainable=False)
        live = ad.Parameter(np.ones((2, 2)))
        loss = ad.sum_all(ad.matmul(frozen, live))
        loss.backward()
        assert np.array_equal(frozen.grad, np.zeros((2, 2)))
        assert np.any(live.grad)

    def test_gradient_accumulates_across_reuse(self):
        x = ad.Parameter(np.array([[2.0]]))
        loss = ad.sum_all(ad.mul(x, x))     # d(x^2)/dx = 2x
        loss.backward()
        assert x.grad[0, 0] == pytest.approx(4.0)

    def test_backward_requires_scalar(self):
        x = ad.Parameter(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            ad.mul(x, 2.0).backward()

    def test_values_finite_after_forward(self):
        rng = np.random.default_rng(50)
        x = ad.Tensor(rng.standard_normal((4, 4)) * 10)
        out = ad.row_softmax(ad.gelu(ad.matmul(x, ad.transpose(x))))
        assert np.all(np.isfinite(out.data))
