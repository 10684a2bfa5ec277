import numpy as np
import pytest

from omniad import autodiff as ad
from omniad import ops
from omniad.autodiff import Tape, Tensor, backward
from omniad.errors import ConfigError, ContractError, DimensionError
from omniad.gradcheck import grad_check
from omniad.optim import AdamW

from oracles import (
    naive_bilinear_resize,
    naive_conv2d,
    naive_depthwise_conv2d,
    naive_matmul,
    naive_mha,
    naive_pointwise_conv,
    naive_softmax_rows,
)


def rand(rng, *shape):
    return rng.standard_normal(shape)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(ad.matmul(a, b).data, b.data)

    def test_hand_expansion(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(ad.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_zero_annihilates(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.arange(6.0).reshape(3, 2))
        assert np.array_equal(ad.matmul(a, b).data, np.zeros((2, 2)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as exc:
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rand(rng, 5, 7)
        b = rand(rng, 7, 3)
        got = ad.matmul(Tensor(a), Tensor(b)).data
        assert np.allclose(got, naive_matmul(a, b), atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        out = ops.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rand(rng, 4, 6)
        base = ops.softmax_rows(Tensor(x)).data
        shifted = ops.softmax_rows(Tensor(x + 123.456)).data
        assert np.allclose(base, shifted, atol=1e-12)
        assert np.array_equal(base.argmax(axis=1), shifted.argmax(axis=1))

    def test_two_element_row(self):
        out = ops.softmax_rows(Tensor([[0.0, np.log(3.0)]]))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 8, 5) * 30.0
        out = ops.softmax_rows(Tensor(x)).data
        assert np.all(out >= 0.0)
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 6, 4)
        got = ops.softmax_rows(Tensor(x)).data
        assert np.allclose(got, naive_softmax_rows(x), atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(5.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(x)
        backward(loss, tape)
        assert np.array_equal(x.grad, np.ones(5))

    def test_half_square_gives_identity(self):
        x = Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
        with Tape() as tape:
            loss = ad.scale(ad.sum_all(ad.mul(x, x)), 0.5)
        backward(loss, tape)
        assert np.allclose(x.grad, x.data, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(x)
        backward(loss, tape)
        backward(loss, tape)
        assert np.array_equal(x.grad, np.full(2, 2.0))

    def test_shared_input_grads_do_not_alias(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        with Tape() as tape:
            s = ad.add(x, y)
            loss = ad.sum_all(ad.mul(s, x))
        backward(loss, tape)
        # d/dx of x*(x+y) = 2x + y; d/dy = x
        assert np.allclose(x.grad, 2 * x.data + y.data)
        assert np.allclose(y.grad, x.data)


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = AdamW({"p": p}, lr=1e-3, weight_decay=0.0)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        p = Tensor(np.array(1.0), requires_grad=True)
        opt = AdamW({"p": p}, lr=1e-3, weight_decay=0.0)
        p.grad = np.array(1.0)
        opt.step()
        # m_hat = v_hat = 1 after bias correction, so the update is lr/(1+eps).
        expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8))
        assert abs(float(p.data) - expected) < 1e-15
        assert abs(float(p.data) - 0.999) < 1e-10

    def test_decay_only_step(self):
        p = Tensor(np.array([4.0, -1.0]), requires_grad=True)
        opt = AdamW({"p": p}, lr=1e-3, weight_decay=0.1)
        p.grad = np.zeros(2)
        opt.step()
        assert np.allclose(p.data, np.array([4.0, -1.0]) * (1.0 - 1e-4), atol=1e-15)

    def test_none_grad_skipped(self):
        p = Tensor(np.array([4.0]), requires_grad=True)
        opt = AdamW({"p": p}, lr=1e-3, weight_decay=0.1)
        opt.step()
        assert np.array_equal(p.data, [4.0])


class TestDepthwiseConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(4)
        x = rand(rng, 5, 6, 3)
        k = np.zeros((3, 3, 3))
        k[1, 1, :] = 1.0
        out = ops.depthwise_conv2d(Tensor(x), Tensor(k))
        assert np.array_equal(out.data, x)

    def test_single_pixel_padding(self):
        rng = np.random.default_rng(5)
        x = rand(rng, 1, 1, 4)
        k = rand(rng, 3, 3, 4)
        out = ops.depthwise_conv2d(Tensor(x), Tensor(k))
        assert np.allclose(out.data[0, 0], x[0, 0] * k[1, 1], atol=1e-15)

    def test_matches_loop_oracle_exactly(self):
        rng = np.random.default_rng(6)
        x = rand(rng, 4, 4, 2)
        k = rand(rng, 3, 3, 2)
        out = ops.depthwise_conv2d(Tensor(x), Tensor(k))
        assert np.array_equal(out.data, naive_depthwise_conv2d(x, k))

    def test_loop_oracle_up_to_8x8x4(self):
        rng = np.random.default_rng(7)
        for h, w, c, k in [(8, 8, 4, 3), (6, 7, 3, 5), (8, 5, 4, 5)]:
            x = rand(rng, h, w, c)
            kern = rand(rng, k, k, c)
            out = ops.depthwise_conv2d(Tensor(x), Tensor(kern))
            assert np.array_equal(out.data, naive_depthwise_conv2d(x, kern))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ops.depthwise_conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((4, 4, 2))))


class TestPointwiseConv:
    def test_identity(self):
        rng = np.random.default_rng(8)
        x = rand(rng, 3, 4, 5)
        out = ops.pointwise_conv(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5)))
        assert np.allclose(out.data, x, atol=1e-15)

    def test_channel_sum_map(self):
        rng = np.random.default_rng(9)
        x = rand(rng, 2, 2, 2)
        w = np.array([[1.0, 0.0], [1.0, 0.0]])
        out = ops.pointwise_conv(Tensor(x), Tensor(w))
        assert np.allclose(out.data[..., 0], x[..., 0] + x[..., 1], atol=1e-15)
        assert np.array_equal(out.data[..., 1], np.zeros((2, 2)))

    def test_zero_input_broadcasts_bias(self):
        b = np.array([0.5, -1.5, 2.0])
        out = ops.pointwise_conv(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((4, 3))), Tensor(b))
        assert np.array_equal(out.data, np.broadcast_to(b, (2, 3, 3)))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(10)
        x = rand(rng, 3, 5, 4)
        w = rand(rng, 4, 6)
        b = rand(rng, 6)
        out = ops.pointwise_conv(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, naive_pointwise_conv(x, w, b), atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            ops.pointwise_conv(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((4, 2))))


class TestConv2d:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        for stride, padding in [(1, 1), (2, 1), (1, 0), (2, 0)]:
            x = rand(rng, 6, 7, 3)
            k = rand(rng, 3, 3, 3, 4)
            b = rand(rng, 4)
            out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding)
            assert np.allclose(out.data, naive_conv2d(x, k, b, stride, padding), atol=1e-12)

    def test_stride_two_halves_even_extents(self):
        x = Tensor(np.zeros((8, 8, 2)))
        out = ops.conv2d(x, Tensor(np.zeros((3, 3, 2, 5))), stride=2, padding=1)
        assert out.data.shape == (4, 4, 5)


class TestBilinearResize:
    def test_identity_is_bitwise(self):
        rng = np.random.default_rng(12)
        x = rand(rng, 5, 7, 3)
        out = ops.bilinear_resize(Tensor(x), (5, 7))
        assert np.array_equal(out.data, x)

    def test_constant_stays_constant(self):
        x = np.full((3, 3, 2), 1.75)
        out = ops.bilinear_resize(Tensor(x), (8, 5))
        assert np.allclose(out.data, 1.75, atol=1e-12)

    def test_2x2_to_4x4_matches_scalar_reference(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1)
        out = ops.bilinear_resize(Tensor(x), (4, 4))
        assert np.allclose(out.data, naive_bilinear_resize(x, (4, 4)), atol=1e-12)

    def test_random_resizes_match_scalar_reference(self):
        rng = np.random.default_rng(13)
        for hw_in, hw_out in [((4, 6), (9, 3)), ((8, 8), (16, 16)), ((5, 5), (2, 7))]:
            x = rand(rng, hw_in[0], hw_in[1], 2)
            out = ops.bilinear_resize(Tensor(x), hw_out)
            assert np.allclose(out.data, naive_bilinear_resize(x, hw_out), atol=1e-12)


class TestMultiHeadAttention:
    def _weights(self, rng, d):
        return ops.MhaWeights(*(Tensor(rand(rng, d, d)) for _ in range(4)))

    def test_single_source_token_ignores_query_values(self):
        rng = np.random.default_rng(14)
        d, h = 6, 2
        w = self._weights(rng, d)
        k = Tensor(rand(rng, 1, d))
        v = Tensor(rand(rng, 1, d))
        out1 = ops.multi_head_attention(Tensor(rand(rng, 4, d)), k, v, w, h)
        out2 = ops.multi_head_attention(Tensor(rand(rng, 4, d)), k, v, w, h)
        assert np.allclose(out1.data, out2.data, atol=1e-12)
        expected = (v.data @ w.wv.data) @ w.wo.data
        assert np.allclose(out1.data, np.broadcast_to(expected, (4, d)), atol=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(15)
        q = rand(rng, 3, 4)
        kv = rand(rng, 5, 4)
        w = self._weights(rng, 4)
        out = ops.multi_head_attention(Tensor(q), Tensor(kv), Tensor(kv), w, 2)
        ref = naive_mha(q, kv, kv, w.wq.data, w.wk.data, w.wv.data, w.wo.data, 2)
        assert np.allclose(out.data, ref, atol=1e-10)

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(16)
        for _ in range(25):
            n_heads = int(rng.choice([1, 2, 4]))
            d = n_heads * int(rng.integers(1, 16 // n_heads + 1))
            nq = int(rng.integers(1, 17))
            ns = int(rng.integers(1, 17))
            q, k, v = rand(rng, nq, d), rand(rng, ns, d), rand(rng, ns, d)
            w = self._weights(rng, d)
            out = ops.multi_head_attention(Tensor(q), Tensor(k), Tensor(v), w, n_heads)
            ref = naive_mha(q, k, v, w.wq.data, w.wk.data, w.wv.data, w.wo.data, n_heads)
            assert np.abs(out.data - ref).max() < 1e-10

    def test_zero_output_projection(self):
        rng = np.random.default_rng(17)
        d = 4
        w = self._weights(rng, d)
        w.wo.data[:] = 0.0
        out = ops.multi_head_attention(
            Tensor(rand(rng, 3, d)), Tensor(rand(rng, 5, d)), Tensor(rand(rng, 5, d)), w, 2)
        assert np.array_equal(out.data, np.zeros((3, d)))

    def test_indivisible_heads_rejected(self):
        rng = np.random.default_rng(18)
        w = self._weights(rng, 6)
        with pytest.raises(ConfigError):
            ops.multi_head_attention(
                Tensor(rand(rng, 2, 6)), Tensor(rand(rng, 2, 6)), Tensor(rand(rng, 2, 6)), w, 4)


class TestFiniteOutputs:
    def test_ops_stay_finite_on_finite_inputs(self):
        rng = np.random.default_rng(19)
        x = rand(rng, 6, 6, 4) * 50.0
        tok = rand(rng, 9, 8) * 50.0
        checks = [
            ops.softmax_rows(Tensor(tok)).data,
            ops.relu(Tensor(tok)).data,
            ops.gelu(Tensor(tok)).data,
            ops.depthwise_conv2d(Tensor(x), Tensor(rand(rng, 3, 3, 4))).data,
            ops.pointwise_conv(Tensor(x), Tensor(rand(rng, 4, 4))).data,
            ops.bilinear_resize(Tensor(x), (11, 3)).data,
            ops.layer_norm(Tensor(tok), Tensor(np.ones(8)), Tensor(np.zeros(8))).data,
        ]
        for arr in checks:
            assert np.isfinite(arr).all()


class TestGradChecks:
    """Central finite differences at h=1e-3 against taped gradients."""

    def _proj(self, rng, shape):
        return rng.standard_normal(shape)

    def test_sum_of_squares_near_exact(self):
        x = Tensor(np.array([0.3, -1.2, 2.2]))
        err = grad_check(lambda t: ad.sum_all(ad.mul(t, t)), x)
        assert err < 1e-8

    def test_softmax_scalar(self):
        rng = np.random.default_rng(20)
        r = self._proj(rng, (4, 5))
        x = Tensor(rand(rng, 4, 5))
        err = grad_check(lambda t: ad.sum_all(ad.mul(ops.softmax_rows(t), Tensor(r))), x)
        assert err < 1e-6

    def test_matmul(self):
        rng = np.random.default_rng(21)
        b = Tensor(rand(rng, 4, 3))
        r = Tensor(self._proj(rng, (5, 3)))
        x = Tensor(rand(rng, 5, 4))
        assert grad_check(lambda t: ad.sum_all(ad.mul(ad.matmul(t, b), r)), x) < 1e-6
        x2 = Tensor(rand(rng, 5, 4))
        b.requires_grad = True
        assert grad_check(lambda t: ad.sum_all(ad.mul(ad.matmul(Tensor(x2.data), t), r)), b) < 1e-6

    def test_mha_all_inputs(self):
        rng = np.random.default_rng(22)
        d, n_heads = 6, 2
        w = ops.MhaWeights(*(Tensor(rand(rng, d, d) * 0.5, requires_grad=True) for _ in range(4)))
        q = Tensor(rand(rng, 3, d))
        k = Tensor(rand(rng, 4, d))
        v = Tensor(rand(rng, 4, d))
        r = Tensor(self._proj(rng, (3, d)))

        def run():
            return ad.sum_all(ad.mul(ops.multi_head_attention(q, k, v, w, n_heads), r))

        for t in [q, k, v] + w.tensors():
            assert grad_check(lambda _x: run(), t) < 1e-4

    def test_depthwise_conv(self):
        rng = np.random.default_rng(23)
        x = Tensor(rand(rng, 4, 5, 3))
        kern = Tensor(rand(rng, 3, 3, 3), requires_grad=True)
        r = Tensor(self._proj(rng, (4, 5, 3)))

        def run():
            return ad.sum_all(ad.mul(ops.depthwise_conv2d(x, kern), r))

        assert grad_check(lambda _x: run(), x) < 1e-6
        assert grad_check(lambda _x: run(), kern) < 1e-6

    def test_pointwise_conv(self):
        rng = np.random.default_rng(24)
        x = Tensor(rand(rng, 3, 4, 5))
        w = Tensor(rand(rng, 5, 2), requires_grad=True)
        b = Tensor(rand(rng, 2), requires_grad=True)
        r = Tensor(self._proj(rng, (3, 4, 2)))

        def run():
            return ad.sum_all(ad.mul(ops.pointwise_conv(x, w, b), r))

        for t in (x, w, b):
            assert grad_check(lambda _x: run(), t) < 1e-6

    def test_conv2d_strided(self):
        rng = np.random.default_rng(25)
        x = Tensor(rand(rng, 6, 6, 3))
        kern = Tensor(rand(rng, 3, 3, 3, 4), requires_grad=True)
        b = Tensor(rand(rng, 4), requires_grad=True)
        r = Tensor(self._proj(rng, (3, 3, 4)))

        def run():
            return ad.sum_all(ad.mul(ops.conv2d(x, kern, b, stride=2, padding=1), r))

        for t in (x, kern, b):
            assert grad_check(lambda _x: run(), t) < 1e-6

    def test_bilinear_resize(self):
        rng = np.random.default_rng(26)
        x = Tensor(rand(rng, 4, 5, 2))
        r = Tensor(self._proj(rng, (7, 3, 2)))
        assert grad_check(
            lambda t: ad.sum_all(ad.mul(ops.bilinear_resize(t, (7, 3)), r)), x) < 1e-6

    def test_layer_norm(self):
        rng = np.random.default_rng(27)
        x = Tensor(rand(rng, 5, 6))
        gain = Tensor(1.0 + 0.1 * rand(rng, 6), requires_grad=True)
        bias = Tensor(0.1 * rand(rng, 6), requires_grad=True)
        r = Tensor(self._proj(rng, (5, 6)))

        def run():
            return ad.sum_all(ad.mul(ops.layer_norm(x, gain, bias), r))

        for t in (x, gain, bias):
            assert grad_check(lambda _x: run(), t) < 1e-4

    def test_batch_norm_training_mode(self):
        rng = np.random.default_rng(28)
        x = Tensor(rand(rng, 4, 5, 3))
        gain = Tensor(1.0 + 0.1 * rand(rng, 3), requires_grad=True)
        bias = Tensor(0.1 * rand(rng, 3), requires_grad=True)
        r = Tensor(self._proj(rng, (4, 5, 3)))

        def run():
            out, _, _ = ops.batch_norm2d(x, gain, bias)
            return ad.sum_all(ad.mul(out, r))

        for t in (x, gain, bias):
            assert grad_check(lambda _x: run(), t) < 1e-4

    def test_gelu(self):
        rng = np.random.default_rng(29)
        x = Tensor(rand(rng, 4, 4))
        r = Tensor(self._proj(rng, (4, 4)))
        assert grad_check(lambda t: ad.sum_all(ad.mul(ops.gelu(t), r)), x) < 1e-4

    def test_slice_concat_transpose_reshape(self):
        rng = np.random.default_rng(30)
        x = Tensor(rand(rng, 4, 6))
        r = Tensor(self._proj(rng, (4, 6)))

        def run(t):
            left = ad.slice_last(t, 0, 3)
            right = ad.slice_last(t, 3, 6)
            merged = ad.concat_last([right, left])
            back = ad.reshape(ad.transpose(ad.transpose(merged)), (4, 6))
            return ad.sum_all(ad.mul(back, r))

        assert grad_check(run, x) < 1e-6


class TestNaiveOracleAgreement:
    def test_layer_norm_forward(self):
        rng = np.random.default_rng(31)
        x = rand(rng, 5, 4)
        gain = rand(rng, 4)
        bias = rand(rng, 4)
        from oracles import naive_layer_norm
        got = ops.layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
        assert np.allclose(got, naive_layer_norm(x, gain, bias), atol=1e-12)

    def test_batch_norm_forward(self):
        rng = np.random.default_rng(32)
        x = rand(rng, 5, 4, 3)
        gain = rand(rng, 3)
        bias = rand(rng, 3)
        from oracles import naive_batch_norm2d
        got, _, _ = ops.batch_norm2d(Tensor(x), Tensor(gain), Tensor(bias))
        assert np.allclose(got.data, naive_batch_norm2d(x, gain, bias), atol=1e-12)

    def test_gelu_forward(self):
        rng = np.random.default_rng(33)
        x = rand(rng, 3, 5)
        from oracles import naive_gelu
        assert np.allclose(ops.gelu(Tensor(x)).data, naive_gelu(x), atol=1e-12)
