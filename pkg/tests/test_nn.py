"""Differentiable core: values against closed forms, gradients against
central finite differences in float64."""

import math

import numpy as np
import pytest

from ctgssl import nn
from ctgssl.validation import ValidationError

RNG = np.random.default_rng(12345)


def rand(*shape, scale=1.0):
    return scale * RNG.standard_normal(shape)


def grads(f, *arrays, eps=1e-6):
    """Analytic and central-difference gradients of scalar f(*tensors)."""
    tensors = [nn.Tensor(a, requires_grad=True) for a in arrays]
    loss = f(*tensors)
    assert loss.data.size == 1
    loss.backward()
    pairs = []
    for a, t in zip(arrays, tensors):
        num = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = a[ix]
            a[ix] = orig + eps
            fp = float(f(*[nn.Tensor(x) for x in arrays]).data)
            a[ix] = orig - eps
            fm = float(f(*[nn.Tensor(x) for x in arrays]).data)
            a[ix] = orig
            num[ix] = (fp - fm) / (2.0 * eps)
        pairs.append((t.grad, num))
    return pairs


def assert_grads(f, *arrays, rtol=5e-6, atol=5e-9):
    for i, (ana, num) in enumerate(grads(f, *arrays)):
        assert ana is not None, f"input {i} received no gradient"
        np.testing.assert_allclose(ana, num, rtol=rtol, atol=atol, err_msg=f"input {i}")


def weighted(out, w):
    """Scalar projection so the full Jacobian is exercised."""
    return nn.sum_(nn.mul(out, nn.Tensor(w)))


class TestElementwise:
    def test_add_broadcast(self):
        w = rand(3, 4)
        assert_grads(lambda a, b: weighted(nn.add(a, b), w), rand(3, 4), rand(4))
        assert_grads(lambda a, b: weighted(nn.add(a, b), w), rand(3, 1), rand(1, 4))

    def test_sub_and_neg(self):
        w = rand(2, 5)
        assert_grads(lambda a, b: weighted(nn.sub(a, b), w), rand(2, 5), rand(5))
        assert_grads(lambda a: weighted(nn.neg(a), w), rand(2, 5))

    def test_mul_broadcast(self):
        w = rand(2, 3, 4)
        assert_grads(lambda a, b: weighted(nn.mul(a, b), w), rand(2, 3, 4), rand(3, 4))

    def test_operator_sugar(self):
        a = nn.Tensor(rand(3), requires_grad=True)
        b = nn.Tensor(rand(3), requires_grad=True)
        loss = nn.sum_((a + b) * a - (-b) + 2.0 * a)
        loss.backward()
        assert a.grad is not None and b.grad is not None

    def test_exp_sigmoid_gelu_values(self):
        x = np.array([-3.0, -0.5, 0.0, 0.7, 4.0])
        np.testing.assert_allclose(nn.exp(x).data, np.exp(x), rtol=1e-15)
        np.testing.assert_allclose(nn.sigmoid(x).data, 1.0 / (1.0 + np.exp(-x)), rtol=1e-14)
        phi = 0.5 * (1.0 + np.array([math.erf(v / math.sqrt(2.0)) for v in x]))
        np.testing.assert_allclose(nn.gelu(x).data, x * phi, rtol=1e-14)

    def test_sigmoid_extreme_stability(self):
        y = nn.sigmoid(np.array([-800.0, 800.0])).data
        assert y[0] == 0.0 and y[1] == 1.0
        assert np.all(np.isfinite(y))

    def test_unary_grads(self):
        w = rand(2, 3)
        x = rand(2, 3)
        assert_grads(lambda a: weighted(nn.exp(a), w), x.copy())
        assert_grads(lambda a: weighted(nn.sigmoid(a), w), x.copy())
        assert_grads(lambda a: weighted(nn.gelu(a), w), x.copy())


class TestMatmulShapes:
    def test_matmul_2d(self):
        w = rand(3, 5)
        assert_grads(lambda a, b: weighted(nn.matmul(a, b), w), rand(3, 4), rand(4, 5))

    def test_matmul_batched(self):
        w = rand(2, 3, 5)
        assert_grads(lambda a, b: weighted(nn.matmul(a, b), w), rand(2, 3, 4), rand(2, 4, 5))

    def test_matmul_broadcast_weight(self):
        # (B, T, D) @ (D, E): the standard linear-layer case
        w = rand(2, 3, 5)
        assert_grads(lambda a, b: weighted(nn.matmul(a, b), w), rand(2, 3, 4), rand(4, 5))

    def test_linear_bias(self):
        w = rand(2, 3)
        assert_grads(
            lambda x, W, b: weighted(nn.linear(x, W, b), w), rand(2, 4), rand(4, 3), rand(3)
        )


class TestShapeOps:
    def test_reshape(self):
        w = rand(6, 2)
        assert_grads(lambda a: weighted(nn.reshape(a, (6, 2)), w), rand(3, 4))

    def test_transpose(self):
        w = rand(4, 2, 3)
        assert_grads(lambda a: weighted(nn.transpose(a, (2, 0, 1)), w), rand(2, 3, 4))

    def test_getitem_slice(self):
        w = rand(2, 2)
        assert_grads(lambda a: weighted(nn.getitem(a, (slice(1, 3), slice(0, 2))), w), rand(4, 3))

    def test_getitem_int_row(self):
        w = rand(3)
        assert_grads(lambda a: weighted(nn.getitem(a, 1), w), rand(4, 3))

    def test_concat(self):
        w = rand(2, 5)
        assert_grads(
            lambda a, b: weighted(nn.concat([a, b], axis=1), w), rand(2, 2), rand(2, 3)
        )

    def test_broadcast_to(self):
        w = rand(3, 4)
        assert_grads(lambda a: weighted(nn.broadcast_to(a, (3, 4)), w), rand(1, 4))


class TestReductions:
    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
    def test_sum_axes(self, axis, keepdims):
        x = rand(2, 3, 4)
        out_shape = np.sum(x, axis=axis, keepdims=keepdims).shape
        w = rand(*out_shape) if out_shape else np.array(1.0)
        assert_grads(lambda a: weighted(nn.sum_(a, axis=axis, keepdims=keepdims), w), x.copy())

    @pytest.mark.parametrize("axis", [None, 1, (0, 2)])
    def test_mean_matches_numpy(self, axis):
        x = rand(2, 3, 4)
        np.testing.assert_allclose(nn.mean_(x, axis=axis).data, x.mean(axis=axis), rtol=1e-14)

    def test_mean_grad(self):
        w = rand(3)
        assert_grads(lambda a: weighted(nn.mean_(a, axis=0), w), rand(4, 3))


class TestLayerNorm:
    def test_value(self):
        x = rand(2, 3, 8)
        g, b = rand(8), rand(8)
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        expect = (x - mu) / np.sqrt(var + 1e-5) * g + b
        np.testing.assert_allclose(nn.layer_norm(x, g, b).data, expect, rtol=1e-12)

    def test_grads(self):
        w = rand(2, 6)
        assert_grads(
            lambda a, g, b: weighted(nn.layer_norm(a, g, b), w), rand(2, 6), rand(6), rand(6)
        )


class TestMaskedSoftmax:
    def test_masked_entries_exactly_zero(self):
        scores = rand(2, 2, 4, 4, scale=3.0)
        mask = RNG.random((4, 4)) > 0.4
        mask[:, 0] = True  # every row keeps a key
        p = nn.masked_softmax(scores, mask[None, None]).data
        assert np.all(p[:, :, ~mask] == 0.0)
        np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)

    def test_grad(self):
        mask = np.array([[True, True, False], [True, True, True], [False, True, True]])
        w = rand(1, 3, 3)
        assert_grads(
            lambda s: weighted(nn.masked_softmax(s, mask[None]), w), rand(1, 3, 3)
        )

    def test_empty_row_rejected(self):
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ValidationError):
            nn.masked_softmax(rand(1, 2, 2), mask[None])


class TestConv1d:
    @staticmethod
    def conv_oracle(x, w, b):
        """Plain-loop same-padded conv1d: x (B,L,Cin), w (K,Cin,Cout)."""
        B, L, cin = x.shape
        K, _, cout = w.shape
        pad_l = (K - 1) // 2
        y = np.zeros((B, L, cout))
        for bi in range(B):
            for t in range(L):
                for k in range(K):
                    src = t + k - pad_l
                    if 0 <= src < L:
                        y[bi, t] += x[bi, src] @ w[k]
        return y + b

    @pytest.mark.parametrize("K", [1, 3, 4, 5])
    def test_value_matches_oracle(self, K):
        x, w, b = rand(2, 7, 3), rand(K, 3, 4), rand(4)
        np.testing.assert_allclose(
            nn.conv1d_same(x, w, b).data, self.conv_oracle(x, w, b), rtol=1e-12, atol=1e-12
        )

    def test_grads(self):
        wgt = rand(2, 5, 4)
        assert_grads(
            lambda x, w, b: weighted(nn.conv1d_same(x, w, b), wgt),
            rand(2, 5, 3),
            rand(3, 3, 4),
            rand(4),
        )

    def test_shape_validation(self):
        with pytest.raises(ValidationError):
            nn.conv1d_same(rand(2, 5), rand(3, 3, 4), rand(4))
        with pytest.raises(ValidationError):
            nn.conv1d_same(rand(2, 5, 2), rand(3, 3, 4), rand(4))


class TestIndexingOps:
    def test_embedding_value_and_duplicates(self):
        table = rand(6, 4)
        idx = np.array([[0, 2, 0], [5, 5, 1]])
        out = nn.embedding(table, idx)
        np.testing.assert_array_equal(out.data, table[idx])
        w = rand(2, 3, 4)
        assert_grads(lambda t: weighted(nn.embedding(t, idx), w), table.copy())

    def test_embedding_validation(self):
        with pytest.raises(ValidationError):
            nn.embedding(rand(6, 4), np.array([0.5, 1.0]))
        with pytest.raises(ValidationError):
            nn.embedding(rand(6, 4), np.array([0, 6]))
        with pytest.raises(ValidationError):
            nn.embedding(rand(6, 4), np.array([-1]))

    def test_gather_rows(self):
        x = rand(2, 5, 3)
        idx = np.array([[0, 3], [4, 4]])  # duplicates allowed in gather
        out = nn.gather_rows(x, idx)
        np.testing.assert_array_equal(out.data, x[np.arange(2)[:, None], idx])
        w = rand(2, 2, 3)
        assert_grads(lambda t: weighted(nn.gather_rows(t, idx), w), x.copy())

    def test_scatter_rows(self):
        vals = rand(2, 2, 3)
        idx = np.array([[1, 3], [0, 4]])
        out = nn.scatter_rows(vals, idx, 5)
        assert out.shape == (2, 5, 3)
        untouched = np.ones((2, 5), dtype=bool)
        untouched[np.arange(2)[:, None], idx] = False
        assert np.all(out.data[untouched] == 0.0)
        w = rand(2, 5, 3)
        assert_grads(lambda v: weighted(nn.scatter_rows(v, idx, 5), w), vals.copy())

    def test_scatter_then_gather_round_trip(self):
        vals = rand(2, 3, 4)
        idx = np.array([[0, 2, 4], [1, 3, 5]])
        back = nn.gather_rows(nn.scatter_rows(vals, idx, 6), idx)
        np.testing.assert_array_equal(back.data, vals)


class TestCrossEntropy:
    def test_value_matches_manual(self):
        logits = rand(5, 7, scale=2.0)
        targets = np.array([0, 6, 3, 3, 1])
        z = logits - logits.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        expect = -logp[np.arange(5), targets].mean()
        assert nn.cross_entropy_mean(logits, targets).item() == pytest.approx(expect, rel=1e-12)

    def test_grad(self):
        targets = np.array([2, 0, 1])
        assert_grads(lambda z: nn.cross_entropy_mean(z, targets), rand(3, 4))

    def test_validation(self):
        with pytest.raises(ValidationError):
            nn.cross_entropy_mean(rand(3, 4), np.array([0, 4, 1]))
        with pytest.raises(ValidationError):
            nn.cross_entropy_mean(np.zeros((0, 4)), np.zeros(0, dtype=int))
        with pytest.raises(ValidationError):
            nn.cross_entropy_mean(rand(3, 4, 2), np.array([0, 1, 2]))


def mha_params(D):
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = rand(D, D, scale=0.3)
    for name in ("bq", "bv", "bo"):
        p[name] = rand(D, scale=0.1)
    return p


class TestComposites:
    def test_mha_shapes_and_grads(self):
        D, heads = 4, 2
        arrays = mha_params(D)
        names = sorted(arrays)
        q, kv = rand(2, 3, D), rand(2, 5, D)
        mask = np.ones((3, 5), dtype=bool)
        mask[0, 3:] = False
        w = rand(2, 3, D)

        def f(qt, kvt, *ps):
            p = {n: t for n, t in zip(names, ps)}
            return weighted(nn.multi_head_attention(qt, kvt, p, heads, mask), w)

        assert_grads(f, q, kv, *[arrays[n] for n in names])

    def test_mha_head_divisibility(self):
        with pytest.raises(ValidationError):
            nn.multi_head_attention(
                nn.Tensor(rand(1, 2, 5)), nn.Tensor(rand(1, 2, 5)), mha_params(5), 2,
                np.ones((2, 2), dtype=bool),
            )

    def test_mlp_block_grads(self):
        w = rand(2, 3)
        arrays = {"w1": rand(3, 6, scale=0.4), "b1": rand(6, scale=0.1),
                  "w2": rand(6, 3, scale=0.4), "b2": rand(3, scale=0.1)}
        names = sorted(arrays)

        def f(x, *ps):
            return weighted(nn.mlp_block(x, {n: t for n, t in zip(names, ps)}), w)

        assert_grads(f, rand(2, 3), *[arrays[n] for n in names])

    def test_conv_residual_block_identity_shortcut(self):
        C = 3
        arrays = {
            "conv1_w": rand(3, C, C, scale=0.3), "conv1_b": rand(C, scale=0.1),
            "ln_g": np.abs(rand(C)) + 0.5, "ln_b": rand(C, scale=0.1),
            "conv2_w": rand(3, C, C, scale=0.3), "conv2_b": rand(C, scale=0.1),
        }
        names = sorted(arrays)
        w = rand(2, 4, C)

        def f(x, *ps):
            return weighted(nn.conv1d_residual_block(x, {n: t for n, t in zip(names, ps)}), w)

        assert_grads(f, rand(2, 4, C), *[arrays[n] for n in names])

    def test_conv_residual_block_projection(self):
        arrays = {
            "conv1_w": rand(3, 2, 4, scale=0.3), "conv1_b": rand(4, scale=0.1),
            "ln_g": np.abs(rand(4)) + 0.5, "ln_b": rand(4, scale=0.1),
            "conv2_w": rand(3, 4, 4, scale=0.3), "conv2_b": rand(4, scale=0.1),
            "proj_w": rand(2, 4, scale=0.3), "proj_b": rand(4, scale=0.1),
        }
        names = sorted(arrays)
        w = rand(1, 4, 4)

        def f(x, *ps):
            return weighted(nn.conv1d_residual_block(x, {n: t for n, t in zip(names, ps)}), w)

        assert_grads(f, rand(1, 4, 2), *[arrays[n] for n in names])


class TestGraphMechanics:
    def test_diamond_reuse_accumulates(self):
        x = rand(3)
        t = nn.Tensor(x, requires_grad=True)
        u = nn.exp(t)
        loss = nn.sum_(nn.add(nn.mul(u, u), u))  # sum(e^2x + e^x)
        loss.backward()
        np.testing.assert_allclose(t.grad, 2.0 * np.exp(2 * x) + np.exp(x), rtol=1e-12)

    def test_backward_requires_scalar(self):
        t = nn.Tensor(rand(3), requires_grad=True)
        with pytest.raises(ValidationError):
            nn.exp(t).backward()

    def test_inference_fast_path_builds_no_tape(self):
        a = nn.Tensor(rand(3, 3))
        out = nn.matmul(nn.gelu(a), a)
        assert out.requires_grad is False
        assert out._bwd is None and out._parents == ()

    def test_repeated_backward_fresh_graph(self):
        x = rand(4)
        g1 = grads(lambda a: nn.sum_(nn.mul(a, a)), x.copy())[0][0]
        np.testing.assert_allclose(g1, 2 * x, rtol=1e-12)


class TestParamHelpers:
    def make(self):
        return {
            "w": nn.Param.create("w", rand(3, 2)),
            "frozen": nn.Param.create("frozen", rand(2), trainable=False),
        }

    def test_leaves_respect_trainability(self):
        params = self.make()
        leaves = nn.make_leaves(params)
        assert leaves["w"].requires_grad is True
        assert leaves["frozen"].requires_grad is False
        fast = nn.make_leaves(params, with_grad=False)
        assert fast["w"].requires_grad is False

    def test_collect_and_zero_grads(self):
        params = self.make()
        leaves = nn.make_leaves(params)
        loss = nn.sum_(nn.mul(leaves["w"], leaves["w"]))
        loss.backward()
        nn.collect_grads(params, leaves)
        np.testing.assert_allclose(params["w"].grad, 2 * params["w"].value, rtol=1e-12)
        np.testing.assert_array_equal(params["frozen"].grad, 0.0)
        nn.zero_grads(params)
        np.testing.assert_array_equal(params["w"].grad, 0.0)

    def test_params_astype_round_trip(self):
        params = self.make()
        p64 = nn.params_astype(params, np.float64)
        assert p64["w"].value.dtype == np.float64
        assert p64["frozen"].trainable is False
        np.testing.assert_allclose(p64["w"].value, params["w"].value)

    def test_global_grad_norm(self):
        params = self.make()
        params["w"].grad[...] = 3.0
        params["frozen"].grad[...] = 100.0  # ignored: not trainable
        expect = math.sqrt((3.0**2) * params["w"].size)
        assert nn.global_grad_norm(params) == pytest.approx(expect, rel=1e-12)

    def test_check_gradients_quadratic(self):
        params = {"w": nn.Param.create("w", rand(5))}
        c = rand(5)

        def loss_fn(leaves):
            d = nn.sub(leaves["w"], nn.Tensor(c))
            return nn.sum_(nn.mul(d, d))

        worst = nn.check_gradients(loss_fn, params, sample_fraction=1.0)
        assert worst < 1e-7

    def test_check_gradients_scalar_epsilon(self):
        params = {"w": nn.Param.create("w", rand(4))}

        def loss_fn(leaves):
            return nn.sum_(nn.mul(leaves["w"], leaves["w"]))

        worst = nn.check_gradients(loss_fn, params, epsilon=1e-5, sample_fraction=1.0)
        assert worst < 1e-7

    def test_check_gradients_rejects_bad_epsilon(self):
        params = {"w": nn.Param.create("w", rand(2))}

        def loss_fn(leaves):
            return nn.sum_(leaves["w"])

        with pytest.raises(nn.ValidationError):
            nn.check_gradients(loss_fn, params, epsilon=())
        with pytest.raises(nn.ValidationError):
            nn.check_gradients(loss_fn, params, epsilon=(1e-5, 0.0))
