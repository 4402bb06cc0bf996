import numpy as np
import pytest

from avforge import autodiff as ad
from avforge.autodiff import Tensor


def numeric_grad(fn, tensors, h=1e-6):
    """Central differences of fn(*tensors).sum-like scalar wrt every tensor."""
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            f1 = float(fn(*tensors).data)
            flat[i] = old - h
            f0 = float(fn(*tensors).data)
            flat[i] = old
            g[i] = (f1 - f0) / (2 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def assert_grads_match(fn, tensors, tol=1e-6):
    out = fn(*tensors)
    out.backward()
    analytic = [t.grad for t in tensors]
    numeric = numeric_grad(fn, tensors)
    for a, n in zip(analytic, numeric):
        assert a is not None
        np.testing.assert_allclose(a, n, atol=tol, rtol=tol)


def T(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestElementwise:
    def test_arithmetic(self):
        rng = np.random.default_rng(0)
        assert_grads_match(
            lambda a, b: (a * b + a / (b * b + 2.0) - b + 0.5 * a).sum(),
            [T(rng, 3, 4), T(rng, 3, 4)],
        )

    def test_broadcasting(self):
        rng = np.random.default_rng(1)
        assert_grads_match(
            lambda a, b: (a + b * a).sum(), [T(rng, 4, 1, 3), T(rng, 2, 3)]
        )

    def test_unary(self):
        rng = np.random.default_rng(2)
        assert_grads_match(
            lambda a: (ad.exp(a) + ad.log(ad.absolute(a) + 2.0)
                       + ad.sqrt(a * a + 1.0) + (-a) ** 2.0).sum(),
            [T(rng, 5)],
        )

    def test_activations(self):
        rng = np.random.default_rng(3)
        assert_grads_match(
            lambda a: (ad.relu(a) + ad.sigmoid(a) * 2.0 + ad.softplus(a)).sum(),
            [T(rng, 4, 4)],
        )

    def test_select_ops(self):
        rng = np.random.default_rng(4)
        cond = rng.random((4, 4)) > 0.5
        assert_grads_match(
            lambda a, b: (ad.where(cond, a, b) + ad.maximum(a, b * 0.5)
                          + ad.minimum(a * 2.0, b) + ad.clip(a, -0.5, 0.5)).sum(),
            [T(rng, 4, 4), T(rng, 4, 4)],
        )


class TestMatmulAndShape:
    def test_matmul_weight(self):
        rng = np.random.default_rng(5)
        assert_grads_match(lambda a, w: (a @ w).sum(), [T(rng, 2, 5, 3), T(rng, 3, 4)])

    def test_matmul_batched(self):
        rng = np.random.default_rng(6)
        assert_grads_match(lambda a, b: (a @ b).sum(), [T(rng, 3, 4, 2), T(rng, 3, 2, 5)])

    def test_reshape_transpose_slice(self):
        rng = np.random.default_rng(7)
        assert_grads_match(
            lambda a: (a.reshape(6, 4).transpose(1, 0)[1:3].swapaxes(0, 1) ** 2.0).sum(),
            [T(rng, 2, 3, 4)],
        )

    def test_concat_stack_broadcast_to(self):
        rng = np.random.default_rng(8)
        assert_grads_match(
            lambda a, b: (
                (ad.concat([a, b], axis=1) ** 2.0).sum()
                + (ad.stack([a, b], axis=0) ** 3.0).sum()
                + ad.broadcast_to(a.sum(0, keepdims=True), (4, 2)).sum()
            ),
            [T(rng, 4, 2), T(rng, 4, 2)],
        )

    def test_reductions(self):
        rng = np.random.default_rng(9)
        assert_grads_match(
            lambda a: (a.sum(axis=(0, 2)) * a.mean(axis=(0, 2)) ).sum(),
            [T(rng, 2, 3, 4)],
        )


class TestFusedOps:
    def test_softmax(self):
        rng = np.random.default_rng(10)
        c = rng.normal(size=(3, 6))
        assert_grads_match(lambda a: (ad.softmax(a, -1) * c).sum(), [T(rng, 3, 6)])

    def test_softmax_with_bias_mask(self):
        rng = np.random.default_rng(11)
        bias = np.where(rng.random((3, 6)) > 0.4, 0.0, -np.inf)
        bias[:, 0] = 0.0  # keep every row alive
        c = rng.normal(size=(3, 6))
        assert_grads_match(
            lambda a: (ad.softmax(a, -1, bias=bias) * c).sum(), [T(rng, 3, 6)]
        )
        p = ad.softmax(Tensor(rng.normal(size=(3, 6))), -1, bias=bias)
        assert p.data[bias == -np.inf].max() == 0.0
        np.testing.assert_allclose(p.data.sum(-1), 1.0)

    def test_layer_norm(self):
        rng = np.random.default_rng(12)
        assert_grads_match(
            lambda x, w, b: (ad.layer_norm(x, w, b) ** 3.0).sum(),
            [T(rng, 4, 6), T(rng, 6), T(rng, 6)],
        )

    def test_conv1d_matches_naive(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 9, 3))
        w = rng.normal(size=(3, 3, 4))
        b = rng.normal(size=(4,))
        out = ad.conv1d_same(Tensor(x), Tensor(w), Tensor(b)).data
        xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
        ref = np.zeros((2, 9, 4))
        for t in range(9):
            for k in range(3):
                ref[:, t] += xp[:, t + k] @ w[k]
        ref += b
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_conv1d_grads(self):
        rng = np.random.default_rng(14)
        c = rng.normal(size=(2, 7, 3))
        assert_grads_match(
            lambda x, w, b: (ad.conv1d_same(x, w, b) * c).sum(),
            [T(rng, 2, 7, 5), T(rng, 3, 5, 3), T(rng, 3)],
        )

    def test_conv1d_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            ad.conv1d_same(Tensor(np.zeros((1, 4, 2))), Tensor(np.zeros((2, 2, 2))))


class TestEngine:
    def test_diamond_accumulation(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ((a * 2.0 + a * 3.0) ** 2.0).sum().backward()
        np.testing.assert_allclose(a.grad, 2 * 5 * (a.data * 5))

    def test_no_grad_suppresses_tape(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            out = a * 2.0 + 1.0
        assert not out.requires_grad and out._vjp is None

    def test_constant_branches_skip_grad(self):
        a = Tensor(np.ones(3), requires_grad=True)
        const = Tensor(np.ones(3))
        out = (a * const + const).sum()
        out.backward()
        assert const.grad is None
        np.testing.assert_allclose(a.grad, 1.0)

    def test_dtype_preserved(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        out = ad.sigmoid(a @ a + 1.5)
        assert out.data.dtype == np.float32
        out.sum().backward()
        assert a.grad.dtype == np.float32

    def test_backward_frees_tape(self):
        a = Tensor(np.ones(3), requires_grad=True)
        mid = a * 2.0
        out = (mid + 1.0).sum()
        out.backward()
        assert mid._vjp is None and mid.grad is None
        assert a.grad is not None
