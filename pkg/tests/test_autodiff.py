import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fptnoise import autodiff as ad
from fptnoise.autodiff import Tensor
from fptnoise.errors import ConfigurationError, InputError, UsageError


def numeric_grad(fn, x, h=1e-5):
    """Central finite differences of a scalar-valued fn at x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        bump = np.zeros_like(x).reshape(-1)
        bump[i] = h
        bump = bump.reshape(x.shape)
        flat[i] = (fn(x + bump) - fn(x - bump)) / (2 * h)
    return grad


def rel_err(a, b):
    denom = max(np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_gradient(build, x, tol, h=1e-5):
    """build(tensor) -> scalar Tensor; compares backward vs finite differences."""
    leaf = Tensor(x, requires_grad=True)
    loss = build(leaf)
    analytic = ad.backward(loss)[leaf]
    numeric = numeric_grad(lambda arr: build(Tensor(arr)).item(), x, h)
    assert rel_err(analytic, numeric) < tol, rel_err(analytic, numeric)


class TestLinear:
    def test_identity_weights(self):
        y = ad.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        assert np.array_equal(y.data, [[1.0, 2.0]])

    def test_hand_computed(self):
        y = ad.linear(
            Tensor([[1.0, 1.0]]), Tensor([[2.0, 0.0], [0.0, 3.0]]), Tensor([1.0, 1.0])
        )
        assert np.array_equal(y.data, [[3.0, 4.0]])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        x = rng.standard_normal((2, 4))

        def build(t):
            return ad.reduce_sum(ad.linear(t, Tensor(w), Tensor(b)))

        leaf = Tensor(x, requires_grad=True)
        analytic = ad.backward(build(leaf))[leaf]
        # gradient of sum(x @ W + b) w.r.t. x is the row-sums of W^T
        expected = np.tile(w.sum(axis=1), (2, 1))
        assert rel_err(analytic, expected) < 1e-12
        numeric = numeric_grad(lambda arr: build(Tensor(arr)).item(), x)
        assert rel_err(analytic, numeric) < 1e-6

    def test_shape_mismatch_raises(self):
        with pytest.raises(ConfigurationError):
            ad.linear(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))


class TestElementwise:
    def test_relu_values(self):
        assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_layer_norm_constant_vector_is_zero(self):
        y = ad.layer_norm(Tensor([3.0, 3.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.abs(y.data).max() == 0.0

    def test_layer_norm_requires_positive_eps(self):
        with pytest.raises(ConfigurationError):
            ad.layer_norm(Tensor([1.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                          eps=0.0)

    def test_softmax_symmetry(self):
        assert np.array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_softmax_rows_sum_to_one(self, values):
        out = ad.softmax(Tensor(values)).data
        assert abs(out.sum() - 1.0) < 1e-12

    def test_relu_gradient_masks_negative(self):
        x = Tensor([-2.0, 3.0], requires_grad=True)
        grads = ad.backward(ad.reduce_sum(ad.relu(x)))
        assert np.array_equal(grads[x], [0.0, 1.0])


class TestL2Norm:
    def test_three_four_five(self):
        assert ad.l2_norm(Tensor([3.0, 4.0])).item() == 5.0

    def test_zero_vector_has_zero_subgradient(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        loss = ad.l2_norm(x)
        assert loss.item() == 0.0
        assert np.array_equal(ad.backward(loss)[x], np.zeros(4))

    def test_gradient_matches_finite_differences(self):
        x = np.random.default_rng(1).standard_normal(16)
        check_gradient(ad.l2_norm, x, tol=1e-6)

    def test_empty_raises(self):
        with pytest.raises(InputError):
            ad.l2_norm(Tensor(np.zeros(0)))


class TestCrossEntropy:
    def test_uniform_two_way(self):
        loss = ad.cross_entropy(Tensor([[0.0, 0.0]]), [0])
        assert abs(loss.item() - math.log(2)) < 1e-15

    def test_saturated_true_class(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 50.0
        assert ad.cross_entropy(Tensor(logits), [2]).item() < 1e-10

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((5, 3))
        labels = rng.integers(0, 3, size=5)
        leaf = Tensor(logits, requires_grad=True)
        grads = ad.backward(ad.cross_entropy(leaf, labels))[leaf]
        exp = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = exp / exp.sum(axis=1, keepdims=True)
        probs[np.arange(5), labels] -= 1.0
        probs /= 5
        assert rel_err(grads, probs) < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(InputError):
            ad.cross_entropy(Tensor([[0.0, 1.0]]), [2])


class TestAttention:
    def _params(self, rng, d):
        mats = [rng.standard_normal((d, d)) * 0.4 for _ in range(4)]
        biases = [rng.standard_normal(d) * 0.1 for _ in range(4)]
        return ad.AttentionParams(
            mats[0], biases[0], mats[1], biases[1], mats[2], biases[2], mats[3], biases[3]
        )

    def test_single_token_reduces_to_projections(self):
        rng = np.random.default_rng(3)
        params = self._params(rng, 6)
        token = rng.standard_normal((1, 6))
        out = ad.multi_head_attention(Tensor(token), params, heads=2)
        value = token @ params.wv.data + params.bv.data
        expected = value @ params.wo.data + params.bo.data
        assert rel_err(out.data, expected) < 1e-12

    def test_identical_tokens_give_identical_outputs(self):
        d = 8
        identity = ad.AttentionParams(
            np.eye(d), np.zeros(d), np.eye(d), np.zeros(d),
            np.eye(d), np.zeros(d), np.eye(d), np.zeros(d),
        )
        token = np.random.default_rng(4).standard_normal(d)
        tokens = np.stack([token, token])
        out = ad.multi_head_attention(Tensor(tokens), identity, heads=2).data
        assert np.array_equal(out[0], out[1])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        params = self._params(rng, 8)
        tokens = rng.standard_normal((4, 8))

        def build(t):
            return ad.l2_norm(ad.multi_head_attention(t, params, heads=2))

        check_gradient(build, tokens, tol=1e-5)

    def test_indivisible_heads_raises(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ConfigurationError):
            ad.multi_head_attention(
                Tensor(rng.standard_normal((2, 6))), self._params(rng, 6), heads=4
            )


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(7).standard_normal((3, 4)), requires_grad=True)
        grads = ad.backward(ad.reduce_sum(x))
        assert np.array_equal(grads[x], np.ones((3, 4)))

    def test_squared_norm_gives_two_x(self):
        arr = np.random.default_rng(8).standard_normal(6)
        x = Tensor(arr, requires_grad=True)
        grads = ad.backward(ad.reduce_sum(ad.mul(x, x)))
        assert rel_err(grads[x], 2 * arr) < 1e-12

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(UsageError):
            ad.backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_composite_attention_layernorm_linear(self):
        rng = np.random.default_rng(9)
        d = 8
        attn = ad.AttentionParams(
            *(x for pair in [
                (rng.standard_normal((d, d)) * 0.4, rng.standard_normal(d) * 0.1)
                for _ in range(4)
            ] for x in pair)
        )
        gain, shift = np.ones(d), np.zeros(d)
        w, b = rng.standard_normal((d, 3)), rng.standard_normal(3)
        labels = [1]

        def build(t):
            h = ad.multi_head_attention(t, attn, heads=2)
            h = ad.layer_norm(h, Tensor(gain), Tensor(shift))
            logits = ad.linear(h, Tensor(w), Tensor(b))
            return ad.cross_entropy(ad.mean(logits, axis=0, keepdims=True), labels)

        check_gradient(build, rng.standard_normal((4, d)), tol=1e-4)

    def test_gradients_keyed_by_leaf(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0])  # constant leaf: no gradient entry
        grads = ad.backward(ad.reduce_sum(ad.mul(x, y)))
        assert x in grads and y not in grads
        assert np.array_equal(grads[x], [3.0, 4.0])


class TestGraphContracts:
    def test_forward_is_pure(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((3, 5))
        a = ad.softmax(ad.relu(Tensor(x)), axis=-1).data
        b = ad.softmax(ad.relu(Tensor(x)), axis=-1).data
        assert np.array_equal(a, b)

    def test_backward_does_not_mutate_forward_values(self):
        x = Tensor(np.random.default_rng(11).standard_normal((2, 3)), requires_grad=True)
        out = ad.softmax(x, axis=-1)
        loss = ad.reduce_sum(ad.mul(out, out))
        before = out.data.copy()
        ad.backward(loss)
        assert np.array_equal(out.data, before)

    def test_gradient_shapes_match_inputs(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        grads = ad.backward(ad.l2_norm(ad.linear(x, w, b)))
        assert grads[x].shape == (3, 4)
        assert grads[w].shape == (4, 2)
        assert grads[b].shape == (2,)

    def test_repeated_use_of_leaf_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        loss = ad.reduce_sum(ad.add(ad.mul(x, x), x))  # x^2 + x
        assert np.allclose(ad.backward(loss)[x], [5.0])


@pytest.mark.parametrize(
    "op_name",
    ["add", "sub", "mul", "div", "matmul", "relu", "softmax", "layer_norm", "sqrt"],
)
def test_primitive_gradients_against_finite_differences(op_name):
    """Each primitive checked on several random instances."""
    rng = np.random.default_rng(hash(op_name) % 2**32)
    for _ in range(10):
        if op_name in ("add", "sub", "mul", "div"):
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((3, 4)) + (3.0 if op_name == "div" else 0.0)
            op = getattr(ad, op_name)

            def build(t, other=Tensor(b), op=op):
                return ad.l2_norm(op(t, other))

            check_gradient(build, a, tol=1e-5)
        elif op_name == "matmul":
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((4, 2))

            def build(t, other=Tensor(b)):
                return ad.l2_norm(ad.matmul(t, other))

            check_gradient(build, a, tol=1e-5)
        elif op_name == "relu":
            a = rng.standard_normal((3, 4)) + 0.05  # keep clear of the kink

            def build(t):
                return ad.l2_norm(ad.relu(t))

            check_gradient(build, a, tol=1e-5)
        elif op_name == "softmax":
            a = rng.standard_normal((3, 4))

            def build(t):
                return ad.l2_norm(ad.softmax(t, axis=-1))

            check_gradient(build, a, tol=1e-4)
        elif op_name == "layer_norm":
            a = rng.standard_normal((3, 6))
            gain = rng.standard_normal(6)
            shift = rng.standard_normal(6)

            def build(t, g=Tensor(gain), s=Tensor(shift)):
                return ad.l2_norm(ad.layer_norm(t, g, s))

            check_gradient(build, a, tol=1e-4)
        elif op_name == "sqrt":
            a = rng.uniform(0.5, 3.0, size=(3, 4))

            def build(t):
                return ad.reduce_sum(ad.sqrt(t))

            check_gradient(build, a, tol=1e-5)
