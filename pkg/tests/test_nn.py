import numpy as np
import pytest

from audiomlm import tensor as T
from audiomlm.errors import ConfigError
from audiomlm.nn import (
    Linear,
    MultiHeadAttention,
    TransformerBlock,
    TransformerStack,
    padding_bias,
)
from audiomlm.tensor import Tensor

from oracles import FD_RTOL, numeric_gradient, rel_error


def test_head_count_must_divide_hidden():
    with pytest.raises(ConfigError):
        MultiHeadAttention(10, 3, np.random.default_rng(0))


def test_single_position_attention_equals_value_projection():
    rng = np.random.default_rng(0)
    attn = MultiHeadAttention(8, 2, rng)
    x = rng.standard_normal((1, 1, 8)).astype(np.float32)
    out = attn(Tensor(x)).data
    v = x @ attn.wv.weight.data + attn.wv.bias.data
    expected = v @ attn.wo.weight.data + attn.wo.bias.data
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_attention_gradient_vs_finite_differences():
    rng = np.random.default_rng(1)
    attn = MultiHeadAttention(4, 2, rng)
    params = attn.parameters()
    for p in params.values():
        p.data = p.data.astype(np.float64)
        p.zero_grad()
    for trial in range(20):
        x_val = np.random.default_rng(100 + trial).standard_normal((1, 3, 4))
        attn.zero_grad()
        loss = T.tsum(attn(Tensor(x_val)) ** 2.0)
        T.backward(loss)

        arrays = [p.data for p in params.values()]

        def f():
            return float(T.tsum(attn(Tensor(x_val)) ** 2.0).data)

        numeric = numeric_gradient(f, arrays)
        for p, num in zip(params.values(), numeric):
            assert rel_error(p.grad, num) < FD_RTOL


def test_attention_input_gradient_vs_finite_differences():
    rng = np.random.default_rng(2)
    attn = MultiHeadAttention(4, 2, rng)
    for p in attn.parameters().values():
        p.data = p.data.astype(np.float64)
    for trial in range(10):
        x_val = np.random.default_rng(300 + trial).standard_normal((2, 3, 4))
        x = Tensor(x_val.copy(), requires_grad=True)
        T.backward(T.tsum(attn(x) ** 2.0))

        def f():
            return float(T.tsum(attn(Tensor(x_val)) ** 2.0).data)

        (numeric,) = numeric_gradient(f, [x_val])
        assert rel_error(x.grad, numeric) < FD_RTOL


def test_transformer_block_gradient_vs_finite_differences():
    rng = np.random.default_rng(3)
    block = TransformerBlock(4, 8, 2, rng)
    params = block.parameters()
    for p in params.values():
        p.data = p.data.astype(np.float64)
    x_val = np.random.default_rng(9).standard_normal((1, 3, 4))
    block.zero_grad()
    T.backward(T.tsum(block(Tensor(x_val)) ** 2.0))

    arrays = [p.data for p in params.values()]

    def f():
        return float(T.tsum(block(Tensor(x_val)) ** 2.0).data)

    numeric = numeric_gradient(f, arrays)
    for p, num in zip(params.values(), numeric):
        assert rel_error(p.grad, num) < FD_RTOL


def test_padding_bias_makes_padded_keys_inert():
    rng = np.random.default_rng(4)
    stack = TransformerStack(8, 16, 2, 2, rng)
    x = rng.standard_normal((1, 5, 8)).astype(np.float32)
    base = stack(Tensor(x)).data

    padded = np.concatenate([x, rng.standard_normal((1, 3, 8)).astype(np.float32)], axis=1)
    valid = np.zeros((1, 8), dtype=bool)
    valid[0, :5] = True
    out = stack(Tensor(padded), padding_bias(valid)).data
    np.testing.assert_allclose(out[0, :5], base[0], atol=1e-5)


def test_parameter_names_are_hierarchical():
    stack = TransformerStack(4, 8, 1, 2, np.random.default_rng(0))
    names = set(stack.parameters())
    assert "blocks.0.attn.wq.weight" in names
    assert "ln_out.gain" in names


def test_linear_batch_independence():
    rng = np.random.default_rng(5)
    lin = Linear(3, 2, rng)
    x = rng.standard_normal((4, 3)).astype(np.float32)
    full = lin(Tensor(x)).data
    perm = np.array([2, 0, 3, 1])
    permuted = lin(Tensor(x[perm])).data
    np.testing.assert_array_equal(permuted, full[perm])
