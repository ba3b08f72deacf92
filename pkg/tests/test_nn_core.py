import math

import pytest
import torch
from torch import nn

from errors import ConfigurationError, ShapeError
from nn_core import MLP, DecoderLayer, EncoderLayer, MultiHeadAttention, finite_difference_gradcheck, \
    layer_norm, mlp, multi_head_attention, sine_positional_encoding


def _inputs(*shapes, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return [torch.randn(*s, generator=gen, dtype=dtype) for s in shapes]


def test_attention_shapes_and_row_sums():
    torch.manual_seed(0)
    mha = MultiHeadAttention(8, 2)
    q, k = _inputs((3, 8), (5, 8))
    out = multi_head_attention(q, k, k, mha)
    assert out.output.shape == (3, 8)
    assert out.weights.shape == (2, 3, 5)
    assert torch.allclose(out.weights.sum(-1), torch.ones(2, 3), atol=1e-6)
    assert not out.any_fallback


def test_masked_keys_receive_no_weight():
    torch.manual_seed(0)
    mha = MultiHeadAttention(8, 2)
    q, k = _inputs((4, 8), (6, 8))
    mask = torch.zeros(4, 6)
    mask[:, 3:] = float('-inf')
    out = multi_head_attention(q, k, k, mha, mask=mask)
    assert out.weights[..., 3:].max() < 1e-5
    assert torch.allclose(out.weights.sum(-1), torch.ones(2, 4), atol=1e-6)


def test_all_masked_row_falls_back_to_uniform():
    torch.manual_seed(0)
    mha = MultiHeadAttention(8, 2)
    q, k = _inputs((2, 8), (4, 8))
    mask = torch.zeros(2, 4)
    mask[1] = float('-inf')
    out = multi_head_attention(q, k, k, mha, mask=mask)
    assert out.fallback_rows.tolist() == [False, True]
    assert torch.allclose(out.weights[:, 1], torch.full((2, 4), 0.25))
    assert torch.isfinite(out.output).all()


def test_zero_mask_matches_unmasked():
    torch.manual_seed(0)
    mha = MultiHeadAttention(8, 2)
    q, k = _inputs((3, 8), (5, 8))
    a = multi_head_attention(q, k, k, mha).output
    b = multi_head_attention(q, k, k, mha, mask=torch.zeros(3, 5)).output
    assert torch.allclose(a, b, atol=1e-6)


def test_attention_shape_errors():
    mha = MultiHeadAttention(8, 2)
    q, k = _inputs((3, 8), (5, 6))
    with pytest.raises(ShapeError):
        multi_head_attention(q, k, k, mha)
    q, k = _inputs((3, 8), (5, 8))
    with pytest.raises(ShapeError):
        multi_head_attention(q, k, k, mha, mask=torch.zeros(3, 4))
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(10, 3)


def test_layer_norm_standardizes():
    norm = nn.LayerNorm(6)
    (x,) = _inputs((4, 6))
    y = layer_norm(x * 10 + 3, norm)
    assert torch.allclose(y.mean(-1), torch.zeros(4), atol=1e-5)
    assert torch.allclose(y.std(-1, unbiased=False), torch.ones(4), atol=1e-3)
    with pytest.raises(ShapeError):
        layer_norm(torch.ones(3, 1), nn.LayerNorm(1))


def test_mlp_has_no_final_activation():
    torch.manual_seed(0)
    out = mlp(torch.randn(50, 4), [4, 8, 3], seed=1)
    assert out.shape == (50, 3)
    assert (out < 0).any()
    with pytest.raises(ConfigurationError):
        MLP([4])


def test_sine_encoding_layout():
    pos = sine_positional_encoding(3, 5, 16)
    assert pos.shape == (3, 5, 16)
    assert pos.abs().max() <= 1.0
    # first half varies with rows only, second half with columns only
    assert torch.allclose(pos[:, 0, :8], pos[:, 4, :8])
    assert torch.allclose(pos[0, :, 8:], pos[2, :, 8:])
    with pytest.raises(ShapeError):
        sine_positional_encoding(2, 2, 6)


def test_encoder_layer_keeps_shape():
    torch.manual_seed(0)
    layer = EncoderLayer(8, 2, 16)
    x, pos = _inputs((6, 8), (6, 8))
    assert layer(x, pos).shape == (6, 8)


def test_gradcheck_attention(double_precision):
    torch.manual_seed(0)
    mha = MultiHeadAttention(8, 2)
    q, k, v = _inputs((3, 8), (4, 8), (4, 8), dtype=torch.float64)
    report = finite_difference_gradcheck(lambda a, b, c: multi_head_attention(a, b, c, mha).output, [q, k, v])
    assert report.passed, report.messages


def test_gradcheck_masked_attention(double_precision):
    torch.manual_seed(1)
    mha = MultiHeadAttention(8, 2)
    q, k = _inputs((3, 8), (5, 8), dtype=torch.float64)
    mask = torch.zeros(3, 5, dtype=torch.float64)
    mask[0, :2] = float('-inf')
    mask[2, 4] = float('-inf')
    report = finite_difference_gradcheck(lambda a, b: multi_head_attention(a, b, b, mha, mask).output, [q, k])
    assert report.passed, report.messages


def test_gradcheck_layer_norm(double_precision):
    torch.manual_seed(0)
    norm = nn.LayerNorm(8)
    nn.init.normal_(norm.weight)
    (x,) = _inputs((3, 8), dtype=torch.float64)
    report = finite_difference_gradcheck(lambda t: layer_norm(t, norm), [x])
    assert report.passed, report.messages


def test_gradcheck_decoder_layer(double_precision):
    torch.manual_seed(0)
    layer = DecoderLayer(8, 2, 16)
    tgt, memory = _inputs((3, 8), (6, 8), dtype=torch.float64)
    mask = torch.zeros(3, 6, dtype=torch.float64)
    mask[:, 4:] = float('-inf')
    report = finite_difference_gradcheck(lambda t, m: layer(t, m, memory_mask=mask)[0], [tgt, memory])
    assert report.passed, report.messages


def test_gradcheck_flags_wrong_gradient():
    def bad_grad(x):
        return _WrongGrad.apply(x)

    (x,) = _inputs((4,), dtype=torch.float64)
    report = finite_difference_gradcheck(bad_grad, [x + 2.0])
    assert not report.passed
    assert report.max_relative_error > 0.1


def test_gradcheck_requires_double():
    with pytest.raises(ShapeError):
        finite_difference_gradcheck(lambda t: t * 2, [torch.ones(3)])


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x ** 2

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * x * math.pi
