"""
Differentiable building blocks shared by every model stage.

Attention, normalization, feed-forward and MLP layers, the DETR-style sine positional
encoding, and a finite-difference gradient checker used by the test suite.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from errors import ConfigurationError, ShapeError

NEG_INF = float('-inf')
LN_EPS = 1e-5


@dataclass
class AttentionResult:
    output: torch.Tensor
    weights: torch.Tensor        # (..., heads, L_q, L_k)
    fallback_rows: torch.Tensor  # (..., L_q) bool, rows whose keys were all masked

    @property
    def any_fallback(self):
        return bool(self.fallback_rows.any())


class MultiHeadAttention(nn.Module):
    """W_q, W_k, W_v, W_o with `heads` heads of width d_k; heads * d_k == width."""

    def __init__(self, width, heads, dropout=0.0):
        super().__init__()
        if heads < 1 or width % heads != 0:
            raise ConfigurationError(f'heads ({heads}) must divide width ({width})')
        self.width = width
        self.heads = heads
        self.d_k = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.o_proj = nn.Linear(width, width)
        self.dropout = nn.Dropout(dropout)
        self._reset_parameters()

    def _reset_parameters(self):
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.o_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, q, k, v, mask=None):
        return multi_head_attention(q, k, v, self, mask=mask)


def _split_heads(x, heads):
    *lead, length, width = x.shape
    return x.reshape(*lead, length, heads, width // heads).transpose(-3, -2)


def _merge_heads(x):
    *lead, heads, length, d_k = x.shape
    return x.transpose(-3, -2).reshape(*lead, length, heads * d_k)


def multi_head_attention(q, k, v, params: MultiHeadAttention, mask=None) -> AttentionResult:
    """Scaled dot-product attention with an additive 0 / -inf bias.

    Args:
        q: (..., L_q, D) queries
        k, v: (..., L_k, D) keys and values
        params: the projection maps
        mask: optional additive bias broadcastable to (..., L_q, L_k); entries 0 or -inf

    Rows whose keys are all masked fall back to uniform weights over every key and are
    reported in ``fallback_rows``.
    """
    if q.dim() < 2 or k.dim() < 2 or v.dim() < 2:
        raise ShapeError('attention inputs need at least (L, D)')
    if q.shape[-1] != params.width or k.shape[-1] != params.width or v.shape[-1] != params.width:
        raise ShapeError(
            f'attention width mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, '
            f'v {tuple(v.shape)}, expected last dim {params.width}'
        )
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f'key/value lengths differ: {k.shape[-2]} vs {v.shape[-2]}')
    if q.shape[-2] < 1 or k.shape[-2] < 1:
        raise ShapeError('attention needs L_q >= 1 and L_k >= 1')
    len_q, len_k = q.shape[-2], k.shape[-2]

    qh = _split_heads(params.q_proj(q), params.heads)
    kh = _split_heads(params.k_proj(k), params.heads)
    vh = _split_heads(params.v_proj(v), params.heads)
    scores = torch.matmul(qh, kh.transpose(-2, -1)) / math.sqrt(params.d_k)

    lead = q.shape[:-2]
    if mask is None:
        fallback = torch.zeros(*lead, len_q, dtype=torch.bool, device=q.device)
        weights = scores.softmax(dim=-1)
    else:
        if mask.shape[-2:] != (len_q, len_k):
            raise ShapeError(f'mask shape {tuple(mask.shape)} does not end with ({len_q}, {len_k})')
        mask = mask.to(scores.dtype)
        fallback = torch.isneginf(mask).all(dim=-1)
        safe_mask = mask.masked_fill(fallback.unsqueeze(-1), 0.0)
        # broadcast over the head axis
        weights = (scores + safe_mask.unsqueeze(-3)).softmax(dim=-1)
        if bool(fallback.any()):
            uniform = torch.full_like(weights, 1.0 / len_k)
            weights = torch.where(fallback.unsqueeze(-3).unsqueeze(-1), uniform, weights)
        fallback = fallback.expand(*lead, len_q) if fallback.dim() >= 1 else fallback

    attended = torch.matmul(params.dropout(weights), vh)
    return AttentionResult(params.o_proj(_merge_heads(attended)), weights, fallback)


def layer_norm(x, params: nn.LayerNorm):
    """Per-position standardization followed by the affine parameters."""
    if x.shape[-1] < 2:
        raise ShapeError('layer_norm needs D >= 2')
    return params(x)


class FeedForward(nn.Module):
    """Two linear maps with a hidden expansion; input width == output width."""

    def __init__(self, width, hidden, dropout=0.0, activation='relu'):
        super().__init__()
        self.linear1 = nn.Linear(width, hidden)
        self.linear2 = nn.Linear(hidden, width)
        self.dropout = nn.Dropout(dropout)
        self.activation = _activation(activation)

    def forward(self, x):
        return self.linear2(self.dropout(self.activation(self.linear1(x))))


def _activation(name):
    if name == 'relu':
        return F.relu
    if name == 'gelu':
        return F.gelu
    if name in ('identity', 'linear'):
        return lambda x: x
    raise ConfigurationError(f'unknown activation: {name}')


class MLP(nn.Module):
    """Chain of linear layers; the activation sits between layers, not after the last."""

    def __init__(self, layer_dims: Sequence[int], activation='relu'):
        super().__init__()
        layer_dims = list(layer_dims or [])
        if len(layer_dims) < 2:
            raise ConfigurationError(f'MLP needs at least input and output dims, got {layer_dims}')
        self.layer_dims = layer_dims
        self.layers = nn.ModuleList(
            nn.Linear(d_in, d_out) for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:])
        )
        self.activation = _activation(activation)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


def mlp(x, layer_dims, activation='relu', seed=None):
    """Functional form: builds an MLP for `layer_dims` (seeded when given) and applies it."""
    if seed is not None:
        torch.manual_seed(seed)
    module = MLP(layer_dims, activation=activation).to(dtype=x.dtype, device=x.device)
    return module(x)


def sine_positional_encoding(h, w, channels, temperature=10000, scale=2 * math.pi, eps=1e-6):
    """(h, w, channels) table; first half encodes rows, second half columns."""
    if channels % 4 != 0:
        raise ShapeError(f'sine positional encoding needs channels divisible by 4, got {channels}')
    if h < 1 or w < 1:
        raise ShapeError(f'grid must be at least 1x1, got {h}x{w}')
    num_feats = channels // 2
    y_embed = torch.arange(1, h + 1, dtype=torch.float64).unsqueeze(1).expand(h, w)
    x_embed = torch.arange(1, w + 1, dtype=torch.float64).unsqueeze(0).expand(h, w)
    y_embed = y_embed / (h + eps) * scale
    x_embed = x_embed / (w + eps) * scale

    dim_t = torch.arange(num_feats, dtype=torch.float64)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode='floor') / num_feats)
    pos_x = x_embed[..., None] / dim_t
    pos_y = y_embed[..., None] / dim_t
    pos_x = torch.stack((pos_x[..., 0::2].sin(), pos_x[..., 1::2].cos()), dim=-1).flatten(-2)
    pos_y = torch.stack((pos_y[..., 0::2].sin(), pos_y[..., 1::2].cos()), dim=-1).flatten(-2)
    return torch.cat((pos_y, pos_x), dim=-1).to(torch.get_default_dtype())


def flat_positional_encoding(h, w, channels, like=None):
    pos = sine_positional_encoding(h, w, channels).reshape(h * w, channels)
    if like is not None:
        pos = pos.to(dtype=like.dtype, device=like.device)
    return pos


def _with_pos(x, pos):
    return x if pos is None else x + pos


class EncoderLayer(nn.Module):
    """Post-norm self-attention + FFN; positions are added to queries and keys only."""

    def __init__(self, width, heads, ffn_dim, dropout=0.0, activation='relu'):
        super().__init__()
        self.self_attn = MultiHeadAttention(width, heads, dropout)
        self.norm1 = nn.LayerNorm(width, eps=LN_EPS)
        self.ffn = FeedForward(width, ffn_dim, dropout, activation)
        self.norm2 = nn.LayerNorm(width, eps=LN_EPS)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pos=None):
        qk = _with_pos(x, pos)
        x = self.norm1(x + self.dropout(self.self_attn(qk, qk, x).output))
        return self.norm2(x + self.dropout(self.ffn(x)))


class DecoderLayer(nn.Module):
    """Self-attention over queries, cross-attention to a memory, FFN; post-norm throughout.

    ``memory_pos`` is added to memory keys, ``memory_mask`` is an additive bias over the
    memory rows. The entity decoder passes positions; the relation decoder passes masks.
    """

    def __init__(self, width, heads, ffn_dim, dropout=0.0, activation='relu'):
        super().__init__()
        self.self_attn = MultiHeadAttention(width, heads, dropout)
        self.norm1 = nn.LayerNorm(width, eps=LN_EPS)
        self.cross_attn = MultiHeadAttention(width, heads, dropout)
        self.norm2 = nn.LayerNorm(width, eps=LN_EPS)
        self.ffn = FeedForward(width, ffn_dim, dropout, activation)
        self.norm3 = nn.LayerNorm(width, eps=LN_EPS)
        self.dropout = nn.Dropout(dropout)

    def forward(self, tgt, memory, memory_pos=None, memory_mask=None):
        tgt = self.norm1(tgt + self.dropout(self.self_attn(tgt, tgt, tgt).output))
        cross = self.cross_attn(tgt, _with_pos(memory, memory_pos), memory, mask=memory_mask)
        tgt = self.norm2(tgt + self.dropout(cross.output))
        tgt = self.norm3(tgt + self.dropout(self.ffn(tgt)))
        return tgt, cross


@dataclass
class GradcheckReport:
    max_relative_error: float
    max_abs_error: float
    condition_number: float
    tolerance: float
    finite: bool = True
    ill_conditioned: bool = False
    messages: List[str] = field(default_factory=list)

    @property
    def passed(self):
        return self.finite and not self.ill_conditioned and self.max_relative_error < self.tolerance


def _flat_output(out):
    if isinstance(out, (tuple, list)):
        return torch.cat([o.reshape(-1) for o in out])
    if isinstance(out, AttentionResult):
        return out.output.reshape(-1)
    return out.reshape(-1)


def finite_difference_gradcheck(
    op: Callable,
    inputs: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
    condition_limit: float = 1e6,
) -> GradcheckReport:
    """Compare the autograd Jacobian of `op` with central differences.

    Inputs must be double precision. The relative error is the Frobenius norm of the
    Jacobian difference over the larger Jacobian norm. Points whose relative condition
    number ||J|| ||x|| / ||f(x)|| exceeds `condition_limit` are flagged ill-conditioned
    instead of being reported as passing.
    """
    inputs = [x.detach().clone() for x in inputs]
    if any(x.dtype != torch.float64 for x in inputs):
        raise ShapeError('finite_difference_gradcheck needs float64 inputs')

    def flat_fn(*xs):
        return _flat_output(op(*xs))

    with torch.no_grad():
        base = flat_fn(*inputs)
    messages = []
    analytic = torch.autograd.functional.jacobian(flat_fn, tuple(inputs))
    analytic = torch.cat([j.reshape(base.numel(), -1) for j in analytic], dim=1)

    columns = []
    with torch.no_grad():
        for x in inputs:
            flat = x.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                plus = flat_fn(*inputs)
                flat[i] = orig - epsilon
                minus = flat_fn(*inputs)
                flat[i] = orig
                columns.append((plus - minus) / (2 * epsilon))
    numeric = torch.stack(columns, dim=1)

    finite = bool(torch.isfinite(analytic).all() and torch.isfinite(numeric).all())
    if not finite:
        messages.append('non-finite gradient')
        return GradcheckReport(float('inf'), float('inf'), float('inf'), tolerance, False, False, messages)

    diff = analytic - numeric
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-300)
    rel = diff.norm().item() / denom
    x_norm = math.sqrt(sum(float((x ** 2).sum()) for x in inputs))
    f_norm = base.norm().item()
    cond = analytic.norm().item() * x_norm / f_norm if f_norm > 0 else float('inf')
    ill = not np.isfinite(cond) or cond > condition_limit
    if ill:
        messages.append(f'ill-conditioned point (relative condition number {cond:.3e})')
    return GradcheckReport(rel, diff.abs().max().item(), cond, tolerance, True, ill, messages)
