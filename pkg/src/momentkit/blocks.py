"""Transformer building blocks on the autograd core.

Three attention wirings cover everything the model needs:

  * ``self_attention``  — queries, keys, values all from one sequence
  * ``compress``        — a small set of bottleneck tokens queries a long
                          sequence (cost linear in sequence length)
  * ``expand``          — the long sequence queries the bottleneck tokens
                          to read the fused information back out

All three share one primitive: out_i = res_i + W_z · sum_j a_ij · (v_j W_v)
with a_ij = softmax_j((q_i W_q) · (k_j W_k)). Learnable positional encodings
are added to the *inputs* of the query/key projections only — never to the
values — and each wiring chooses which side receives them.

Sequences are (N, dim) float64 tensors; one sample at a time.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import RngState, ShapeError, Tensor


class Module:
    """Minimal parameter container with deterministic reflective traversal."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        found: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    found.append((full, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(full))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_parameters(f"{full}.{i}"))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        found.append((f"{full}.{i}", item))
        return found

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _uniform_init(rng: RngState, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Module):
    """Affine map y = x W + b with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init."""

    def __init__(self, in_dim: int, out_dim: int, rng: RngState, bias: bool = True):
        self.weight = _uniform_init(rng, in_dim, (in_dim, out_dim))
        self.bias = _uniform_init(rng, in_dim, (out_dim,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.weight)
        if self.bias is not None:
            out = ag.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)


class PositionalEncoding(Module):
    """Learnable per-index encoding table; rows(n) returns the first n rows."""

    def __init__(self, max_len: int, dim: int, rng: RngState, scale: float = 0.02):
        self.max_len = max_len
        self.table = Tensor(rng.normal((max_len, dim), scale=scale), requires_grad=True)

    def rows(self, n: int) -> Tensor:
        if n > self.max_len:
            raise ShapeError(f"sequence length {n} exceeds positional table capacity {self.max_len}")
        return ag.slice_rows(self.table, 0, n)


class BottleneckTokens(Module):
    """Learnable seed values for the cross-modal bottleneck (n_tokens, dim)."""

    def __init__(self, n_tokens: int, dim: int, rng: RngState, scale: float = 0.02):
        self.n_tokens = n_tokens
        self.tokens = Tensor(rng.normal((n_tokens, dim), scale=scale), requires_grad=True)

    def value(self) -> Tensor:
        return ag.slice_rows(self.tokens, 0, self.n_tokens)


class AttentionParams(Module):
    """Projection weights for one multi-head attention block (no biases)."""

    def __init__(self, dim: int, n_heads: int, rng: RngState):
        if dim % n_heads != 0:
            raise ShapeError(f"model dim {dim} is not divisible by head count {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.w_q = _uniform_init(rng, dim, (dim, dim))
        self.w_k = _uniform_init(rng, dim, (dim, dim))
        self.w_v = _uniform_init(rng, dim, (dim, dim))
        self.w_z = _uniform_init(rng, dim, (dim, dim))


def attention(
    params: AttentionParams,
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    residual: Tensor,
    q_pos: Tensor | None = None,
    k_pos: Tensor | None = None,
    scaled: bool = True,
    drop_rate: float = 0.0,
    rng: RngState | None = None,
    training: bool = False,
) -> Tensor:
    """Multi-head attention with a residual connection.

    ``scaled=False`` drops the 1/sqrt(head_dim) factor on the scores, reducing
    each head to the plain bilinear form that the reference oracles compute.
    """
    if q_pos is not None:
        q_in = ag.add(q_in, q_pos)
    if k_pos is not None:
        k_in = ag.add(k_in, k_pos)
    q_full = ag.matmul(q_in, params.w_q)
    k_full = ag.matmul(k_in, params.w_k)
    v_full = ag.matmul(v_in, params.w_v)
    head_outs = []
    for h in range(params.n_heads):
        lo, hi = h * params.head_dim, (h + 1) * params.head_dim
        qh = ag.slice_cols(q_full, lo, hi)
        kh = ag.slice_cols(k_full, lo, hi)
        vh = ag.slice_cols(v_full, lo, hi)
        scores = ag.matmul(qh, ag.transpose(kh))
        if scaled:
            scores = ag.mul(scores, 1.0 / math.sqrt(params.head_dim))
        weights = ag.softmax(scores, axis=-1)
        head_outs.append(ag.matmul(weights, vh))
    merged = head_outs[0] if params.n_heads == 1 else ag.concat(head_outs, axis=1)
    out = ag.matmul(merged, params.w_z)
    if drop_rate > 0.0:
        out = ag.dropout(out, drop_rate, rng, training)
    return ag.add(residual, out)


def self_attention(
    x: Tensor,
    params: AttentionParams,
    pos: Tensor | None = None,
    norm: LayerNorm | None = None,
    scaled: bool = True,
    drop_rate: float = 0.0,
    rng: RngState | None = None,
    training: bool = False,
) -> Tensor:
    """Within-sequence attention; the positional encoding feeds both queries and keys."""
    h = norm(x) if norm is not None else x
    return attention(
        params, h, h, h, residual=x, q_pos=pos, k_pos=pos,
        scaled=scaled, drop_rate=drop_rate, rng=rng, training=training,
    )


def compress(
    x: Tensor,
    z: Tensor,
    params: AttentionParams,
    pos: Tensor | None = None,
    norm_x: LayerNorm | None = None,
    norm_z: LayerNorm | None = None,
    scaled: bool = True,
    drop_rate: float = 0.0,
    rng: RngState | None = None,
    training: bool = False,
) -> Tensor:
    """Bottleneck tokens z attend over sequence x: z_i' = z_i + W_z sum_j a_ij v_j.

    The positional encoding describes x, so it feeds the key side only.
    """
    hq = norm_z(z) if norm_z is not None else z
    hx = norm_x(x) if norm_x is not None else x
    return attention(
        params, hq, hx, hx, residual=z, q_pos=None, k_pos=pos,
        scaled=scaled, drop_rate=drop_rate, rng=rng, training=training,
    )


def expand(
    x: Tensor,
    z: Tensor,
    params: AttentionParams,
    pos: Tensor | None = None,
    norm_x: LayerNorm | None = None,
    norm_z: LayerNorm | None = None,
    scaled: bool = True,
    drop_rate: float = 0.0,
    rng: RngState | None = None,
    training: bool = False,
) -> Tensor:
    """Sequence x reads the fused bottleneck z back out: x_i' = x_i + W_z sum_j a_ij v_j.

    The positional encoding describes x, so it feeds the query side only.
    """
    hq = norm_x(x) if norm_x is not None else x
    hz = norm_z(z) if norm_z is not None else z
    return attention(
        params, hq, hz, hz, residual=x, q_pos=pos, k_pos=None,
        scaled=scaled, drop_rate=drop_rate, rng=rng, training=training,
    )


class FeedForward(Module):
    """Position-wise two-layer MLP (ReLU, 4x hidden) with a residual connection."""

    def __init__(self, dim: int, rng: RngState, hidden_mult: int = 4, drop_rate: float = 0.0):
        self.lin1 = Linear(dim, hidden_mult * dim, rng)
        self.lin2 = Linear(hidden_mult * dim, dim, rng)
        self.drop_rate = drop_rate

    def __call__(
        self,
        x: Tensor,
        norm: LayerNorm | None = None,
        rng: RngState | None = None,
        training: bool = False,
    ) -> Tensor:
        h = norm(x) if norm is not None else x
        h = ag.relu(self.lin1(h))
        if self.drop_rate > 0.0:
            h = ag.dropout(h, self.drop_rate, rng, training)
        h = self.lin2(h)
        if self.drop_rate > 0.0:
            h = ag.dropout(h, self.drop_rate, rng, training)
        return ag.add(x, h)
