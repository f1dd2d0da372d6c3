"""Multi-head attention, pre-norm blocks, encoder stacks and the masked decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor
from .params import ones, trunc_normal, zeros
from .tokenizer import MaskPattern, scatter_back


@dataclass
class AttentionParams:
    wq: list[Tensor]  # per head, D x d
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor  # D x D

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def dim(self) -> int:
        return self.wo.shape[0]


@dataclass
class BlockParams:
    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor


@dataclass
class StackParams:
    blocks: list[BlockParams]
    placeholder: Tensor | None = None  # decoder mask token, 1 x D

    @property
    def depth(self) -> int:
        return len(self.blocks)


@dataclass
class OutputHead:
    """Final norm + linear projection from width D to ``out_dim``."""

    norm_g: Tensor
    norm_b: Tensor
    w: Tensor
    b: Tensor


@dataclass
class AttentionTrace:
    weights: list[np.ndarray] = field(default_factory=list)  # per head, n_q x n_kv


def init_attention(rng, dim: int, heads: int, std: float) -> AttentionParams:
    if dim % heads:
        raise ShapeError(f"heads={heads} does not divide dim={dim}")
    d = dim // heads
    return AttentionParams(
        [trunc_normal(rng, (dim, d), std) for _ in range(heads)],
        [trunc_normal(rng, (dim, d), std) for _ in range(heads)],
        [trunc_normal(rng, (dim, d), std) for _ in range(heads)],
        trunc_normal(rng, (dim, dim), std),
    )


def init_block(rng, dim: int, heads: int, std: float, ff_mult: int = 4) -> BlockParams:
    return BlockParams(
        init_attention(rng, dim, heads, std),
        ones(dim), zeros(dim), ones(dim), zeros(dim),
        trunc_normal(rng, (dim, ff_mult * dim), std), zeros(ff_mult * dim),
        trunc_normal(rng, (ff_mult * dim, dim), std), zeros(dim),
    )


def init_stack(rng, depth: int, dim: int, heads: int, std: float, placeholder: bool = False) -> StackParams:
    blocks = [init_block(rng, dim, heads, std) for _ in range(depth)]
    return StackParams(blocks, trunc_normal(rng, (1, dim), std) if placeholder else None)


def init_head(rng, dim: int, out_dim: int, std: float) -> OutputHead:
    return OutputHead(ones(dim), zeros(dim), trunc_normal(rng, (dim, out_dim), std), zeros(out_dim))


def mh_attention(queries_from: Tensor, kv_from: Tensor, p: AttentionParams, trace: AttentionTrace | None = None) -> Tensor:
    """Concat_h softmax(Xq Wq_h (Xkv Wk_h)^T / sqrt(d)) Xkv Wv_h, then W_O."""
    dim = p.dim
    if queries_from.shape[1] != dim or kv_from.shape[1] != dim:
        raise ShapeError(f"attention width {dim} vs inputs {queries_from.shape} / {kv_from.shape}")
    scale = 1.0 / math.sqrt(dim // p.heads)
    heads = []
    for wq, wk, wv in zip(p.wq, p.wk, p.wv):
        q = nx.matmul(queries_from, wq)
        k = nx.matmul(kv_from, wk)
        v = nx.matmul(kv_from, wv)
        a = nx.softmax_rows(nx.scale(nx.matmul(q, nx.transpose(k)), scale))
        if trace is not None:
            trace.weights.append(a.data)
        heads.append(nx.matmul(a, v))
    return nx.matmul(nx.concat(heads, axis=1) if len(heads) > 1 else heads[0], p.wo)


def feed_forward(x: Tensor, p: BlockParams) -> Tensor:
    return nx.matmul(nx.gelu(nx.matmul(x, p.ff1_w) + p.ff1_b), p.ff2_w) + p.ff2_b


def block_forward(x: Tensor, cond: Tensor | None, p: BlockParams, trace: AttentionTrace | None = None) -> Tensor:
    """Pre-norm residual block; with ``cond`` the queries come from ``cond``."""
    if cond is not None and cond.shape[1] != x.shape[1]:
        raise ShapeError(f"conditioning width {cond.shape[1]} differs from {x.shape[1]}")
    h = nx.layer_norm(x, p.ln1_g, p.ln1_b)
    q = h if cond is None or cond is x else nx.layer_norm(cond, p.ln1_g, p.ln1_b)
    x = x + mh_attention(q, h, p.attn, trace)
    return x + feed_forward(nx.layer_norm(x, p.ln2_g, p.ln2_b), p)


def encoder_forward(x: Tensor, stack: StackParams) -> list[Tensor]:
    """Self-attention stack; returns every layer output X(1)..X(L)."""
    outs = []
    for blk in stack.blocks:
        x = block_forward(x, None, blk)
        outs.append(x)
    return outs


def head_forward(x: Tensor, head: OutputHead) -> Tensor:
    return nx.matmul(nx.layer_norm(x, head.norm_g, head.norm_b), head.w) + head.b


def decoder_forward(
    visible: Tensor,
    mask: MaskPattern,
    stack: StackParams,
    head: OutputHead,
    pe: np.ndarray | None = None,
) -> Tensor:
    """Scatter encoder rows back to N positions, run the decoder, project per token."""
    if stack.placeholder is None:
        raise ValueError("decoder stack has no placeholder token")
    if visible.shape[0] != len(mask.visible):
        raise IndexError(f"decoder got {visible.shape[0]} rows for {len(mask.visible)} visible tokens")
    x = scatter_back(visible, mask, stack.placeholder, pe)
    for blk in stack.blocks:
        x = block_forward(x, None, blk)
    return head_forward(x, head)
