"""Attention layers relating current visual tokens to instruction and history."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def attention(q, k, v, w_q, w_k, w_v, mask=None, n_heads: int = 1, return_weights: bool = False):
    """Softmax((q W_Q)(k W_K)^T / sqrt(d_head)) (v W_V), per head.

    q: (..., a, d); k, v: (..., b, d); weights are (d_out, d) matrices applied
    as ``x @ w.T``. ``mask`` is boolean, broadcastable to (..., a, b), True = visible.
    """
    if k.shape[-2] == 0:
        raise ValueError("attention needs at least one key")
    Q, K, V = q @ w_q.T, k @ w_k.T, v @ w_v.T
    d = Q.shape[-1]
    if d % n_heads:
        raise ValueError(f"{n_heads} heads do not divide d={d}")
    dh = d // n_heads

    def split(x):
        return x.reshape(*x.shape[:-1], n_heads, dh).transpose(-3, -2)

    Q, K, V = split(Q), split(K), split(V)
    logits = Q @ K.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        logits = logits.masked_fill(~mask.unsqueeze(-3), float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ V).transpose(-3, -2)
    out = out.reshape(*out.shape[:-2], d)
    return (out, weights) if return_weights else out


class Attention(nn.Module):
    def __init__(self, d: int, n_heads: int = 1):
        super().__init__()
        self.n_heads = n_heads
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)

    def forward(self, q, k, v, mask=None):
        return attention(q, k, v, self.w_q.weight, self.w_k.weight, self.w_v.weight, mask, self.n_heads)


class EncoderBlock(nn.Module):
    """Cross-attention to context, self-attention, then LN(x + W2 GeLU(W1 x)).

    Residual connections wrap the two attention sub-layers and the FFN; the only
    normalization is the LayerNorm closing the block. ``mode="self"`` instead
    runs one attention over [context; current] keys followed by the same FFN.
    """

    def __init__(self, d: int, n_heads: int = 4, d_ff: int | None = None, mode: str = "cross"):
        super().__init__()
        if mode not in ("cross", "self"):
            raise ValueError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.cross = Attention(d, n_heads)
        self.self_attn = Attention(d, n_heads) if mode == "cross" else None
        d_ff = d_ff or 4 * d
        self.w1 = nn.Linear(d, d_ff)
        self.w2 = nn.Linear(d_ff, d)
        self.norm = nn.LayerNorm(d)

    def forward(self, x, ctx, ctx_mask=None, self_mask=None):
        """x: (B, m, d) current tokens; ctx: (B, c, d) fixed context tokens."""
        if self.mode == "cross":
            if ctx.shape[-2] == 0:
                raise ValueError("cross-attention needs a non-empty context")
            x = x + self.cross(x, ctx, ctx, ctx_mask)
            x = x + self.self_attn(x, x, x, self_mask)
        else:
            keys = torch.cat([ctx, x], dim=-2)
            mask = None
            if ctx_mask is not None or self_mask is not None:
                B, m, c = x.shape[0], x.shape[-2], ctx.shape[-2]
                cm = ctx_mask if ctx_mask is not None else torch.ones(1, m, c, dtype=torch.bool)
                sm = self_mask if self_mask is not None else torch.ones(1, m, m, dtype=torch.bool)
                mask = torch.cat([cm.expand(B, m, c), sm.expand(B, m, m)], dim=-1)
            x = x + self.cross(x, keys, keys, mask)
        return self.norm(x + self.w2(F.gelu(self.w1(x))))


def context_masks(n_steps: int, per_step: int, instr_mask: torch.Tensor, history: bool):
    """Block-causal visibility for all steps at once.

    Queries are the per-step current tokens flattened as (step, token). The
    context is [instruction; visual tokens of every step]; a query at step t sees
    the instruction and, with ``history``, visual tokens of steps < t only.
    Returns (ctx_mask (B, T*m, n + T*m), self_mask (1, T*m, T*m)).
    """
    B, n = instr_mask.shape
    steps = torch.arange(n_steps).repeat_interleave(per_step)
    vis = steps[None, :] < steps[:, None]
    if not history:
        vis = torch.zeros_like(vis)
    ctx = torch.cat(
        [instr_mask[:, None, :].expand(B, len(steps), n), vis[None].expand(B, -1, -1)], dim=-1
    )
    same = (steps[None, :] == steps[:, None])[None]
    return ctx, same


class MultimodalTransformer(nn.Module):
    def __init__(self, d: int, n_layers: int = 2, n_heads: int = 4, d_ff: int | None = None,
                 mode: str = "cross"):
        super().__init__()
        self.blocks = nn.ModuleList([EncoderBlock(d, n_heads, d_ff, mode) for _ in range(n_layers)])

    def forward(self, current, instr, instr_mask, visual, n_steps, per_step, history=True):
        """current/visual: (B, T*m, d); instr: (B, n, d) -> contextualized current tokens."""
        ctx = torch.cat([instr, visual], dim=1)
        ctx_mask, self_mask = context_masks(n_steps, per_step, instr_mask, history)
        x = current
        for blk in self.blocks:
            x = blk(x, ctx, ctx_mask, self_mask)
        return x
