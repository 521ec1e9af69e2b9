"""Masked multi-head attention for vehicle-vehicle and lane-vehicle interactions."""
from __future__ import annotations

import math

import torch
import torch.nn as nn


class MLP(nn.Module):
    """Two linear layers with a smooth nonlinearity in between."""

    def __init__(self, in_dim, hidden, out_dim, act=nn.Tanh):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), act(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net(x)


class MaskedAttention(nn.Module):
    """One query per vehicle attending over a masked set of keys.

    Queries come from the vehicle's own displacement, keys and values from a
    set of relative displacements (neighbours or lane nodes). Masked keys get
    the most negative finite score before the softmax; a query whose keys are
    all masked returns the zero vector.
    """

    def __init__(self, query_dim=2, key_dim=2, dim=32, heads=8, in_scale=1.0, key_scale=1.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"attention size {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.in_scale, self.key_scale = in_scale, key_scale
        self.f_q = MLP(query_dim, dim, dim)
        self.f_k = MLP(key_dim, dim, dim)
        self.f_v = MLP(key_dim, dim, dim)
        self.merge = nn.Linear(dim, dim)

    def forward(self, query, keys, mask, return_weights=False):
        """``query [..., q]``, ``keys [..., M, k]``, ``mask [..., M]`` -> ``[..., D]``."""
        mask = mask.bool()
        # masked keys never reach the networks, so their contents cannot leak
        keys = torch.where(mask[..., None], keys, torch.zeros_like(keys))
        h, dh = self.heads, self.dim // self.heads
        q = self.f_q(query / self.in_scale).unflatten(-1, (h, dh))  # [..., H, dh]
        k = self.f_k(keys / self.key_scale).unflatten(-1, (h, dh))  # [..., M, H, dh]
        v = self.f_v(keys / self.key_scale).unflatten(-1, (h, dh))
        scores = torch.einsum("...hd,...mhd->...hm", q, k) / math.sqrt(self.dim)
        fill = torch.finfo(scores.dtype).min
        scores = scores.masked_fill(~mask[..., None, :], fill)
        w = torch.softmax(scores, dim=-1)  # [..., H, M]
        heads = torch.einsum("...hm,...mhd->...hd", w, v).flatten(-2)
        out = self.merge(heads)
        has_key = mask.any(-1, keepdim=True)
        out = torch.where(has_key, out, torch.zeros_like(out))
        if return_weights:
            return out, torch.where(has_key[..., None], w, torch.zeros_like(w))
        return out


def vv_self_attention(X, R, nbr_mask, attn: MaskedAttention, return_weights=False):
    """Vehicle-vehicle embedding ``p^VV`` from own displacement and neighbour offsets."""
    return attn(X, R, nbr_mask, return_weights=return_weights)


def lane_attention(X, L, lane_mask, attn: MaskedAttention, return_weights=False):
    """Lane-conditioned embedding ``p^LV`` over the (front, left, right) lane slots."""
    if L.shape[-2] != 3:
        raise ValueError(f"expected 3 lane slots, got {L.shape[-2]}")
    return attn(X, L, lane_mask, return_weights=return_weights)
