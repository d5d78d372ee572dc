"""Disentangled (DDCA) and contextual (CDCA) dual cross-attention, plus fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .graph import PerAUHead

SOURCES = ("DDCA_v2t", "DDCA_t2v", "CDCA_t2v", "CDCA_v2t")


@dataclass
class AttentionRecord:
    weights: torch.Tensor  # [..., n_query, n_key], rows sum to 1
    scale: float
    source: str


def scaled_cross_attention(queries, keys, values, W_Q, W_K, W_V, key_mask=None):
    """softmax((W_Q q)(W_K k)^T / sqrt(d)) (W_V v) with a row-wise softmax over keys.

    ``W_*`` are ``[d, d_in]`` matrices. Leading dimensions broadcast, so a
    per-AU query block ``[B, N, 1, d]`` can attend over per-AU keys ``[N, L, d]``.
    ``key_mask`` (True = valid) has the keys' shape without the feature axis.
    """
    if keys.shape[-2] == 0:
        raise ValueError("cross-attention needs at least one key")
    d = W_Q.shape[0]
    scale = 1.0 / math.sqrt(d)
    q = queries @ W_Q.T
    k = keys @ W_K.T
    v = values @ W_V.T
    scores = (q @ k.transpose(-1, -2)) * scale
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[..., None, :], float("-inf"))
    weights = scores.softmax(dim=-1)
    return weights @ v, weights, scale


class CrossAttention(nn.Module):
    """Single-head cross-attention with bias-free projections."""

    def __init__(self, width: int, in_width: int | None = None):
        super().__init__()
        in_width = in_width or width
        self.W_Q = nn.Linear(in_width, width, bias=False)
        self.W_K = nn.Linear(in_width, width, bias=False)
        self.W_V = nn.Linear(in_width, width, bias=False)
        # uniform attention at initialisation
        nn.init.zeros_(self.W_Q.weight)

    def forward(self, queries, keys, values, key_mask=None):
        return scaled_cross_attention(queries, keys, values, self.W_Q.weight, self.W_K.weight,
                                      self.W_V.weight, key_mask)


class DDCA(nn.Module):
    """Per-AU, one-to-one vision <-> language attention.

    Forward: U_i queries AU i's own description tokens. Reverse: Z_i queries
    the cells of AU i's own spatial map F_i. D_i = pool(U_hat_i) + Z_hat_i.
    """

    def __init__(self, width: int, text_width: int):
        super().__init__()
        self.token_proj = nn.Linear(text_width, width)
        self.forward_attn = CrossAttention(width)
        self.reverse_attn = CrossAttention(width)

    def forward(self, U, F_maps, tokens, token_mask, Z):
        """
        Args:
            U: ``[B, N, d]`` AU vectors.
            F_maps: ``[B, N, H, W, d]`` AU spatial maps.
            tokens: ``[N, L, d']`` description token embeddings.
            token_mask: ``[N, L]`` validity mask.
            Z: ``[N, d]`` contextual text matrix.
        Returns:
            ``D [B, N, d]`` and the two attention records.
        """
        if bool((token_mask.sum(-1) == 0).any()):
            raise ValueError("every AU needs at least one description token")
        b, n, h, w, d = F_maps.shape
        T = self.token_proj(tokens)
        u_hat, a_fwd, scale = self.forward_attn(U[:, :, None, :], T, T, token_mask)
        u_hat = u_hat.mean(dim=-2)  # pool over the (single) query row
        cells = F_maps.reshape(b, n, h * w, d)
        z_hat, a_rev, _ = self.reverse_attn(Z[None, :, None, :], cells, cells)
        z_hat = z_hat[:, :, 0]
        records = {
            "DDCA_v2t": AttentionRecord(a_fwd[:, :, 0], scale, "DDCA_v2t"),
            "DDCA_t2v": AttentionRecord(a_rev[:, :, 0], scale, "DDCA_t2v"),
        }
        return u_hat + z_hat, records


class CDCA(nn.Module):
    """Global map <-> all AU descriptions.

    Forward: each Z_i queries every spatial token of X_g. Reverse: each spatial
    token queries all rows of Z; the refined map is averaged and added to
    every AU's forward output.
    """

    def __init__(self, width: int):
        super().__init__()
        self.forward_attn = CrossAttention(width)
        self.reverse_attn = CrossAttention(width)

    def forward(self, xg, Z):
        b, h, w, d = xg.shape
        flat = xg.reshape(b, h * w, d)
        z_hat, a_fwd, scale = self.forward_attn(Z[None], flat, flat)  # [B, N, d]
        x_hat, a_rev, _ = self.reverse_attn(flat, Z[None], Z[None])  # [B, HW, d]
        records = {
            "CDCA_t2v": AttentionRecord(a_fwd, scale, "CDCA_t2v"),
            "CDCA_v2t": AttentionRecord(a_rev, scale, "CDCA_v2t"),
        }
        return x_hat.mean(dim=1, keepdim=True) + z_hat, records


def ddca(U, F_maps, tokens, token_mask, Z, params: DDCA):
    return params(U, F_maps, tokens, token_mask, Z)


def cdca(xg, Z, params: CDCA):
    return params(xg, Z)


class FusionHead(nn.Module):
    """h_i = FC([U_i; D_i; C_i]), followed by a per-AU scalar head."""

    def __init__(self, num_aus: int, width: int):
        super().__init__()
        self.width = width
        self.fc = nn.Linear(3 * width, width)
        self.head = PerAUHead(num_aus, width)

    def forward(self, U, D, C):
        if not U.shape[-1] == D.shape[-1] == C.shape[-1] == self.width:
            raise ValueError(f"fusion expects width {self.width}, got {U.shape[-1]}, {D.shape[-1]}, {C.shape[-1]}")
        return self.head(self.fc(torch.cat([U, D, C], dim=-1)))


def fuse_and_predict(U, D, C, fusion: FusionHead):
    """Returns ``(probabilities, logits)``."""
    logits = fusion(U, D, C)
    return torch.sigmoid(logits), logits


class InteractionModule(nn.Module):
    def __init__(self, num_aus: int, width: int, text_width: int):
        super().__init__()
        self.ddca = DDCA(width, text_width)
        self.cdca = CDCA(width)
        self.fusion = FusionHead(num_aus, width)
