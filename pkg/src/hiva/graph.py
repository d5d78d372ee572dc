"""Per-AU branches, the dynamic top-K similarity graph and its refinement."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LOSS_EPS = 1e-7
_LOGIT_CLAMP = math.log((1 - LOSS_EPS) / LOSS_EPS)


class AUBranches(nn.Module):
    """N independent pointwise convolutions followed by global average pooling."""

    def __init__(self, num_aus: int, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_aus, channels, channels))
        self.bias = nn.Parameter(torch.zeros(num_aus, channels))
        bound = 1 / math.sqrt(channels)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, xg: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``xg [B, H, W, C]`` -> maps ``[B, N, H, W, C]`` and vectors ``[B, N, C]``."""
        maps = torch.einsum("bhwc,noc->bnhwo", xg, self.weight) + self.bias[None, :, None, None, :]
        return maps, maps.mean(dim=(2, 3))


def branch_features(xg: torch.Tensor, branches: AUBranches):
    return branches(xg)


def pairwise_similarity(U: torch.Tensor) -> torch.Tensor:
    return U @ U.transpose(-1, -2)


def build_topk_graph(S: torch.Tensor, k: int) -> torch.Tensor:
    """Directed adjacency keeping the ``k`` most similar other nodes per row.

    Ties go to the lower node index. Works on ``[N, N]`` or ``[B, N, N]``.
    """
    n = S.shape[-1]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    eye = torch.eye(n, dtype=torch.bool, device=S.device)
    masked = S.detach().masked_fill(eye, float("-inf"))
    order = torch.sort(masked, dim=-1, descending=True, stable=True).indices[..., :k]
    adj = torch.zeros(S.shape, dtype=S.dtype, device=S.device)
    return adj.scatter_(-1, order, 1.0)


class GraphRefine(nn.Module):
    """U_upd = relu(U + W_g (U * sigmoid(m)) + W_m m), with m_i = sum_j a_ij W_r U_j."""

    def __init__(self, channels: int):
        super().__init__()
        self.W_r = nn.Linear(channels, channels, bias=False)
        self.W_g = nn.Linear(channels, channels, bias=False)
        self.W_m = nn.Linear(channels, channels, bias=False)

    def forward(self, U: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        msg = adj @ self.W_r(U)
        return F.relu(U + self.W_g(U * torch.sigmoid(msg)) + self.W_m(msg))


def graph_refine(U: torch.Tensor, adj: torch.Tensor, refine: GraphRefine) -> torch.Tensor:
    return refine(U, adj)


class PerAUHead(nn.Module):
    """One scalar linear head per AU: logit_i = w_i . x_i + b_i."""

    def __init__(self, num_aus: int, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_aus, channels))
        self.bias = nn.Parameter(torch.zeros(num_aus))
        nn.init.uniform_(self.weight, -1 / math.sqrt(channels), 1 / math.sqrt(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x * self.weight).sum(-1) + self.bias


def stage1_predict(U_refined: torch.Tensor, head: PerAUHead) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(probabilities, logits)``."""
    logits = head(U_refined)
    return torch.sigmoid(logits), logits


class GraphModule(nn.Module):
    """Similarity -> top-K graph -> refinement -> stage-1 head."""

    def __init__(self, num_aus: int, channels: int, k: int = 3):
        super().__init__()
        self.k = k
        self.refine = GraphRefine(channels)
        self.head = PerAUHead(num_aus, channels)

    def forward(self, U: torch.Tensor) -> dict[str, torch.Tensor]:
        S = pairwise_similarity(U)
        adj = build_topk_graph(S, self.k)
        refined = self.refine(U, adj)
        logits = self.head(refined)
        return {"similarity": S, "adjacency": adj, "refined": refined, "logits": logits}


def au_loss(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted multi-label sigmoid cross-entropy, summed over AUs and averaged over the batch.

    Probabilities are clamped to ``[eps, 1 - eps]`` by clamping logits, then
    the loss is evaluated in the log-sigmoid form.
    """
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ in shape")
    if weights is not None and weights.shape[-1] != logits.shape[-1]:
        raise ValueError("class weights do not match the AU count")
    z = logits.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)
    y = labels.to(z.dtype)
    per_au = F.binary_cross_entropy_with_logits(z, y, reduction="none")
    if weights is not None:
        per_au = per_au * weights.to(z.dtype)
    per_sample = per_au.sum(-1)
    return per_sample.mean() if per_sample.dim() else per_sample
