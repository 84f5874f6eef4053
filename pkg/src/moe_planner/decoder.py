"""Mixture-of-experts trajectory decoder.

Queries start from encoded centerlines plus a learned per-mode embedding.
The first layer refines them with attention and a plain FFN. Later layers
route each query to its top-K experts, and the shared experts see every
query. Routing weights are the raw softmax scores at the selected experts
and are not renormalised.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from . import numerics as nm
from .encoder import PointSetEmbedding
from .features import CENTERLINE_DIM


class ConfigurationError(ValueError):
    pass


@dataclass
class RoutingDecision:
    scores: Tensor  # (..., M, N) softmax over routed experts
    selected: Tensor  # (..., M, K) expert indices, best first
    weights: Tensor  # (..., M, K) scores at the selected indices

    @property
    def num_experts(self) -> int:
        return self.scores.shape[-1]

    def mask(self) -> Tensor:
        """(..., M, N) 0/1 indicator of the selected experts."""
        m = torch.zeros_like(self.scores)
        if self.selected.shape[-1]:
            m.scatter_(-1, self.selected, 1.0)
        return m

    def counts(self) -> Tensor:
        """Selections per expert, summed over all queries."""
        return self.mask().reshape(-1, self.num_experts).sum(0).detach()


def top_k(scores: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Indices and values of the ``k`` largest entries; ties go to the lower index."""
    n = scores.shape[-1]
    if k > n or k < 0:
        raise ConfigurationError(f"top-{k} routing over {n} experts")
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    return order, torch.gather(scores, -1, order)


def route(logits: Tensor, k: int) -> RoutingDecision:
    scores = nm.softmax(logits, dim=-1)
    selected, weights = top_k(scores, k)
    return RoutingDecision(scores, selected, weights)


class AttentionBlock(nn.Module):
    """Pre-norm self-attention over queries, then cross-attention into the scene."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.norm_sa = nm.LayerNorm(d)
        self.self_attn = nm.MultiHeadAttention(d, heads)
        self.norm_ca = nm.LayerNorm(d)
        self.cross_attn = nm.MultiHeadAttention(d, heads)

    def forward(self, q: Tensor, scene: Tensor, scene_mask: Tensor) -> Tensor:
        h = self.norm_sa(q)
        q = q + self.self_attn(h, h)
        return q + self.cross_attn(self.norm_ca(q), scene, scene_mask)


class ExpertBank(nn.Module):
    def __init__(self, d: int, hidden: int, num_routed: int, num_shared: int):
        super().__init__()
        self.routed = nn.ModuleList([nm.MLP2(d, hidden, d) for _ in range(num_routed)])
        self.shared = nn.ModuleList([nm.MLP2(d, hidden, d) for _ in range(num_shared)])

    def shared_sum(self, x: Tensor) -> Tensor:
        out = torch.zeros_like(x)
        for expert in self.shared:
            out = out + expert(x)
        return out


def expert_mix(x: Tensor, decision: RoutingDecision, bank: ExpertBank) -> Tensor:
    """Shared experts on every row plus weighted routed experts on their selected rows only."""
    d = x.shape[-1]
    rows = x.reshape(-1, d)
    k = decision.selected.shape[-1]
    out = bank.shared_sum(x)
    if k == 0 or rows.shape[0] == 0:
        return out
    # group (row, slot) pairs by expert; stable so rows stay in order within an expert
    flat = decision.selected.reshape(-1)
    order = torch.sort(flat, stable=True).indices
    row_of = torch.div(order, k, rounding_mode="floor")
    w = decision.weights.reshape(-1)[order].unsqueeze(-1)
    counts = torch.bincount(flat, minlength=len(bank.routed)).tolist()
    pieces, start = [], 0
    for i, c in enumerate(counts):
        if c:
            sl = slice(start, start + c)
            pieces.append(bank.routed[i](rows[row_of[sl]]) * w[sl])
            start += c
    routed = torch.zeros_like(rows).index_add(0, row_of, torch.cat(pieces))
    return out + routed.reshape(x.shape)


def dense_expert_mix(x: Tensor, decision: RoutingDecision, bank: ExpertBank) -> Tensor:
    """Reference mix: every routed expert on every row, weighted by mask * score."""
    gate = decision.mask() * decision.scores
    out = bank.shared_sum(x)
    for i, expert in enumerate(bank.routed):
        out = out + gate[..., i: i + 1] * expert(x)
    return out


class PlainDecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.attn = AttentionBlock(d, heads)
        self.norm_ffn = nm.LayerNorm(d)
        self.ffn = nm.MLP2(d, ffn, d)

    def forward(self, q: Tensor, scene: Tensor, scene_mask: Tensor):
        q = self.attn(q, scene, scene_mask)
        return q + self.ffn(self.norm_ffn(q)), None


class MoEDecoderLayer(nn.Module):
    """Router (own attention block + MLP) and an expert path with separate attention."""

    def __init__(self, d: int, heads: int, hidden: int, num_routed: int, num_shared: int, top_k: int,
                 router_attention: bool = True):
        super().__init__()
        if top_k > num_routed:
            raise ConfigurationError(f"top_k={top_k} exceeds {num_routed} routed experts")
        self.top_k = top_k
        self.router_attn = AttentionBlock(d, heads) if router_attention else None
        self.router_norm = nm.LayerNorm(d)
        self.router_mlp = nm.MLP2(d, d, num_routed)
        self.expert_attn = AttentionBlock(d, heads)
        self.norm_experts = nm.LayerNorm(d)
        self.bank = ExpertBank(d, hidden, num_routed, num_shared)

    def router(self, q: Tensor, scene: Tensor, scene_mask: Tensor) -> RoutingDecision:
        h = self.router_attn(q, scene, scene_mask) if self.router_attn is not None else q
        return route(self.router_mlp(self.router_norm(h)), self.top_k)

    def forward(self, q: Tensor, scene: Tensor, scene_mask: Tensor, dense: bool = False):
        decision = self.router(q, scene, scene_mask)
        q_exp = self.expert_attn(q, scene, scene_mask)
        mix = dense_expert_mix if dense else expert_mix
        return q_exp + mix(self.norm_experts(q_exp), decision, self.bank), decision


class QueryInit(nn.Module):
    """Centerline encodings assigned round-robin to modes, plus a learned mode embedding."""

    def __init__(self, d: int, num_modes: int):
        super().__init__()
        self.centerline_embed = PointSetEmbedding(CENTERLINE_DIM, d)
        self.mode_embed = nn.Parameter(torch.zeros(num_modes, d, dtype=nm.DTYPE))
        self.num_modes = num_modes

    def forward(self, centerlines: Tensor, centerline_mask: Tensor) -> Tensor:
        # centerlines: (B, K, L, 4); mask: (B, K)
        count = centerline_mask.sum(-1)
        if bool((count == 0).any()):
            raise ConfigurationError("every scene needs at least one centerline")
        point_mask = centerline_mask.unsqueeze(-1).expand(centerlines.shape[:-1])
        enc = self.centerline_embed(centerlines, point_mask)  # (B, K, D)
        modes = torch.arange(self.num_modes)
        idx = modes.unsqueeze(0) % count.unsqueeze(-1)  # (B, M), valid centerlines come first
        base = torch.gather(enc, 1, idx.unsqueeze(-1).expand(-1, -1, enc.shape[-1]))
        return base + self.mode_embed


class TrajectoryHead(nn.Module):
    """Per-mode regression of T_f steps: xy as cumulative step offsets, heading directly."""

    def __init__(self, d: int, future_steps: int):
        super().__init__()
        self.mlp = nm.MLP2(d, 2 * d, future_steps * 3)
        self.future_steps = future_steps

    def forward(self, q: Tensor) -> Tensor:
        out = self.mlp(q).reshape(*q.shape[:-1], self.future_steps, 3)
        xy = torch.cumsum(out[..., :2], dim=-2)
        return torch.cat([xy, out[..., 2:]], dim=-1)


class Decoder(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int, layers: int, num_modes: int, future_steps: int,
                 num_experts: int, top_k: int, num_shared: int, expert_hidden: int, router_attention: bool):
        super().__init__()
        self.query_init = QueryInit(d, num_modes)
        blocks: list[nn.Module] = [PlainDecoderLayer(d, heads, ffn)]
        for _ in range(layers - 1):
            if num_experts > 0:
                blocks.append(MoEDecoderLayer(d, heads, expert_hidden, num_experts, num_shared, top_k, router_attention))
            else:
                blocks.append(PlainDecoderLayer(d, heads, ffn))
        self.layers = nn.ModuleList(blocks)
        self.norm = nm.LayerNorm(d)
        self.traj_head = TrajectoryHead(d, future_steps)
        # bias-free: a shift common to all mode logits cancels in the softmax
        self.score_head = nm.MLP2(d, d, 1, bias=False)

    def decode(self, q: Tensor, scene: Tensor, scene_mask: Tensor, dense: bool = False):
        decisions = []
        for layer in self.layers:
            if isinstance(layer, MoEDecoderLayer):
                q, decision = layer(q, scene, scene_mask, dense=dense)
                decisions.append(decision)
            else:
                q, _ = layer(q, scene, scene_mask)
        return self.norm(q), decisions

    def forward(self, batch: dict, scene: Tensor, scene_mask: Tensor, dense: bool = False):
        q = self.query_init(batch["centerlines"], batch["centerline_mask"])
        f, decisions = self.decode(q, scene, scene_mask, dense=dense)
        return self.traj_head(f), self.score_head(f).squeeze(-1), decisions
