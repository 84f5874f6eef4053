"""Scene encoder with an auxiliary displacement head.

Tokens are laid out as ``[AV, agents..., map...]``. The AV token sees only
the current AV state. The displacement head reads the encoder output and is
used only for the training loss, so inference never touches it.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from . import numerics as nm
from .features import AGENT_DIM, AV_DIM, MAP_DIM


def masked_max(x: Tensor, mask: Tensor) -> Tensor:
    """Max of (..., L, D) over L restricted to ``mask`` (..., L); all-masked slices give 0."""
    if x.shape[-2] == 0:
        return x.new_zeros(*x.shape[:-2], x.shape[-1])
    filled = x.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    out = filled.amax(dim=-2)
    any_valid = mask.any(dim=-1).unsqueeze(-1)
    return torch.where(any_valid, out, torch.zeros_like(out))


class PointSetEmbedding(nn.Module):
    """Per-element MLP, masked max-pool, then a linear projection."""

    def __init__(self, din: int, d: int):
        super().__init__()
        self.point_mlp = nm.MLP2(din, d, d)
        self.proj = nm.Linear(d, d)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        # x: (..., L, din), mask: (..., L)
        return self.proj(masked_max(self.point_mlp(x), mask))


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.norm1 = nm.LayerNorm(d)
        self.attn = nm.MultiHeadAttention(d, heads)
        self.norm2 = nm.LayerNorm(d)
        self.ffn = nm.MLP2(d, ffn, d)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.norm2(x))


class SceneEncoder(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int, layers: int, future_steps: int):
        super().__init__()
        self.av_embed = nm.MLP2(AV_DIM, d, d)
        self.agent_embed = PointSetEmbedding(AGENT_DIM, d)
        self.map_embed = PointSetEmbedding(MAP_DIM, d)
        self.type_embed = nn.Parameter(torch.zeros(3, d, dtype=nm.DTYPE))
        self.layers = nn.ModuleList([EncoderLayer(d, heads, ffn) for _ in range(layers)])
        self.norm = nm.LayerNorm(d)
        self.future_steps = future_steps
        # train-only head: [F_av || F_elem] -> future displacement
        self.disp_head = nm.MLP2(2 * d, 2 * d, future_steps * 2)

    def embed_av(self, av: Tensor) -> Tensor:
        return (self.av_embed(av) + self.type_embed[0]).unsqueeze(-2)

    def embed_agents(self, agents: Tensor, steps: Tensor) -> Tensor:
        return self.agent_embed(agents, steps) + self.type_embed[1]

    def embed_map(self, polylines: Tensor, points: Tensor) -> Tensor:
        return self.map_embed(polylines, points) + self.type_embed[2]

    def tokens(self, batch: dict) -> tuple[Tensor, Tensor]:
        av = self.embed_av(batch["av"])
        agents = self.embed_agents(batch["agents"], batch["agent_steps"])
        polys = self.embed_map(batch["map"], batch["map_points"])
        tokens = torch.cat([av, agents, polys], dim=-2)
        av_mask = torch.ones(av.shape[:-1], dtype=torch.bool)
        mask = torch.cat([av_mask, batch["agent_mask"], batch["map_mask"]], dim=-1)
        return tokens, mask

    def scene_encode(self, tokens: Tensor, mask: Tensor) -> Tensor:
        x = tokens
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)

    def forward(self, batch: dict) -> tuple[Tensor, Tensor]:
        tokens, mask = self.tokens(batch)
        return self.scene_encode(tokens, mask), mask

    def predict_displacements(self, features: Tensor) -> Tensor:
        """(..., 1 + N_a + N_p, D) -> (..., N_a + N_p, T_f, 2)."""
        av = features[..., :1, :].expand_as(features[..., 1:, :])
        out = self.disp_head(torch.cat([av, features[..., 1:, :]], dim=-1))
        return out.reshape(*out.shape[:-1], self.future_steps, 2)
