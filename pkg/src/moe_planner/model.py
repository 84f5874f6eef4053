"""Planner model: scene encoder + mixture-of-experts decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import Tensor, nn

from . import numerics as nm
from .decoder import ConfigurationError, Decoder, RoutingDecision
from .encoder import SceneEncoder


@dataclass
class ModelConfig:
    d_model: int = 64
    num_heads: int = 4
    ffn_hidden: int = 256
    encoder_layers: int = 4
    decoder_layers: int = 4
    num_modes: int = 6
    future_steps: int = 40
    num_experts: int = 16  # 0 gives a plain FFN decoder
    top_k: int = 2
    num_shared: int = 2
    expert_hidden: int | None = None  # defaults to 2 * d_model
    router_attention: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.expert_hidden is None:
            self.expert_hidden = 2 * self.d_model
        if self.d_model % self.num_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.num_experts < 0 or self.top_k < 0 or self.num_shared < 0:
            raise ConfigurationError("expert counts must be non-negative")
        if self.num_experts > 0 and self.top_k > self.num_experts:
            raise ConfigurationError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if self.decoder_layers < 1 or self.encoder_layers < 1:
            raise ConfigurationError("need at least one encoder and one decoder layer")

    @property
    def has_experts(self) -> bool:
        return self.num_experts > 0 and self.decoder_layers > 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlanOutput:
    trajectories: Tensor  # (B, M, T_f, 3)
    scores: Tensor  # (B, M) logits
    decisions: list[RoutingDecision] = field(default_factory=list)
    displacement: Tensor | None = None  # (B, N_a + N_p, T_f, 2)
    features: Tensor | None = None

    def best(self) -> Tensor:
        """Highest-scoring trajectory per scene, (B, T_f, 3)."""
        idx = self.scores.argmax(-1)
        return self.trajectories[torch.arange(len(idx)), idx]


class Planner(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.config = c
        self.encoder = SceneEncoder(c.d_model, c.num_heads, c.ffn_hidden, c.encoder_layers, c.future_steps)
        self.decoder = Decoder(
            c.d_model, c.num_heads, c.ffn_hidden, c.decoder_layers, c.num_modes, c.future_steps,
            c.num_experts, c.top_k, c.num_shared, c.expert_hidden, c.router_attention,
        )
        nm.init_parameters(self, c.seed)

    def encode(self, batch: dict) -> tuple[Tensor, Tensor]:
        """Scene features and token mask; the same path serves training and inference."""
        return self.encoder(batch)

    def forward(self, batch: dict, with_displacement: bool = False, dense: bool = False) -> PlanOutput:
        features, mask = self.encode(batch)
        traj, scores, decisions = self.decoder(batch, features, mask, dense=dense)
        disp = self.encoder.predict_displacements(features) if with_displacement else None
        return PlanOutput(traj, scores, decisions, disp, features)

    @torch.no_grad()
    def plan(self, batch: dict) -> PlanOutput:
        return self.forward(batch, with_displacement=False)


def routing_histogram(decisions: list[RoutingDecision]) -> list[list[int]]:
    """Per MoE layer, selection counts per routed expert."""
    return [[int(v) for v in d.counts().tolist()] for d in decisions]


def save_model(path, model: Planner, extra: dict | None = None) -> None:
    meta = {"model_config": model.config.to_dict()}
    if extra:
        meta.update(extra)
    nm.save_checkpoint(path, dict(model.state_dict()), meta)


def load_model(path) -> tuple[Planner, dict]:
    """Rebuild a planner from a checkpoint; a missing displacement head is allowed."""
    state, meta = nm.load_checkpoint(path)
    if "model_config" not in meta:
        raise nm.CheckpointError("checkpoint has no model_config")
    model = Planner(ModelConfig(**meta["model_config"]))
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.startswith("encoder.disp_head.")]
    if missing or unexpected:
        raise nm.CheckpointError(f"checkpoint mismatch: missing {missing}, unexpected {unexpected}")
    return model, meta
