"""Finite-difference verification of the full training objective on a tiny model."""

from __future__ import annotations

import time

import numpy as np
import torch

from .features import AGENT_DIM, AV_DIM, CENTERLINE_DIM, CENTERLINE_POINTS, MAP_DIM
from .model import ModelConfig, Planner
from .numerics import DTYPE, grad_check_report
from .training import TrainConfig, total_loss

TOLERANCE = 1e-4


def tiny_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(
        d_model=8, num_heads=2, ffn_hidden=16, encoder_layers=1, decoder_layers=2, num_modes=2,
        future_steps=5, num_experts=4, top_k=2, num_shared=1, expert_hidden=16, seed=seed,
    )


def tiny_batch(seed: int = 0, num_agents: int = 2, num_polylines: int = 2, future_steps: int = 5,
               history: int = 21, points: int = 5, batch: int = 1) -> dict:
    """Random scene tensors shaped like a collated batch, all elements valid."""
    g = np.random.default_rng(seed)
    n = num_agents + num_polylines

    def t(*shape, scale=1.0):
        return torch.tensor(g.normal(size=shape) * scale, dtype=DTYPE)

    return {
        "av": t(batch, AV_DIM),
        "agents": t(batch, num_agents, history, AGENT_DIM),
        "agent_steps": torch.ones(batch, num_agents, history, dtype=torch.bool),
        "agent_mask": torch.ones(batch, num_agents, dtype=torch.bool),
        "map": t(batch, num_polylines, points, MAP_DIM),
        "map_points": torch.ones(batch, num_polylines, points, dtype=torch.bool),
        "map_mask": torch.ones(batch, num_polylines, dtype=torch.bool),
        "centerlines": t(batch, 1, CENTERLINE_POINTS, CENTERLINE_DIM),
        "centerline_mask": torch.ones(batch, 1, dtype=torch.bool),
        "disp_target": t(batch, n, future_steps, 2, scale=2.0),
        "disp_mask": torch.ones(batch, n, future_steps, dtype=torch.bool),
        "disp_is_map": torch.tensor([[False] * num_agents + [True] * num_polylines] * batch),
        "gt": t(batch, future_steps, 3, scale=2.0),
    }


def run_grad_check(seed: int = 0, epsilon: float = 1e-5) -> tuple[dict[str, float], float]:
    """Per-parameter-block max relative error of the total loss, and elapsed seconds."""
    cfg = TrainConfig(model=tiny_model_config(seed), dpe_mode="agent_map", balance=True)
    model = Planner(cfg.model)
    batch = tiny_batch(seed, future_steps=cfg.model.future_steps)
    start = time.perf_counter()
    params = dict(model.named_parameters())
    report = grad_check_report(lambda: total_loss(batch, model, cfg)[0].l_total, params, epsilon)
    return report, time.perf_counter() - start
