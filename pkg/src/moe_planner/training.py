"""Training objective and optimisation loop.

The total loss is ``w_plan * l_plan + w_disp * l_disp + w_bal * l_bal``.
Each weight defaults to 1. The planning term uses winner-take-all mode
matching by final-position error. The balance term is ``N * sum_i f_i * P_i``
per MoE layer, averaged over layers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import numerics as nm
from .decoder import RoutingDecision
from .features import Snapshot, collate, scenario_snapshot
from .model import ModelConfig, Planner, PlanOutput, routing_histogram, save_model
from .scene.types import Scenario

log = logging.getLogger(__name__)

DPE_MODES = ("none", "agent_only", "map_only", "agent_map")


def winner_modes(trajectories: Tensor, gt: Tensor) -> Tensor:
    """Index of the mode whose final position is closest to the ground truth, (B,)."""
    err = torch.linalg.vector_norm(trajectories[..., -1, :2] - gt[..., None, -1, :2], dim=-1)
    return err.detach().argmin(dim=-1)


def plan_loss(trajectories: Tensor, scores: Tensor, gt: Tensor) -> Tensor:
    """Smooth-L1 on the winning mode plus cross-entropy towards it.

    trajectories: (B, M, T, 3); scores: (B, M); gt: (B, T, 3).
    """
    win = winner_modes(trajectories, gt)
    best = trajectories[torch.arange(len(win)), win]
    return nm.smooth_l1(best, gt) + nm.cross_entropy(scores, win)


def dpe_mask(mask: Tensor, is_map: Tensor, mode: str) -> Tensor:
    """Restrict the valid-step mask to the rows supervised under ``mode``."""
    if mode not in DPE_MODES:
        raise ValueError(f"unknown displacement target mode {mode!r}")
    if mode == "none":
        return torch.zeros_like(mask)
    if mode == "agent_only":
        return mask & ~is_map.unsqueeze(-1)
    if mode == "map_only":
        return mask & is_map.unsqueeze(-1)
    return mask


def disp_loss(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Masked-mean smooth-L1; ``mask`` flags valid (element, step) pairs."""
    return nm.masked_smooth_l1(pred, target, mask.unsqueeze(-1))


def layer_balance(decision: RoutingDecision) -> Tensor:
    n = decision.num_experts
    k = decision.selected.shape[-1]
    scores = decision.scores.reshape(-1, n)
    f = decision.mask().reshape(-1, n).sum(0) / (scores.shape[0] * k)
    p = scores.mean(0)
    return n * torch.sum(f * p)


def balance_loss(decisions: list[RoutingDecision]) -> Tensor:
    """Mean over MoE layers of ``N * sum_i f_i * P_i``."""
    if not decisions:
        raise ValueError("balance loss needs at least one MoE layer")
    return torch.stack([layer_balance(d) for d in decisions]).mean()


@dataclass
class LossBreakdown:
    l_plan: Tensor
    l_disp: Tensor
    l_bal: Tensor
    l_total: Tensor
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_plan", "l_disp", "l_bal", "l_total")}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 500
    seed: int = 0
    w_plan: float = 1.0
    w_disp: float = 1.0
    w_bal: float = 1.0
    dpe_mode: str = "agent_map"
    balance: bool = True
    grad_clip: float = 1.0
    schedule: str = "cosine"  # or "constant"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.dpe_mode not in DPE_MODES:
            raise ValueError(f"dpe_mode must be one of {DPE_MODES}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")
        if self.batch_size < 1 or self.steps < 0 or self.lr < 0:
            raise ValueError("batch_size >= 1, steps >= 0 and lr >= 0 required")

    @property
    def uses_disp(self) -> bool:
        return self.dpe_mode != "none"

    @property
    def uses_balance(self) -> bool:
        m = self.model
        return self.balance and m.has_experts and m.top_k > 0

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(batch: dict, model: Planner, config: TrainConfig) -> tuple[LossBreakdown, PlanOutput]:
    out = model(batch, with_displacement=config.uses_disp)
    zero = torch.zeros((), dtype=nm.DTYPE)
    l_plan = plan_loss(out.trajectories, out.scores, batch["gt"])
    l_disp = zero
    if config.uses_disp:
        mask = dpe_mask(batch["disp_mask"], batch["disp_is_map"], config.dpe_mode)
        l_disp = disp_loss(out.displacement, batch["disp_target"], mask)
    l_bal = balance_loss(out.decisions) if config.uses_balance else zero
    w = (config.w_plan, config.w_disp, config.w_bal)
    total = w[0] * l_plan + w[1] * l_disp + w[2] * l_bal
    return LossBreakdown(l_plan, l_disp, l_bal, total, w), out


@dataclass
class TrainResult:
    model: Planner
    history: list[dict]
    histograms: list[dict]


LOG_FIELDS = ("step", "l_plan", "l_disp", "l_bal", "l_total", "grad_norm")


def train(corpus: list[Scenario] | list[Snapshot], config: TrainConfig, out_dir=None) -> TrainResult:
    """Adam with gradient-norm clipping; deterministic in ``config.seed``."""
    if not corpus:
        raise ValueError("training corpus is empty")
    snaps = [s if isinstance(s, Snapshot) else scenario_snapshot(s) for s in corpus]
    torch.manual_seed(config.seed)
    model = Planner(config.model)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    if config.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.steps, 1))
    else:
        sched = None
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, len(snaps))
    order: list[int] = []
    history, histograms = [], []
    for step in range(1, config.steps + 1):
        if len(order) < bs:
            order.extend(rng.permutation(len(snaps)).tolist())
        idx, order = order[:bs], order[bs:]
        batch = collate([snaps[i] for i in idx])
        losses, out = total_loss(batch, model, config)
        if not torch.isfinite(losses.l_total):
            raise nm.NonFiniteLossError(f"non-finite loss at step {step}: {losses.as_floats()}")
        opt.zero_grad()
        losses.l_total.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        if sched is not None:
            sched.step()
        row = {"step": step, **losses.as_floats(), "grad_norm": float(grad_norm)}
        history.append(row)
        if out.decisions:
            histograms.append({"step": step, "layers": routing_histogram(out.decisions)})
        if step == 1 or step % 50 == 0:
            log.info("step %d %s", step, " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "step"))
    result = TrainResult(model, history, histograms)
    if out_dir is not None:
        write_outputs(result, config, out_dir)
    return result


def write_outputs(result: TrainResult, config: TrainConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in result.history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    with open(out / "expert_histograms.json", "w") as fh:
        json.dump(result.histograms, fh)
    save_model(out / "model.ckpt", result.model, {"train_config": config.to_dict()})


@torch.no_grad()
def expert_usage(model: Planner, snaps: list[Snapshot], batch_size: int = 32) -> np.ndarray:
    """Selection counts (layers, N) of routed experts over a corpus."""
    total = None
    for i in range(0, len(snaps), batch_size):
        out = model.plan(collate(snaps[i: i + batch_size]))
        h = np.array(routing_histogram(out.decisions), dtype=np.float64)
        total = h if total is None else total + h
    return np.zeros((0, 0)) if total is None else total


def usage_cv(counts: np.ndarray) -> float:
    """Coefficient of variation of expert counts, averaged over layers."""
    cvs = [c.std() / c.mean() for c in counts if c.mean() > 0]
    return float(np.mean(cvs)) if cvs else math.nan


@torch.no_grad()
def open_loop_errors(model: Planner, snaps: list[Snapshot], batch_size: int = 32) -> tuple[float, float]:
    """ADE and FDE (m) of the highest-scoring mode."""
    ade, fde, n = 0.0, 0.0, 0
    for i in range(0, len(snaps), batch_size):
        batch = collate(snaps[i: i + batch_size])
        best = model.plan(batch).best()[..., :2]
        err = torch.linalg.vector_norm(best - batch["gt"][..., :2], dim=-1)
        ade += float(err.mean(-1).sum())
        fde += float(err[:, -1].sum())
        n += err.shape[0]
    return ade / n, fde / n
