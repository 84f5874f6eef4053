"""Dense float64 tensor primitives used by the planner.

Reverse-mode differentiation is delegated to torch autograd (the tape); every
primitive the model needs is written here from elementary tensor ops so that
the formulas live in one place. ``grad_check`` is a central finite-difference
oracle that never touches the tape it verifies.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import Tensor, nn

DTYPE = torch.float64
LN_EPS = 1e-5
SMOOTH_L1_BETA = 1.0

CHECKPOINT_MAGIC = b"MPCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def relu(x: Tensor) -> Tensor:
    return torch.clamp_min(x, 0.0)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def smooth_l1_elementwise(pred: Tensor, target: Tensor, beta: float = SMOOTH_L1_BETA) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = pred - target
    ad = d.abs()
    return torch.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = SMOOTH_L1_BETA) -> Tensor:
    """Mean smooth-L1 over all elements."""
    return smooth_l1_elementwise(pred, target, beta).mean()


def masked_smooth_l1(pred: Tensor, target: Tensor, mask: Tensor, beta: float = SMOOTH_L1_BETA) -> Tensor:
    """Smooth-L1 averaged over entries where ``mask`` is set.

    ``mask`` broadcasts against ``pred``; masked entries contribute exactly zero
    value and zero gradient. An all-false mask yields 0.
    """
    elem = smooth_l1_elementwise(pred, target, beta)
    weight = mask.to(elem.dtype).expand_as(elem)
    total = weight.sum()
    return (elem * weight).sum() / torch.clamp_min(total, 1.0)


def cross_entropy(logits: Tensor, target_index) -> Tensor:
    """-log softmax(logits)[target]; batched over leading dims, mean-reduced."""
    m = logits.shape[-1]
    idx = torch.as_tensor(target_index, dtype=torch.long)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= m):
        raise IndexError(f"target index out of range for {m} classes")
    logp = log_softmax(logits, dim=-1)
    picked = torch.gather(logp.reshape(-1, m), 1, idx.reshape(-1, 1))
    return -picked.mean()


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    centered = x - mu
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else y + bias


def mlp2(x: Tensor, w1: Tensor, b1: Tensor | None, w2: Tensor, b2: Tensor | None) -> Tensor:
    return linear(relu(linear(x, w1, b1)), w2, b2)


def attention_weights(q: Tensor, k: Tensor, key_mask: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) with an additive -inf for invalid keys.

    q: (..., Lq, d); k: (..., Lk, d); key_mask: (..., Lk) bool, True = valid.
    """
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        neg = torch.zeros(key_mask.shape, dtype=scores.dtype).masked_fill(~key_mask, float("-inf"))
        scores = scores + neg.unsqueeze(-2)
    return softmax(scores, dim=-1)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: Mapping[str, Tensor],
    num_heads: int,
    key_mask: Tensor | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with input and output projections.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo`` with weights laid out
    (in, out). Inputs carry arbitrary leading batch dims.
    """
    d = q.shape[-1]
    if d % num_heads:
        raise ShapeError(f"model width {d} not divisible by {num_heads} heads")
    hd = d // num_heads

    def split(x: Tensor) -> Tensor:
        return x.reshape(*x.shape[:-1], num_heads, hd).transpose(-2, -3)

    qh = split(linear(q, params["wq"], params["bq"]))
    kh = split(linear(k, params["wk"], params["bk"]))
    vh = split(linear(v, params["wv"], params["bv"]))
    mask = None if key_mask is None else key_mask.unsqueeze(-2)
    w = attention_weights(qh, kh, mask)
    out = matmul(w, vh).transpose(-2, -3)
    out = out.reshape(*out.shape[:-2], d)
    out = linear(out, params["wo"], params["bo"])
    return (out, w) if return_weights else out


# ---------------------------------------------------------------------------
# parameterised building blocks
# ---------------------------------------------------------------------------


class Linear(nn.Module):
    def __init__(self, din: int, dout: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(din, dout, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dout, dtype=DTYPE)) if bias else None
        self.fan_in = din

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class MLP2(nn.Module):
    def __init__(self, din: int, hidden: int, dout: int, bias: bool = True):
        super().__init__()
        self.fc1 = Linear(din, hidden, bias)
        self.fc2 = Linear(hidden, dout, bias)

    def forward(self, x: Tensor) -> Tensor:
        return mlp2(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, num_heads: int):
        super().__init__()
        if d % num_heads:
            raise ShapeError(f"model width {d} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_proj = Linear(d, d)
        # a key bias shifts every score of a query equally, so softmax cancels it
        self.k_proj = Linear(d, d, bias=False)
        self.v_proj = Linear(d, d)
        self.out_proj = Linear(d, d)

    def params(self) -> dict[str, Tensor]:
        return {
            "wq": self.q_proj.weight, "bq": self.q_proj.bias,
            "wk": self.k_proj.weight, "bk": self.k_proj.bias,
            "wv": self.v_proj.weight, "bv": self.v_proj.bias,
            "wo": self.out_proj.weight, "bo": self.out_proj.bias,
        }

    def forward(self, q: Tensor, kv: Tensor, key_mask: Tensor | None = None) -> Tensor:
        return multi_head_attention(q, kv, kv, self.params(), self.num_heads, key_mask)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Uniform(-s, s), s = 1/sqrt(fan_in), drawn in registration order.

    LayerNorm keeps gain 1 / bias 0. Free parameters that are not part of a
    ``Linear`` (embeddings) use s = 1.
    """
    gen = torch.Generator().manual_seed(seed)
    owned: set[int] = set()
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, Linear):
                s = 1.0 / math.sqrt(m.fan_in)
                for p in (m.weight, m.bias):
                    if p is not None:
                        p.copy_((torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 - 1) * s)
                        owned.add(id(p))
            elif isinstance(m, LayerNorm):
                m.gain.fill_(1.0)
                m.bias.zero_()
                owned.update((id(m.gain), id(m.bias)))
        for _, p in module.named_parameters():
            if id(p) not in owned:
                p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 - 1)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _as_named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"p{i}", p) for i, p in enumerate(params)]


def grad_check_report(
    loss_fn: Callable[[], Tensor], params, epsilon: float = 1e-5
) -> dict[str, float]:
    """Per-parameter-block max relative error between autograd and central differences.

    error = |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)
    """
    named = _as_named(params)
    tensors = [p for _, p in named]
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    report: dict[str, float] = {}
    with torch.inference_mode():
        for (name, p), g in zip(named, grads):
            g_ad = torch.zeros_like(p) if g is None else g.detach()
            flat = p.view(-1)
            g_fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                fp = loss_fn().item()
                flat[i] = orig - epsilon
                fm = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteLossError(f"loss not finite while perturbing {name}[{i}]")
                g_fd[i] = (fp - fm) / (2 * epsilon)
            g_ad = g_ad.reshape(-1)
            rel = (g_ad - g_fd).abs() / torch.clamp_min(g_ad.abs() + g_fd.abs(), 1e-8)
            report[name] = float(rel.max()) if rel.numel() else 0.0
    return report


def grad_check(loss_fn: Callable[[], Tensor], params, epsilon: float = 1e-5) -> float:
    report = grad_check_report(loss_fn, params, epsilon)
    return max(report.values(), default=0.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# layout: magic "MPCK" | u32 version | u32 header length | header JSON | data
# header: {"entries": [{"name", "shape", "offset", "count"}], "meta": {...}}
# data: float64 little-endian, entries concatenated in header order


def save_checkpoint(path: str | Path, state: Mapping[str, Tensor], meta: Mapping | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name].detach().cpu().numpy(), dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"entries": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    data = np.frombuffer(raw, dtype="<f8", offset=12 + hlen)
    state = {}
    for e in header["entries"]:
        end = e["offset"] + e["count"]
        if end > data.size:
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = data[e["offset"]:end].reshape(e["shape"]).astype(np.float64)
        state[e["name"]] = torch.from_numpy(arr.copy())
    return state, header["meta"]


def parameter_count(params: Iterable[Tensor]) -> int:
    return sum(p.numel() for p in params)
