"""Small decoder-only transformer: pre-norm blocks, RoPE, SiLU-gated MLP, KV cache."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
INIT_STD = 0.02
ADAM_EPS = 1e-8

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    model_dim: int = 64
    vocab_total: int = 305
    max_seq: int = 512
    rope_base: float = 10000.0
    dropout_p: float = 0.0
    seed: int = 0
    ffn_dim: int | None = None
    dtype: str = "float64"

    def problems(self) -> list[str]:
        out = []
        for name in ("layers", "heads", "model_dim", "vocab_total", "max_seq"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.heads >= 1 and self.model_dim % self.heads:
            out.append(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        elif self.heads >= 1 and (self.model_dim // self.heads) % 2:
            out.append(f"head_dim {self.model_dim // self.heads} must be even for rotary embeddings")
        if not 0.0 <= self.dropout_p < 1.0:
            out.append("dropout_p must lie in [0, 1)")
        if self.rope_base <= 1.0:
            out.append("rope_base must exceed 1")
        if self.dtype not in _DTYPES:
            out.append(f"dtype must be one of {sorted(_DTYPES)}")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        if self.ffn_dim is not None:
            return self.ffn_dim
        return 8 * ((8 * self.model_dim // 3 + 7) // 8)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


class ForwardCache:
    """Per-layer keys/values for one batch of streams, append-only."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.keys: list[torch.Tensor | None] = [None] * config.layers
        self.values: list[torch.Tensor | None] = [None] * config.layers
        self.length = 0

    def _append(self, layer: int, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.keys[layer] is None:
            b, h, _, d = k.shape
            shape = (b, h, self.config.max_seq, d)
            self.keys[layer] = k.new_zeros(shape)
            self.values[layer] = v.new_zeros(shape)
        end = self.length + k.shape[2]
        self.keys[layer][:, :, self.length : end] = k
        self.values[layer][:, :, self.length : end] = v
        return self.keys[layer][:, :, :end], self.values[layer][:, :, :end]


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rope_tables(head_dim: int, max_seq: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    angles = torch.outer(torch.arange(max_seq, dtype=torch.float64), inv_freq)
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, D); pairs are (x[..., :D/2], x[..., D/2:])
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.head_dim
        dim = config.model_dim
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim, bias=False)

    def forward(self, x, cos, sin, layer, cache, keep_probs=False):
        b, t, _ = x.shape
        shape = (b, t, self.heads, self.head_dim)
        q = apply_rope(self.q(x).view(shape).transpose(1, 2), cos, sin)
        k = apply_rope(self.k(x).view(shape).transpose(1, 2), cos, sin)
        v = self.v(x).view(shape).transpose(1, 2)
        if cache is not None:
            k, v = cache._append(layer, k, v)
        offset = k.shape[2] - t
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        qpos = torch.arange(t).unsqueeze(1) + offset
        kpos = torch.arange(k.shape[2]).unsqueeze(0)
        scores = scores.masked_fill(kpos > qpos, float("-inf"))
        probs = scores.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, t, -1)
        return self.o(out), (probs if keep_probs else None)


class GatedMLP(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.gate = nn.Linear(config.model_dim, config.hidden_dim, bias=False)
        self.up = nn.Linear(config.model_dim, config.hidden_dim, bias=False)
        self.down = nn.Linear(config.hidden_dim, config.model_dim, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(config.model_dim)
        self.attn = Attention(config)
        self.mlp_norm = RMSNorm(config.model_dim)
        self.mlp = GatedMLP(config)
        self.drop = nn.Dropout(config.dropout_p)

    def forward(self, x, cos, sin, layer, cache, keep_probs=False):
        a, probs = self.attn(self.attn_norm(x), cos, sin, layer, cache, keep_probs)
        x = x + self.drop(a)
        x = x + self.drop(self.mlp(self.mlp_norm(x)))
        return x, probs


class DecoderLM(nn.Module):
    """Token ids (B, T) -> next-token logits (B, T, vocab_total)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.embed = nn.Embedding(config.vocab_total, config.model_dim)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.norm = RMSNorm(config.model_dim)
        self.head = nn.Linear(config.model_dim, config.vocab_total, bias=False)
        cos, sin = rope_tables(config.head_dim, config.max_seq, config.rope_base, config.torch_dtype)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    def forward(self, idx: torch.Tensor, cache: ForwardCache | None = None, keep_probs: bool = False):
        cfg = self.config
        b, t = idx.shape
        start = cache.length if cache is not None else 0
        if start + t > cfg.max_seq:
            raise ValueError(f"sequence of {start + t} tokens exceeds max_seq {cfg.max_seq}")
        if t and (int(idx.min()) < 0 or int(idx.max()) >= cfg.vocab_total):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_total})")
        cos = self.rope_cos[start : start + t]
        sin = self.rope_sin[start : start + t]
        x = self.embed(idx)
        all_probs = []
        for layer, block in enumerate(self.blocks):
            x, probs = block(x, cos, sin, layer, cache, keep_probs)
            all_probs.append(probs)
        if cache is not None:
            cache.length += t
        logits = self.head(self.norm(x))
        return (logits, all_probs) if keep_probs else logits


def init_params(config: ModelConfig) -> DecoderLM:
    """Truncated-normal init (std 0.02, cut at 3 std); residual output projections
    scaled by 1/sqrt(2*layers); norm gains 1. Deterministic in ``config.seed``."""
    config.validate()
    model = DecoderLM(config).to(config.torch_dtype)
    gen = torch.Generator().manual_seed(config.seed)
    resid_std = INIT_STD / math.sqrt(2 * config.layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("norm.weight"):
                p.fill_(1.0)
                continue
            std = resid_std if name.endswith(("attn.o.weight", "mlp.down.weight")) else INIT_STD
            nn.init.trunc_normal_(p, 0.0, std, -3 * std, 3 * std, generator=gen)
    model.eval()
    return model


def _as_batch(tokens, device=None) -> torch.Tensor:
    t = torch.as_tensor(tokens, dtype=torch.long, device=device)
    return t.unsqueeze(0) if t.dim() == 1 else t


def forward(model: DecoderLM, tokens, cache: ForwardCache | None = None) -> tuple[torch.Tensor, ForwardCache | None]:
    """Functional entry point. A 1-D token list yields (T, vocab) logits."""
    idx = _as_batch(tokens)
    logits = model(idx, cache)
    if torch.as_tensor(tokens).dim() == 1:
        logits = logits[0]
    return logits, cache


def new_cache(model: DecoderLM) -> ForwardCache:
    return ForwardCache(model.config)


# -- loss -------------------------------------------------------------------


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    zloss: torch.Tensor
    z_weight: float
    total: torch.Tensor
    mean_abs_logz: float = 0.0
    max_abs_logit: float = 0.0

    def as_dict(self) -> dict:
        return {
            "ce": float(self.ce.detach()),
            "zloss": float(self.zloss.detach()),
            "z_weight": self.z_weight,
            "total": float(self.total.detach()),
            "mean_abs_logz": self.mean_abs_logz,
            "max_abs_logit": self.max_abs_logit,
        }


def loss(logits: torch.Tensor, targets, mask, z_weight: float = 0.0) -> LossBreakdown:
    """Masked next-token cross-entropy plus ``z_weight * mean((log Z)^2)``.

    ``logits[..., t, :]`` is scored against ``targets[..., t]`` wherever ``mask`` is set.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, mask {tuple(mask.shape)}")
    if not bool(mask.any()):
        raise ValueError("loss needs at least one unmasked position")
    sel = logits[mask]
    tgt = targets[mask]
    logz = torch.logsumexp(sel, dim=-1)
    ce = (logz - sel.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)).mean()
    zloss = logz.pow(2).mean()
    total = ce + z_weight * zloss
    with torch.no_grad():
        mean_abs_logz = float(logz.abs().mean())
        max_abs_logit = float(sel.abs().max())
    return LossBreakdown(ce, zloss, z_weight, total, mean_abs_logz, max_abs_logit)


def batch_loss(model: DecoderLM, tokens: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor, z_weight: float) -> LossBreakdown:
    return loss(model(tokens), targets, mask, z_weight)


def grad(model: DecoderLM, batch, z_weight: float = 0.0) -> tuple[dict[str, torch.Tensor], LossBreakdown]:
    """Gradients of the masked loss for ``batch = (tokens, targets, mask)``."""
    tokens, targets, mask = (torch.as_tensor(x) for x in batch)
    model.zero_grad(set_to_none=True)
    out = batch_loss(model, _as_batch(tokens), _as_batch(targets), _as_batch(mask).bool(), z_weight)
    if not torch.isfinite(out.total):
        raise FloatingPointError(f"non-finite loss {float(out.total)}")
    out.total.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return grads, out


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def state_dict(self) -> dict:
        return {"step": self.step, "exp_avg": self.exp_avg, "exp_avg_sq": self.exp_avg_sq}

    @classmethod
    def from_state_dict(cls, data: dict) -> "AdamWState":
        return cls(data["step"], dict(data["exp_avg"]), dict(data["exp_avg_sq"]))


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.1,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = ADAM_EPS,
) -> AdamWState:
    """In-place decoupled-weight-decay Adam step on ``params``.

    p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if set(params) != set(grads):
        raise ValueError("params and grads have different keys")
    b1, b2 = betas
    state.step += 1
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.mul_(1 - lr * weight_decay)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return state


def named_params(model: DecoderLM) -> dict[str, torch.Tensor]:
    return dict(model.named_parameters())


# -- attention probe --------------------------------------------------------


@dataclass
class AttentionProbe:
    query_position: int
    per_head: torch.Tensor  # (layers, heads, query_position + 1)
    average: torch.Tensor  # (query_position + 1,)
    labels: list[str] | None = None


@torch.no_grad()
def attention_probe(model: DecoderLM, tokens: Sequence[int], query_position: int, manifest=None) -> AttentionProbe:
    if not 0 <= query_position < len(tokens):
        raise ValueError(f"query position {query_position} outside [0, {len(tokens)})")
    was_training = model.training
    model.eval()
    _, probs = model(_as_batch(tokens[: query_position + 1]), keep_probs=True)
    model.train(was_training)
    rows = torch.stack([p[0, :, query_position, :] for p in probs])
    labels = None
    if manifest is not None:
        from .vocab import role_label

        labels = [role_label(manifest, int(t)) for t in tokens[: query_position + 1]]
    return AttentionProbe(query_position, rows, rows.mean(dim=(0, 1)), labels)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, model: DecoderLM, opt_state: AdamWState | None = None, manifest_digest: str | None = None, extra: dict | None = None) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "params": model.state_dict(),
            "opt_state": opt_state.state_dict() if opt_state is not None else None,
            "manifest_digest": manifest_digest,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[DecoderLM, AdamWState | None, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    config = ModelConfig(**blob["config"])
    model = DecoderLM(config).to(config.torch_dtype)
    model.load_state_dict(blob["params"])
    model.eval()
    opt = AdamWState.from_state_dict(blob["opt_state"]) if blob["opt_state"] is not None else None
    return model, opt, blob


def param_count(model: DecoderLM) -> int:
    return sum(p.numel() for p in model.parameters())


def parameters_finite(params: Iterable[torch.Tensor]) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in params)
