"""Pre-training losses, their weighted combination and the optimizer step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from progre.audio import FrameFeatures
from progre.encoder import EncoderOutputs, ProgRE

COS_EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    def __init__(self, breakdown: dict):
        self.breakdown = breakdown
        parts = ", ".join(f"{k}={v!r}" for k, v in breakdown.items())
        super().__init__(f"non-finite pre-training loss at step {breakdown.get('step')}: {parts}")


def _as_mask(mask) -> torch.Tensor:
    if hasattr(mask, "masked"):
        mask = mask.masked
    return torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask, dtype=torch.bool)


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """Cosine similarity along the last axis (broadcasting), guarded for zero vectors."""
    num = (a * b).sum(-1)
    den = torch.linalg.vector_norm(a, dim=-1) * torch.linalg.vector_norm(b, dim=-1)
    return num / den.clamp_min(eps)


def feature_penalty(x_f) -> torch.Tensor:
    """Mean squared activation of the frame features."""
    if isinstance(x_f, FrameFeatures):
        x_f = x_f.values
    x_f = torch.as_tensor(x_f)
    return x_f.pow(2).mean()


def speaker_loss(o_s: torch.Tensor, s: torch.Tensor, A_s: torch.Tensor, mask) -> torch.Tensor:
    """-mean over masked frames of log sigmoid(cos(o_s A_s, s)).

    o_s: (B, T, D) or (T, D); A_s: (D, K); mask like o_s[..., 0]. The target s is one
    embedding per utterance, (B, K) or (K,), or one per frame, shaped like o_s A_s.
    """
    mask = _as_mask(mask)
    if not mask.any():
        raise ValueError("speaker loss needs at least one masked frame")
    s = torch.as_tensor(s, dtype=o_s.dtype)
    if s.dim() == o_s.dim() - 1:
        s = s.unsqueeze(-2)
    sim = cosine(o_s @ A_s, s)
    return -F.logsigmoid(sim[mask]).mean()


def content_loss(o_c: torch.Tensor, z, A_c: torch.Tensor, E: torch.Tensor, mask, tau: float = 0.1) -> torch.Tensor:
    """Cross-entropy of cosine-similarity logits / tau against unit labels, masked frames only."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    mask = _as_mask(mask)
    if not mask.any():
        raise ValueError("content loss needs at least one masked frame")
    z = torch.as_tensor(z, dtype=torch.long)
    proj = (o_c @ A_c)[mask]  # (M, E_dim)
    logits = cosine(proj.unsqueeze(1), E.unsqueeze(0)) / tau  # (M, U)
    return F.cross_entropy(logits, z[mask])


@dataclass(frozen=True)
class LossWeights:
    lambda_f: float = 10.0
    lambda_s: float = 1.0
    lambda_c: float = 1.0


@dataclass
class LossBreakdown:
    l_f: torch.Tensor
    l_s: torch.Tensor
    l_c: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_f", "l_s", "l_c", "total")}


def total_loss(l_f, l_s, l_c, weights: LossWeights = LossWeights()) -> LossBreakdown:
    l_f, l_s, l_c = (torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v for v in (l_f, l_s, l_c))
    total = weights.lambda_f * l_f + weights.lambda_s * l_s + weights.lambda_c * l_c
    return LossBreakdown(l_f, l_s, l_c, total, weights)


def compute_losses(model: ProgRE, out: EncoderOutputs, labels, speaker_targets,
                   weights: LossWeights = LossWeights()) -> LossBreakdown:
    if out.mask is None:
        raise ValueError("losses are defined on masked frames; run the forward pass with a mask")
    l_f = feature_penalty(out.x_f)
    l_s = speaker_loss(out.speaker_repr, speaker_targets, model.projections.A_s, out.mask)
    l_c = content_loss(out.content_out, labels, model.projections.A_c, model.unit_embeddings.E,
                       out.mask, model.cfg.logit_temp)
    return total_loss(l_f, l_s, l_c, weights)


# ------------------------------------------------------------- optimization


@dataclass(frozen=True)
class LinearWarmupDecay:
    """Linear ramp 0 -> peak over the first ``warmup_frac`` of steps, then linear decay to 0."""

    total_steps: int
    peak_lr: float = 5e-4
    warmup_frac: float = 0.08

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.total_steps))

    def __call__(self, step: int) -> float:
        w = self.warmup_steps
        if step < w:
            return self.peak_lr * step / w
        if step >= self.total_steps:
            return 0.0
        return self.peak_lr * (self.total_steps - step) / max(self.total_steps - w, 1)


def make_optimizer(model: torch.nn.Module, weight_decay: float = 0.01) -> torch.optim.Optimizer:
    """Adam with decoupled weight decay, betas (0.9, 0.98), eps 1e-6."""
    return torch.optim.AdamW(model.parameters(), lr=0.0, betas=(0.9, 0.98), eps=1e-6, weight_decay=weight_decay)


@dataclass
class Batch:
    wav: torch.Tensor  # (B, N)
    pitch: torch.Tensor  # (B, T)
    labels: torch.Tensor  # (B, T) long
    speaker_targets: torch.Tensor  # (B, K)
    mask: torch.Tensor  # (B, T) bool


def pretrain_step(model: ProgRE, optimizer: torch.optim.Optimizer, batch: Batch, step: int,
                  schedule: LinearWarmupDecay, weights: LossWeights = LossWeights(),
                  max_grad_norm: float | None = None) -> tuple[LossBreakdown, float]:
    """One joint forward/backward/update. Returns the losses and the learning rate used."""
    lr = schedule(step)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(batch.wav, batch.pitch, batch.mask)
    losses = compute_losses(model, out, batch.labels, batch.speaker_targets, weights)
    if not torch.isfinite(losses.total):
        raise NonFiniteLossError({"step": step, "lr": lr, **losses.as_floats()})
    losses.total.backward()
    if max_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), max_grad_norm)
    optimizer.step()
    return losses, lr

