"""The progressive residual extraction encoder.

Waveform -> conv frontend -> minus pitch representation -> layer norm ->
(mask) -> transformer blocks 1..i -> speaker extractor taps block i and its
output is removed before block i+1 -> blocks i+1..n -> content output.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from progre.audio import ConvFrontend, FrontendParams, Waveform, conv_output_length
from progre.pitch import NormalizedPitch

RESIDUAL_MODES = ("subtract", "add")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 768
    num_layers: int = 12
    num_heads: int = 12
    ffn_dim: int = 3072
    insert_layer: int = 4
    mask_start_prob: float = 0.08
    mask_span_len: int = 10
    frontend: FrontendParams = field(default_factory=FrontendParams)
    pitch_channels: int = 256
    pitch_kernel: int = 5
    pitch_conv_layers: int = 3
    pitch_gru_dim: int = 256
    speaker_hidden: int = 256
    speaker_attn_dim: int | None = None  # None: hidden_dim
    speaker_dim: int = 192
    unit_embed_dim: int = 256
    num_units: int = 100
    max_positions: int = 2048
    logit_temp: float = 0.1
    layer_norm_eps: float = 1e-5
    pitch_mode: str = "subtract"
    speaker_mode: str = "subtract"

    def __post_init__(self):
        if not 0 < self.insert_layer < self.num_layers:
            raise ValueError(f"insert_layer must satisfy 0 < i < n, got i={self.insert_layer}, n={self.num_layers}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        for name in ("pitch_mode", "speaker_mode"):
            if getattr(self, name) not in RESIDUAL_MODES:
                raise ValueError(f"{name} must be one of {RESIDUAL_MODES}")
        if not 0.0 <= self.mask_start_prob <= 1.0:
            raise ValueError("mask_start_prob must lie in [0, 1]")
        if self.mask_span_len < 1:
            raise ValueError("mask_span_len must be >= 1")

    @property
    def attn_dim(self) -> int:
        return self.speaker_attn_dim or self.hidden_dim

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return dataclasses.replace(PRESETS[name], **overrides)


PRESETS = {
    "base": ModelConfig(),
    "large": ModelConfig(hidden_dim=1024, num_layers=24, num_heads=16, ffn_dim=4096, insert_layer=6),
    # Desk-scale: same conv schedule, narrow everywhere else.
    "tiny": ModelConfig(
        hidden_dim=32,
        num_layers=3,
        num_heads=4,
        ffn_dim=64,
        insert_layer=1,
        frontend=FrontendParams(channels=(32,) * 7),
        pitch_channels=16,
        pitch_gru_dim=16,
        speaker_hidden=16,
        speaker_dim=192,
        unit_embed_dim=16,
        num_units=16,
        max_positions=512,
    ),
}


# ------------------------------------------------------------------ masking


@dataclass
class MaskSpec:
    masked: np.ndarray
    spans: list[tuple[int, int]]

    @classmethod
    def from_bool(cls, masked) -> "MaskSpec":
        masked = np.asarray(masked, dtype=bool)
        spans = []
        t = 0
        while t < masked.size:
            if masked[t]:
                s = t
                while t < masked.size and masked[t]:
                    t += 1
                spans.append((s, t - s))
            else:
                t += 1
        return cls(masked, spans)

    @classmethod
    def none(cls, T: int) -> "MaskSpec":
        return cls(np.zeros(T, dtype=bool), [])

    def __len__(self):
        return self.masked.size


def sample_mask(T: int, cfg: ModelConfig, seed: int | np.random.Generator) -> MaskSpec:
    """Span masking: each admissible start fires with ``mask_start_prob``.

    Spans have length ``mask_span_len`` and must fit inside the sequence;
    overlapping spans are merged. If no start fires a single uniformly drawn
    span is used, so at least one frame is always masked.
    """
    L = cfg.mask_span_len
    if T < L:
        raise ValueError(f"sequence of {T} frames is shorter than the mask span ({L})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_starts = T - L + 1
    starts = np.nonzero(rng.random(n_starts) < cfg.mask_start_prob)[0]
    if starts.size == 0:
        starts = np.array([rng.integers(n_starts)])
    masked = np.zeros(T, dtype=bool)
    for s in starts:
        masked[s : s + L] = True
    return MaskSpec.from_bool(masked)


def apply_mask(x: torch.Tensor, masked: torch.Tensor, mask_embedding: torch.Tensor) -> torch.Tensor:
    """Replace rows flagged in ``masked`` (shape ``x.shape[:-1]``) with ``mask_embedding``."""
    return torch.where(masked.unsqueeze(-1), mask_embedding.to(x.dtype).expand_as(x), x)


# --------------------------------------------------------- building blocks


def remove_and_normalize(main: torch.Tensor, extracted: torch.Tensor, norm: nn.LayerNorm,
                         mode: str = "subtract") -> torch.Tensor:
    """layernorm(main - extracted); ``mode="add"`` is the multi-task ablation."""
    if main.shape != extracted.shape:
        raise ValueError(f"shape mismatch: {tuple(main.shape)} vs {tuple(extracted.shape)}")
    if mode == "subtract":
        return norm(main - extracted)
    if mode == "add":
        return norm(main + extracted)
    raise ValueError(f"unknown residual mode {mode!r}")


class PitchExtractor(nn.Module):
    """Conv(+BN+ReLU) x3 -> unidirectional GRU -> FC over the normalized log-F0 track."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        blocks = []
        in_ch = 1
        for _ in range(cfg.pitch_conv_layers):
            blocks.append(
                nn.Sequential(
                    nn.Conv1d(in_ch, cfg.pitch_channels, cfg.pitch_kernel, padding=cfg.pitch_kernel // 2),
                    nn.BatchNorm1d(cfg.pitch_channels, momentum=0.1),
                    nn.ReLU(),
                )
            )
            in_ch = cfg.pitch_channels
        self.convs = nn.ModuleList(blocks)
        self.gru = nn.GRU(in_ch, cfg.pitch_gru_dim, num_layers=1, batch_first=True)
        self.out = nn.Linear(cfg.pitch_gru_dim, cfg.hidden_dim)
        self.removal_norm = nn.LayerNorm(cfg.hidden_dim, eps=cfg.layer_norm_eps)

    def forward(self, pitch: torch.Tensor) -> torch.Tensor:
        """(B, T) -> (B, T, D)"""
        h = pitch.unsqueeze(1)
        for block in self.convs:
            h = block(h)
        h, _ = self.gru(h.transpose(1, 2))
        return self.out(h)


def attentive_statistics(h: torch.Tensor, logits: torch.Tensor, eps: float = 1e-10):
    """Attention-weighted mean and std over time.

    h: (B, T, C), logits: (B, T). Variances at or below ``eps`` give std 0.
    """
    alpha = torch.softmax(logits, dim=-1).unsqueeze(-1)
    mu = (alpha * h).sum(dim=1)
    var = (alpha * h * h).sum(dim=1) - mu * mu
    sigma = torch.where(var > eps, torch.sqrt(var.clamp(min=eps)), torch.zeros_like(var))
    return mu, sigma


def fas_pool(h: torch.Tensor, logits: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    """Frame-level attentive statistics: concat(h_t, mu, sigma) for every frame."""
    mu, sigma = attentive_statistics(h, logits, eps)
    T = h.shape[1]
    return torch.cat([h, mu.unsqueeze(1).expand(-1, T, -1), sigma.unsqueeze(1).expand(-1, T, -1)], dim=-1)


class SpeakerExtractor(nn.Module):
    """FC -> frame-level attentive statistics -> layer norm -> FC."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.speaker_hidden
        self.fc_in = nn.Linear(cfg.hidden_dim, H)
        self.attention = nn.Sequential(nn.Linear(H, cfg.attn_dim), nn.Tanh(), nn.Linear(cfg.attn_dim, 1))
        self.norm = nn.LayerNorm(3 * H, eps=cfg.layer_norm_eps)
        self.fc_out = nn.Linear(3 * H, cfg.hidden_dim)
        self.removal_norm = nn.LayerNorm(cfg.hidden_dim, eps=cfg.layer_norm_eps)

    def forward(self, o_i: torch.Tensor) -> torch.Tensor:
        h = self.fc_in(o_i)
        logits = self.attention(h).squeeze(-1)
        return self.fc_out(self.norm(fas_pool(h, logits)))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // self.heads)
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(B, T, D))


class TransformerBlock(nn.Module):
    """Pre-LN block: x + attn(ln(x)), then + ffn(ln(.))."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.hidden_dim
        self.attn_norm = nn.LayerNorm(D, eps=cfg.layer_norm_eps)
        self.attn = SelfAttention(D, cfg.num_heads)
        self.ffn_norm = nn.LayerNorm(D, eps=cfg.layer_norm_eps)
        self.ffn = nn.Sequential(nn.Linear(D, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, D))

    def forward(self, x):
        x = x + self.attn(self.attn_norm(x))
        return x + self.ffn(self.ffn_norm(x))


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_layers = cfg.num_layers
        self.pos_embedding = nn.Parameter(torch.randn(cfg.max_positions, cfg.hidden_dim) * 0.02)
        for k in range(1, cfg.num_layers + 1):
            self.add_module(f"block{k}", TransformerBlock(cfg))

    def block(self, k: int) -> TransformerBlock:
        return getattr(self, f"block{k}")


class Projections(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.hidden_dim
        self.A_c = nn.Parameter(torch.randn(D, cfg.unit_embed_dim) / math.sqrt(D))
        self.A_s = nn.Parameter(torch.randn(D, cfg.speaker_dim) / math.sqrt(D))


class UnitEmbeddings(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.E = nn.Parameter(torch.randn(cfg.num_units, cfg.unit_embed_dim))


# ------------------------------------------------------------------- model


@dataclass
class EncoderOutputs:
    """Every intermediate representation of one forward pass, batched (B, T, D)."""

    x_f: torch.Tensor
    pitch_repr: torch.Tensor
    branch_x: torch.Tensor
    block_inputs: list[torch.Tensor]
    layer_outputs: list[torch.Tensor]
    speaker_repr: torch.Tensor
    mask: torch.Tensor | None
    insert_layer: int

    @property
    def content_out(self) -> torch.Tensor:
        return self.layer_outputs[-1]

    def layer(self, k: int) -> torch.Tensor:
        """1-based transformer layer output."""
        return self.layer_outputs[k - 1]


class ProgRE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden_dim
        self.frontend = ConvFrontend(cfg.frontend, D)
        self.pitch_extractor = PitchExtractor(cfg)
        self.speaker_extractor = SpeakerExtractor(cfg)
        self.transformer = Transformer(cfg)
        self.mask_embedding = nn.Parameter(torch.empty(D).uniform_())
        self.projections = Projections(cfg)
        self.unit_embeddings = UnitEmbeddings(cfg)

    def num_frames(self, n_samples: int) -> int:
        return conv_output_length(n_samples, self.cfg.frontend)

    def forward(self, wav: torch.Tensor, pitch: torch.Tensor, mask: torch.Tensor | None = None) -> EncoderOutputs:
        """wav (B, N), pitch (B, T_p), mask (B, T) bool or None for inference.

        The pitch track is truncated to the frame count, or extended with
        zeros (the unvoiced value) if shorter.
        """
        cfg = self.cfg
        x_f = self.frontend(wav)
        B, T, _ = x_f.shape
        if T > cfg.max_positions:
            raise ValueError(f"{T} frames exceed max_positions={cfg.max_positions}")
        pitch = pitch.to(x_f.dtype)
        if pitch.shape[0] != B:
            raise ValueError(f"pitch batch {pitch.shape[0]} != waveform batch {B}")
        if pitch.shape[1] >= T:
            pitch = pitch[:, :T]
        else:
            pitch = nn.functional.pad(pitch, (0, T - pitch.shape[1]))

        o_p = self.pitch_extractor(pitch)
        x = remove_and_normalize(x_f, o_p, self.pitch_extractor.removal_norm, cfg.pitch_mode)
        h = x
        if mask is not None:
            if tuple(mask.shape) != (B, T):
                raise ValueError(f"mask shape {tuple(mask.shape)} != {(B, T)}")
            h = apply_mask(h, mask, self.mask_embedding)
        h = h + self.transformer.pos_embedding[:T]

        block_inputs, layer_outputs = [], []
        o_s = None
        for k in range(1, cfg.num_layers + 1):
            block_inputs.append(h)
            out = self.transformer.block(k)(h)
            layer_outputs.append(out)
            if k == cfg.insert_layer:
                o_s = self.speaker_extractor(out)
                h = remove_and_normalize(out, o_s, self.speaker_extractor.removal_norm, cfg.speaker_mode)
            else:
                h = out
        return EncoderOutputs(x_f, o_p, x, block_inputs, layer_outputs, o_s, mask, cfg.insert_layer)


def build_model(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> ProgRE:
    """Construct a model whose initial parameters depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ProgRE(cfg)
    return model.to(dtype)


def pitch_extractor_forward(p: NormalizedPitch, extractor: PitchExtractor) -> np.ndarray:
    """O^p for one utterance: T x D."""
    dtype = next(extractor.parameters()).dtype
    with torch.no_grad():
        return extractor(torch.as_tensor(p.values, dtype=dtype).unsqueeze(0))[0].numpy()


def speaker_extractor_forward(o_i: np.ndarray, extractor: SpeakerExtractor) -> np.ndarray:
    """O^s for one utterance: T x D."""
    dtype = next(extractor.parameters()).dtype
    with torch.no_grad():
        return extractor(torch.as_tensor(o_i, dtype=dtype).unsqueeze(0))[0].numpy()


def progre_forward(wave: Waveform, pitch: NormalizedPitch, model: ProgRE,
                   mask: MaskSpec | None = None) -> EncoderOutputs:
    """Single-utterance forward in eval mode; ``mask=None`` means no masking."""
    model.eval()
    dtype = next(model.parameters()).dtype
    wav = torch.as_tensor(wave.samples, dtype=dtype).unsqueeze(0)
    p = torch.as_tensor(pitch.values, dtype=dtype).unsqueeze(0)
    m = None if mask is None else torch.as_tensor(mask.masked).unsqueeze(0)
    with torch.no_grad():
        return model(wav, p, m)
