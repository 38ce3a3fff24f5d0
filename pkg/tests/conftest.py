import numpy as np
import pytest
import torch

from progre.audio import FrontendParams
from progre.encoder import ModelConfig, build_model


def micro_config(**overrides) -> ModelConfig:
    """D=8, n=2, i=1 model small enough for finite-difference checks."""
    cfg = ModelConfig(
        hidden_dim=8,
        num_layers=2,
        num_heads=2,
        ffn_dim=16,
        insert_layer=1,
        mask_span_len=2,
        frontend=FrontendParams(channels=(4,) * 7),
        pitch_channels=4,
        pitch_gru_dim=4,
        speaker_hidden=4,
        speaker_attn_dim=4,
        speaker_dim=6,
        unit_embed_dim=4,
        num_units=3,
        max_positions=16,
    )
    return cfg.replace(**overrides)


def samples_for_frames(T: int) -> int:
    return 400 + (T - 1) * 320


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def micro_model(micro_cfg):
    return build_model(micro_cfg, seed=0, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


PARAM_GROUPS = ("frontend", "pitch_extractor", "speaker_extractor", "transformer",
                "projections", "unit_embeddings", "mask_embedding")


def micro_batch(cfg, T=5, B=2, seed=0):
    """Random float64 batch with a fixed mask covering frames 1..2 of every utterance."""
    from progre.objectives import Batch

    g = torch.Generator().manual_seed(seed)
    wav = 0.3 * torch.randn(B, samples_for_frames(T), generator=g, dtype=torch.float64)
    pitch = torch.randn(B, T, generator=g, dtype=torch.float64)
    labels = torch.randint(0, cfg.num_units, (B, T), generator=g)
    spk = torch.randn(B, cfg.speaker_dim, generator=g, dtype=torch.float64)
    mask = torch.zeros(B, T, dtype=torch.bool)
    mask[:, 1:3] = True
    return Batch(wav, pitch, labels, spk, mask)


def group_gradient_errors(model, batch, h=1e-6):
    """Relative error ||g - fd|| / max(||g||, ||fd||) of each parameter group.

    Central differences are taken element by element on the total loss. Parameters
    whose gradient is structurally zero (a bias feeding batch norm) would make a
    per-element ratio meaningless, so the error is measured per group.
    """
    from progre.objectives import compute_losses

    model.train()

    def loss():
        out = model(batch.wav, batch.pitch, batch.mask)
        return compute_losses(model, out, batch.labels, batch.speaker_targets).total

    model.zero_grad()
    loss().backward()
    errors = {}
    for group in PARAM_GROUPS:
        params = [p for n, p in model.named_parameters() if n.split(".")[0] == group]
        analytic = torch.cat([p.grad.reshape(-1) for p in params])
        numeric = []
        with torch.no_grad():
            for p in params:
                flat = p.view(-1)
                for j in range(flat.numel()):
                    orig = flat[j].item()
                    flat[j] = orig + h
                    up = loss().item()
                    flat[j] = orig - h
                    down = loss().item()
                    flat[j] = orig
                    numeric.append((up - down) / (2 * h))
        numeric = torch.tensor(numeric, dtype=torch.float64)
        scale = max(analytic.norm().item(), numeric.norm().item())
        errors[group] = ((analytic - numeric).norm().item() / scale, scale)
    return errors
