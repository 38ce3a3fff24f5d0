"""Model checkpoints on top of the named-array archive."""

from __future__ import annotations

import os
from typing import Any

import numpy as np
import torch

from progre import archive
from progre.config import model_config_from_dict, model_config_to_dict
from progre.encoder import ModelConfig, ProgRE, build_model

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def model_arrays(model: ProgRE) -> dict[str, np.ndarray]:
    """Parameters and buffers under their stable dotted names."""
    return {name: t.detach().cpu().numpy().copy() for name, t in model.state_dict().items()}


def save_checkpoint(path: str | os.PathLike, model: ProgRE, step: int = 0, seed: int = 0,
                    loss_tail: list[dict] | None = None, extra: dict[str, Any] | None = None) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model_config_to_dict(model.cfg),
        "step": int(step),
        "seed": int(seed),
        "loss_tail": list(loss_tail or []),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    if extra:
        meta["extra"] = extra
    archive.save(path, model_arrays(model), meta)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        arrays, meta = archive.load(path)
    except archive.ArchiveError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format_version {meta.get('format_version')!r} "
                              f"!= supported {CHECKPOINT_VERSION}")
    return arrays, meta


def load_into(model: ProgRE, arrays: dict[str, np.ndarray]) -> ProgRE:
    """Copy arrays into ``model``; names and shapes must match exactly."""
    state = model.state_dict()
    for name, target in state.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing array {name!r}")
        if tuple(arrays[name].shape) != tuple(target.shape):
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {tuple(arrays[name].shape)} "
                                  f"vs model {tuple(target.shape)}")
    extra = sorted(set(arrays) - set(state))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected array {extra[0]!r}")
    model.load_state_dict({k: torch.from_numpy(np.array(arrays[k])) for k in state})
    return model


def load_model(path: str | os.PathLike, cfg: ModelConfig | None = None) -> tuple[ProgRE, dict[str, Any]]:
    arrays, meta = load_checkpoint(path)
    cfg = cfg or model_config_from_dict(meta["config"])
    dtype = getattr(torch, meta.get("dtype", "float32"))
    model = build_model(cfg, seed=0, dtype=dtype)
    load_into(model, arrays)
    model.eval()
    return model, meta
