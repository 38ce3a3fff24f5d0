"""Desk-scale pre-training loop with periodic checkpoints and a loss CSV."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from progre.audio import conv_output_length
from progre.checkpoint import save_checkpoint
from progre.config import RunConfig, derive_seed
from progre.corpus import Manifest
from progre.encoder import ModelConfig, ProgRE, build_model, sample_mask
from progre.objectives import Batch, LinearWarmupDecay, LossWeights, make_optimizer, pretrain_step
from progre.pitch import estimate_f0, log_normalize, reconcile_length

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_f", "l_s", "l_c", "total", "lr")


@dataclass
class Utterance:
    uid: str
    samples: np.ndarray
    pitch: np.ndarray  # normalized log-F0, length T
    labels: np.ndarray | None  # length T
    target: np.ndarray | None  # speaker target

    @property
    def num_frames(self) -> int:
        return self.pitch.shape[0]


def prepare_utterances(manifest: Manifest, labels: dict[str, np.ndarray] | None = None,
                       teacher=None) -> list[Utterance]:
    """Load audio, normalized pitch aligned to the frame grid, labels and speaker targets."""
    utts = []
    for e in manifest:
        wave = manifest.load(e)
        T = conv_output_length(len(wave))
        pitch = reconcile_length(log_normalize(estimate_f0(wave)), T).values
        lab = None
        if labels is not None:
            if e.utterance_id not in labels:
                raise KeyError(f"no pseudo-labels for utterance {e.utterance_id!r}")
            lab = np.asarray(labels[e.utterance_id])
            if lab.shape[0] < T:
                raise ValueError(f"{e.utterance_id}: {lab.shape[0]} labels for {T} frames")
            lab = lab[:T]
        target = None if teacher is None else teacher.speaker_target(e.utterance_id, e.speaker_label, wave)
        utts.append(Utterance(e.utterance_id, wave.samples, pitch, lab, target))
    return utts


def make_batch(utts: list[Utterance], cfg: ModelConfig, rng: np.random.Generator,
               mask_rng: np.random.Generator, dtype=torch.float32) -> Batch:
    """Crop every utterance to the shortest frame count (random frame offset) and draw masks."""
    T = min(u.num_frames for u in utts)
    hop, rf = cfg.frontend.hop, cfg.frontend.receptive_field
    n_samples = rf + (T - 1) * hop
    wavs, pitches, labels, masks = [], [], [], []
    for u in utts:
        off = int(rng.integers(u.num_frames - T + 1))
        wavs.append(u.samples[off * hop : off * hop + n_samples])
        pitches.append(u.pitch[off : off + T])
        labels.append(u.labels[off : off + T])
        masks.append(sample_mask(T, cfg, mask_rng).masked)
    return Batch(
        wav=torch.as_tensor(np.stack(wavs), dtype=dtype),
        pitch=torch.as_tensor(np.stack(pitches), dtype=dtype),
        labels=torch.as_tensor(np.stack(labels), dtype=torch.long),
        speaker_targets=torch.as_tensor(np.stack([u.target for u in utts]), dtype=dtype),
        mask=torch.as_tensor(np.stack(masks)),
    )


def pretrain(cfg: RunConfig, utts: list[Utterance], out_dir: str | os.PathLike) -> tuple[ProgRE, list[dict]]:
    """Run ``cfg.steps`` optimizer steps; writes ``losses.csv`` and checkpoints into ``out_dir``."""
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config()
    if any(u.labels is None or u.target is None for u in utts):
        raise ValueError("pre-training needs pseudo-labels and speaker targets for every utterance")
    max_label = max(int(u.labels.max()) for u in utts)
    if max_label >= mcfg.num_units:
        raise ValueError(f"label {max_label} out of range for num_units={mcfg.num_units}")
    dtype = getattr(torch, cfg.dtype)
    model = build_model(mcfg, derive_seed(cfg.seed, "init"), dtype)
    optimizer = make_optimizer(model, cfg.weight_decay)
    schedule = LinearWarmupDecay(cfg.steps, cfg.peak_lr, cfg.warmup_frac)
    weights = LossWeights(cfg.lambda_f, cfg.lambda_s, cfg.lambda_c)
    batch_rng = np.random.default_rng(derive_seed(cfg.seed, "batch"))
    mask_rng = np.random.default_rng(derive_seed(cfg.seed, "mask"))

    csv_path = out / "losses.csv"
    if csv_path.exists():
        csv_path.unlink()
    history = []
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for step in range(cfg.steps):
            idx = batch_rng.choice(len(utts), size=min(cfg.batch_size, len(utts)), replace=False)
            batch = make_batch([utts[i] for i in sorted(idx)], mcfg, batch_rng, mask_rng, dtype)
            losses, lr = pretrain_step(model, optimizer, batch, step, schedule, weights,
                                       cfg.max_grad_norm or None)
            row = {"step": step, **losses.as_floats(), "lr": lr}
            history.append(row)
            writer.writerow([row[c] for c in LOSS_COLUMNS])
            fh.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
                save_checkpoint(out / f"checkpoint_{step + 1:06d}.pgna", model, step + 1, cfg.seed, history[-5:])
            if step % 50 == 0:
                log.info("step %d  l_f=%.4f l_s=%.4f l_c=%.4f lr=%.2e", step, row["l_f"], row["l_s"], row["l_c"], lr)
    save_checkpoint(out / "checkpoint_final.pgna", model, cfg.steps, cfg.seed, history[-5:])
    model.eval()
    return model, history
