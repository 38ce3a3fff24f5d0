"""
Unit discovery and the pre-training losses
==========================================

Cluster MFCC frames into pseudo-labels, then evaluate the speaker and
content losses of a freshly initialized tiny encoder on masked frames.
"""

import tempfile

import numpy as np
import torch

from progre.config import RunConfig
from progre.corpus import CorpusSpec, gen_synthetic_corpus
from progre.discovery import mfcc_store
from progre.encoder import ModelConfig, build_model
from progre.objectives import compute_losses
from progre.teacher import make_teacher
from progre.training import make_batch, prepare_utterances
from progre.units import assign_units, fit_minibatch_kmeans

with tempfile.TemporaryDirectory() as tmp:
    manifest = gen_synthetic_corpus(CorpusSpec(n_speakers=3, n_utts=4, duration_s=1.0), tmp)

    # Iteration one: k-means over 39-dim MFCC frames.
    store = mfcc_store(manifest)
    codebook = fit_minibatch_kmeans(store, 8, batch_frames=500, restarts=3, seed=0)
    labels = assign_units(store, codebook)
    counts = np.bincount(np.concatenate(list(labels.values())), minlength=8)
    print(f"{store.total_frames()} frames, inertia {codebook.inertia:.1f}, unit counts {counts.tolist()}")

    # One masked batch through an untrained tiny encoder.
    cfg = ModelConfig.preset("tiny", num_units=8)
    model = build_model(cfg, seed=0)
    utts = prepare_utterances(manifest, labels, make_teacher("synthetic", cfg.speaker_dim, seed=0))
    batch = make_batch(utts[:4], cfg, np.random.default_rng(0), np.random.default_rng(1))
    out = model(batch.wav, batch.pitch, batch.mask)
    losses = compute_losses(model, out, batch.labels, batch.speaker_targets)
    print(f"masked frames {int(batch.mask.sum())}/{batch.mask.numel()}")
    print("losses at init:", {k: round(v, 4) for k, v in losses.as_floats().items()})
    print(f"uniform-guess content loss would be about log(8) = {np.log(8):.4f}")
