"""The two unit-discovery iterations: features -> k-means -> per-frame labels."""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np
import torch

from progre.audio import compute_mfcc, conv_output_length
from progre.config import RunConfig, derive_seed
from progre.corpus import Manifest
from progre.encoder import ProgRE
from progre.pitch import estimate_f0, log_normalize, reconcile_length
from progre.units import (
    FeatureStore,
    assign_units,
    fit_minibatch_kmeans,
    save_codebook,
    save_feature_store,
    save_labels,
)

log = logging.getLogger(__name__)


def mfcc_store(manifest: Manifest, cmn: bool = False) -> FeatureStore:
    """MFCC + deltas per utterance; ``cmn`` subtracts each utterance's mean feature vector."""
    feats = {}
    for e in manifest:
        v = compute_mfcc(manifest.load(e)).values
        feats[e.utterance_id] = v - v.mean(axis=0) if cmn else v
    return FeatureStore(feats, "mfcc_cmn" if cmn else "mfcc")


def layer_features(model: ProgRE, samples: np.ndarray, k: int) -> np.ndarray:
    """Unmasked inference output of transformer layer ``k`` (1-based) for one utterance."""
    if not 1 <= k <= model.cfg.num_layers:
        raise ValueError(f"layer index {k} outside 1..{model.cfg.num_layers}")
    from progre.audio import Waveform

    wave = Waveform(samples)
    T = conv_output_length(len(wave), model.cfg.frontend)
    pitch = reconcile_length(log_normalize(estimate_f0(wave)), T)
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(samples, dtype=dtype)[None], torch.as_tensor(pitch.values, dtype=dtype)[None])
    return out.layer(k)[0].double().numpy()


def dump_layer_features(model: ProgRE, manifest: Manifest, k: int,
                        out_path: str | os.PathLike | None = None) -> FeatureStore:
    """Layer-``k`` features for every utterance, keyed by utterance id."""
    if not 1 <= k <= model.cfg.num_layers:
        raise ValueError(f"layer index {k} outside 1..{model.cfg.num_layers}")
    feats = {e.utterance_id: layer_features(model, manifest.load(e).samples, k) for e in manifest}
    store = FeatureStore(feats, f"layer_{k}")
    if out_path is not None:
        save_feature_store(out_path, store)
    return store


def select_subset(uids: list[str], fraction: float, seed: int) -> list[str]:
    """Seeded uniform sample of utterances (at least one), returned sorted."""
    if not 0 < fraction <= 1:
        raise ValueError(f"subset fraction must be in (0, 1], got {fraction}")
    uids = sorted(uids)
    n = max(1, int(round(fraction * len(uids))))
    rng = np.random.default_rng(seed)
    return sorted(uids[i] for i in rng.choice(len(uids), size=n, replace=False))


def run_iteration(cfg: RunConfig, manifest: Manifest, out_dir: str | os.PathLike,
                  model: ProgRE | None = None) -> Path:
    """Iteration 1 clusters MFCCs; iteration 2 clusters layer features of ``model``.

    Writes ``codebook.pgna``, ``labels.pgna`` (+ ``.json`` index) and, for
    iteration 2, ``features.pgna``. Returns the label store path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.iteration == 1:
        store = mfcc_store(manifest, cfg.mfcc_cmn)
    elif cfg.iteration == 2:
        if model is None:
            raise ValueError("iteration 2 needs a checkpoint from iteration 1")
        store = dump_layer_features(model, manifest, cfg.dump_layer(model.cfg.num_layers), out / "features.pgna")
    else:
        raise ValueError(f"iteration must be 1 or 2, got {cfg.iteration}")
    subset = select_subset(list(store.features), cfg.subset_fraction, derive_seed(cfg.seed, "data"))
    fit_store = FeatureStore({k: store.features[k] for k in subset}, store.source)
    U = cfg.unit_count()
    log.info("iteration %d: fitting %d units on %d frames from %d utterances",
             cfg.iteration, U, fit_store.total_frames(), len(subset))
    cb = fit_minibatch_kmeans(fit_store, U, cfg.batch_frames, cfg.restarts, derive_seed(cfg.seed, "kmeans"))
    save_codebook(out / "codebook.pgna", cb, store.source)
    labels_path = out / "labels.pgna"
    save_labels(labels_path, assign_units(store, cb), store.source)
    return labels_path
