"""Offline unit discovery: mini-batch k-means over MFCC or layer features."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from progre import archive

log = logging.getLogger(__name__)


@dataclass
class Codebook:
    centers: np.ndarray  # U x F
    inertia: float

    @property
    def num_units(self) -> int:
        return self.centers.shape[0]


@dataclass
class FeatureStore:
    features: dict[str, np.ndarray] = field(default_factory=dict)
    source: str = "mfcc"

    def __post_init__(self):
        dims = {v.shape[1] for v in self.features.values()}
        if len(dims) > 1:
            raise ValueError(f"feature store mixes dimensions {sorted(dims)}")

    @property
    def dim(self) -> int:
        return next(iter(self.features.values())).shape[1]

    def total_frames(self) -> int:
        return sum(v.shape[0] for v in self.features.values())

    def stacked(self, keys=None) -> np.ndarray:
        keys = sorted(self.features) if keys is None else keys
        return np.concatenate([self.features[k] for k in keys], axis=0)


# ------------------------------------------------------------- assignment


def squared_distances(x: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact per-pair squared Euclidean distances (no expansion trick), N x U."""
    out = np.empty((x.shape[0], centers.shape[0]))
    for lo in range(0, x.shape[0], chunk):
        diff = x[lo : lo + chunk, None, :] - centers[None, :, :]
        out[lo : lo + chunk] = np.einsum("nuf,nuf->nu", diff, diff)
    return out


def nearest_center(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the closest center; ties go to the lowest index."""
    if x.shape[1] != centers.shape[1]:
        raise ValueError(f"feature dim {x.shape[1]} != codebook dim {centers.shape[1]}")
    return np.argmin(squared_distances(x, centers), axis=1)


def inertia(x: np.ndarray, centers: np.ndarray) -> float:
    return float(squared_distances(x, centers).min(axis=1).sum())


def assign_units(store: FeatureStore, cb: Codebook) -> dict[str, np.ndarray]:
    return {uid: nearest_center(feats, cb.centers).astype(np.int64) for uid, feats in store.features.items()}


# ----------------------------------------------------------------- k-means


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2 seeding with the usual 2 + log(k) local trials per center."""
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = squared_distances(x, centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError(f"cannot place {k} distinct centers: data has fewer distinct points")
        cand = np.searchsorted(np.cumsum(closest), rng.random(trials) * total)
        cand = np.minimum(cand, n - 1)
        cand_d = np.minimum(closest[None, :], squared_distances(x, x[cand]).T)
        best = int(np.argmin(cand_d.sum(axis=1)))
        centers[c] = x[cand[best]]
        closest = cand_d[best]
    return centers


def minibatch_kmeans(x: np.ndarray, centers: np.ndarray, batch_frames: int, rng: np.random.Generator,
                     max_epochs: int = 100, tol: float = 1e-4) -> np.ndarray:
    """Mini-batch k-means with per-center learning rate 1 / count.

    Each epoch walks a fresh permutation of the frames in batches, so every
    frame is seen once per epoch. Stops after ``max_epochs`` or once no
    center moved more than ``tol`` over a whole epoch.
    """
    centers = centers.copy()
    counts = np.zeros(centers.shape[0])
    n = x.shape[0]
    bs = max(1, min(batch_frames, n))
    for _ in range(max_epochs):
        start = centers.copy()
        order = rng.permutation(n)
        for lo in range(0, n, bs):
            batch = x[order[lo : lo + bs]]
            labels = nearest_center(batch, centers)
            sums = np.zeros_like(centers)
            np.add.at(sums, labels, batch)
            nb = np.bincount(labels, minlength=centers.shape[0]).astype(np.float64)
            hit = nb > 0
            counts[hit] += nb[hit]
            eta = nb[hit] / counts[hit]
            centers[hit] = (1.0 - eta)[:, None] * centers[hit] + eta[:, None] * (sums[hit] / nb[hit, None])
        if np.sqrt(((centers - start) ** 2).sum(axis=1)).max() < tol:
            break
    return centers


def fit_minibatch_kmeans(store: FeatureStore | np.ndarray, U: int, batch_frames: int = 10000,
                         restarts: int = 20, seed: int = 0, max_epochs: int = 100, tol: float = 1e-4,
                         held_frames: int = 10000) -> Codebook:
    """k-means++ with ``restarts`` candidate seedings, then mini-batch refinement.

    Every candidate seeding is scored by inertia on a held sample of frames
    and the best one is refined. Inertia in the returned codebook is over
    all fitted frames.
    """
    x = store.stacked() if isinstance(store, FeatureStore) else np.asarray(store, dtype=np.float64)
    x = x.astype(np.float64, copy=False)
    if U < 1:
        raise ValueError("U must be >= 1")
    if x.shape[0] < U:
        raise ValueError(f"fewer frames ({x.shape[0]}) than clusters ({U})")
    rng = np.random.default_rng(seed)
    held = x if x.shape[0] <= held_frames else x[rng.choice(x.shape[0], held_frames, replace=False)]
    best, best_score = None, np.inf
    for _ in range(max(restarts, 1)):
        init = kmeans_plusplus(x, U, rng)
        score = inertia(held, init)
        if score < best_score:
            best, best_score = init, score
    centers = minibatch_kmeans(x, best, batch_frames, rng, max_epochs, tol)
    return Codebook(centers, inertia(x, centers))


# ----------------------------------------------------------------- storage


def write_store(path: str | os.PathLike, arrays: dict[str, np.ndarray], source: str, kind: str) -> None:
    """Write ``<path>`` (archive) and ``<path>.json`` (index uid -> array name, frame_count)."""
    path = Path(path)
    names = {uid: f"utt{n:06d}" for n, uid in enumerate(sorted(arrays))}
    archive.save(path, {names[uid]: arrays[uid] for uid in sorted(arrays)}, {"kind": kind, "source": source})
    index = {
        "kind": kind,
        "source": source,
        "entries": {uid: {"array": names[uid], "frame_count": int(arrays[uid].shape[0])} for uid in sorted(arrays)},
    }
    archive.atomic_write_text(str(path) + ".json", json.dumps(index, indent=1, sort_keys=True))


def read_store(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    arrays, _ = archive.load(path)
    with open(str(path) + ".json") as fh:
        index = json.load(fh)
    out = {}
    for uid, entry in index["entries"].items():
        arr = arrays[entry["array"]]
        if arr.shape[0] != entry["frame_count"]:
            raise archive.ArchiveError(f"{uid}: index says {entry['frame_count']} frames, archive has {arr.shape[0]}")
        out[uid] = arr
    return out, index


def save_feature_store(path, store: FeatureStore) -> None:
    write_store(path, store.features, store.source, "features")


def load_feature_store(path) -> FeatureStore:
    arrays, index = read_store(path)
    return FeatureStore(arrays, index["source"])


def save_labels(path, labels: dict[str, np.ndarray], source: str = "") -> None:
    write_store(path, {k: np.asarray(v, dtype=np.int64) for k, v in labels.items()}, source, "labels")


def load_labels(path) -> dict[str, np.ndarray]:
    return read_store(path)[0]


def save_codebook(path, cb: Codebook, source: str = "") -> None:
    archive.save(path, {"centers": cb.centers}, {"inertia": cb.inertia, "source": source})


def load_codebook(path) -> Codebook:
    arrays, meta = archive.load(path)
    return Codebook(arrays["centers"], float(meta["inertia"]))
