"""Utterance-level speaker targets for the speaker regression loss.

Two providers share one call signature: a synthetic one that derives a fixed
unit vector from the speaker label, and one that reads embeddings computed by
an external speaker model.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from progre import archive


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ValueError("cannot normalize a zero or non-finite embedding")
    return v / n


class SyntheticTeacher:
    """Unit vectors from a generator keyed on sha256(seed, speaker_label)."""

    kind = "synthetic"

    def __init__(self, embedding_dim: int = 192, seed: int = 0):
        self.embedding_dim = embedding_dim
        self.seed = seed

    def speaker_target(self, utterance_id: str, speaker_label: str | None = None, wave=None) -> np.ndarray:
        if speaker_label is None:
            raise KeyError(f"synthetic teacher needs a speaker label for utterance {utterance_id!r}")
        digest = hashlib.sha256(f"{self.seed}:{speaker_label}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return _unit(rng.standard_normal(self.embedding_dim))


class FileTeacher:
    """Embeddings from a named-array archive plus JSON index ``{utterance_id: array_name}``."""

    kind = "external-file"

    def __init__(self, path: str | os.PathLike, embedding_dim: int = 192):
        self.embedding_dim = embedding_dim
        arrays, _ = archive.load(path)
        with open(str(path) + ".json") as fh:
            index = json.load(fh)
        entries = index.get("entries", index)
        self._table = {}
        for uid, name in entries.items():
            name = name["array"] if isinstance(name, dict) else name
            vec = np.asarray(arrays[name], dtype=np.float64).reshape(-1)
            if vec.size != embedding_dim:
                raise ValueError(f"embedding for {uid!r} has dim {vec.size}, expected {embedding_dim}")
            self._table[uid] = vec

    def speaker_target(self, utterance_id: str, speaker_label: str | None = None, wave=None) -> np.ndarray:
        if utterance_id not in self._table:
            raise KeyError(f"no precomputed speaker embedding for utterance {utterance_id!r}")
        return _unit(self._table[utterance_id])


def write_embeddings(path: str | os.PathLike, embeddings: dict[str, np.ndarray]) -> None:
    """Store externally computed embeddings in the format ``FileTeacher`` reads."""
    names = {uid: f"emb{n:06d}" for n, uid in enumerate(sorted(embeddings))}
    archive.save(path, {names[u]: np.asarray(embeddings[u], dtype=np.float64) for u in sorted(embeddings)})
    archive.atomic_write_text(str(path) + ".json", json.dumps({"entries": names}, indent=1, sort_keys=True))


def make_teacher(kind: str, embedding_dim: int = 192, seed: int = 0, path=None):
    if kind == "synthetic":
        return SyntheticTeacher(embedding_dim, seed)
    if kind in ("file", "external-file"):
        if path is None:
            raise ValueError("external-file teacher requires a path")
        return FileTeacher(path, embedding_dim)
    raise ValueError(f"unknown teacher kind {kind!r}")
