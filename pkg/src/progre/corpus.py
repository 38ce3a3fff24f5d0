"""Manifests and the seeded synthetic corpus used for desk-scale runs."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from progre import archive
from progre.audio import SAMPLE_RATE, Waveform, conv_output_length, load_waveform, wav_bytes
from progre.units import save_labels

DEFAULT_F0S = (110.0, 165.0, 220.0, 330.0)
FORMANTS = (500.0, 1000.0, 1800.0, 2800.0, 700.0, 1400.0, 2200.0, 3300.0)


@dataclass
class ManifestEntry:
    utterance_id: str
    audio_path: str
    speaker_label: str | None = None
    probe_label: str | None = None
    duration_s: float = 0.0


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"duplicate utterance_id {dup!r} in manifest")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.audio_path)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> Waveform:
        return load_waveform(self.resolve(entry))

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.utterance_id: e for e in self.entries}


def read_manifest(path: str | os.PathLike, check_files: bool = True) -> Manifest:
    """JSON-lines manifest; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest entry ({exc})") from None
    manifest = Manifest(entries, path.parent)
    if check_files:
        for e in manifest:
            if not manifest.resolve(e).exists():
                raise FileNotFoundError(f"manifest {path}: audio for {e.utterance_id!r} missing at {manifest.resolve(e)}")
    return manifest


def write_manifest(path: str | os.PathLike, entries: list[ManifestEntry]) -> None:
    lines = [json.dumps(asdict(e), sort_keys=True) for e in entries]
    archive.atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 4
    n_utts: int = 8
    duration_s: float = 2.0
    seed: int = 0
    n_classes: int = 4
    f0s: tuple[float, ...] | None = None
    intonation: float = 0.03  # relative F0 excursion
    timbre_scale: float = 0.6  # std of the per-speaker log-amplitude bias
    noise: float = 0.005
    segment_s: tuple[float, float] = (0.3, 0.8)  # content segment duration range

    def speaker_f0(self, s: int) -> float:
        f0s = self.f0s or DEFAULT_F0S
        if s < len(f0s):
            return float(f0s[s])
        return float(np.geomspace(100.0, 300.0, self.n_speakers)[s])


def synth_utterance(spec: CorpusSpec, f0: float, timbre: np.ndarray, rng: np.random.Generator):
    """One harmonic utterance; returns (samples, per-sample class index)."""
    n = int(round(spec.duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    phase0 = rng.uniform(0, 2 * np.pi)
    f0_track = f0 * (1.0 + spec.intonation * np.sin(2 * np.pi * 0.7 * t + phase0))
    phase = 2 * np.pi * np.cumsum(f0_track) / SAMPLE_RATE

    classes = np.empty(n, dtype=np.int64)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(*spec.segment_s) * SAMPLE_RATE)
        classes[pos : pos + seg] = rng.integers(spec.n_classes)
        pos += seg

    n_harm = len(timbre)
    x = np.zeros(n)
    formants = np.array(FORMANTS[: spec.n_classes]) if spec.n_classes <= len(FORMANTS) else \
        np.linspace(400.0, 3500.0, spec.n_classes)
    for k in range(1, n_harm + 1):
        fk = k * f0
        if fk > 0.45 * SAMPLE_RATE:
            break
        env = np.exp(-0.5 * ((fk - formants) / 250.0) ** 2) + 0.1 / k
        amp = env[classes] * np.exp(timbre[k - 1])
        x += amp * np.sin(k * phase)
    x *= 0.5 / np.max(np.abs(x))
    x += spec.noise * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0), classes


def gen_synthetic_corpus(spec: CorpusSpec, out_dir: str | os.PathLike) -> Manifest:
    """Write ``wav/*.wav``, ``manifest.jsonl``, ``frame_labels`` and ``corpus.json`` under ``out_dir``."""
    if spec.n_speakers < 1 or spec.n_utts < 1 or spec.duration_s <= 0:
        raise ValueError("n_speakers, n_utts and duration_s must be positive")
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from None
    rng = np.random.default_rng(spec.seed)
    entries, frame_labels = [], {}
    for s in range(spec.n_speakers):
        f0 = spec.speaker_f0(s)
        timbre = spec.timbre_scale * rng.standard_normal(64)
        spk = f"spk{s:02d}"
        for u in range(spec.n_utts):
            uid = f"{spk}_utt{u:03d}"
            samples, classes = synth_utterance(spec, f0, timbre, rng)
            rel = f"wav/{uid}.wav"
            archive.atomic_write_bytes(out / rel, wav_bytes(samples))
            T = conv_output_length(len(samples))
            centers = np.arange(T) * 320 + 200
            frame_labels[uid] = classes[np.minimum(centers, len(samples) - 1)]
            entries.append(ManifestEntry(uid, rel, spk, spk, len(samples) / SAMPLE_RATE))
    write_manifest(out / "manifest.jsonl", entries)
    save_labels(out / "frame_labels", frame_labels, source="synthetic-classes")
    meta = asdict(spec) | {"speaker_f0": [spec.speaker_f0(s) for s in range(spec.n_speakers)]}
    archive.atomic_write_text(out / "corpus.json", json.dumps(meta, indent=1, sort_keys=True))
    return Manifest(entries, out)
