"""Flat ``key = value`` run configuration and seed derivation.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment.
Keys are the fields of :class:`RunConfig`; values are converted to the
field's type. Model fields left unset fall back to the chosen preset.

Seeds: a single master seed is expanded into independent streams with
``numpy.random.SeedSequence(master, spawn_key=(stream_index,))``; the stream
indices are fixed in :data:`STREAMS`.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, fields

import numpy as np

from progre.audio import FrontendParams
from progre.encoder import ModelConfig

STREAMS = {"data": 0, "mask": 1, "init": 2, "kmeans": 3, "probe": 4, "batch": 5, "teacher": 6}


def derive_seed(master: int, stream: str) -> int:
    if stream not in STREAMS:
        raise KeyError(f"unknown seed stream {stream!r}")
    ss = np.random.SeedSequence(int(master), spawn_key=(STREAMS[stream],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "tiny"
    seed: int = 0
    # model overrides (None: preset value)
    hidden_dim: int | None = None
    num_layers: int | None = None
    num_heads: int | None = None
    ffn_dim: int | None = None
    insert_layer: int | None = None
    mask_start_prob: float | None = None
    mask_span_len: int | None = None
    frontend_channels: int | None = None
    pitch_channels: int | None = None
    pitch_gru_dim: int | None = None
    speaker_hidden: int | None = None
    speaker_dim: int | None = None
    unit_embed_dim: int | None = None
    num_units: int | None = None
    max_positions: int | None = None
    pitch_mode: str | None = None
    speaker_mode: str | None = None
    # pre-training
    steps: int = 200
    batch_size: int = 8
    peak_lr: float = 5e-4
    warmup_frac: float = 0.08
    weight_decay: float = 0.01
    lambda_f: float = 10.0
    lambda_s: float = 1.0
    lambda_c: float = 1.0
    max_grad_norm: float = 0.0  # 0 disables clipping
    checkpoint_every: int = 50
    dtype: str = "float32"
    # unit discovery
    iteration: int = 1
    num_clusters: int | None = None  # None: 100 (iteration 1) / 500 (iteration 2)
    subset_fraction: float = 0.1
    batch_frames: int = 10000
    restarts: int = 20
    layer: int | None = None  # None: 3/4 of the depth (9 for base, 18 for large)
    mfcc_cmn: bool = False  # per-utterance mean normalization of MFCCs before clustering
    # speaker teacher
    teacher_kind: str = "synthetic"
    teacher_dim: int = 192
    teacher_file: str = ""
    # probing
    probe_task: str = "utterance"
    probe_steps: int = 300
    probe_lr: float = 1e-2
    probe_batch: int = 8

    def model_config(self) -> ModelConfig:
        base = ModelConfig.preset(self.preset)
        names = {f.name for f in fields(ModelConfig)}
        changes = {k: v for k, v in dataclasses.asdict(self).items() if k in names and v is not None}
        if self.frontend_channels is not None:
            fp = base.frontend
            changes["frontend"] = dataclasses.replace(fp, channels=(self.frontend_channels,) * len(fp.kernels))
        return base.replace(**changes)

    def unit_count(self) -> int:
        if self.num_clusters is not None:
            return self.num_clusters
        return 100 if self.iteration == 1 else 500

    def dump_layer(self, num_layers: int) -> int:
        return self.layer if self.layer is not None else (3 * num_layers) // 4


def _convert(name: str, raw: str, tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        tp = args[0]
    try:
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return tp(raw)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {tp.__name__}") from None


_HINTS = None


def _hints():
    global _HINTS
    if _HINTS is None:
        _HINTS = typing.get_type_hints(RunConfig)
    return _HINTS


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    hints = _hints()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _convert(key, value, hints[key]))
    cfg.model_config()  # validate
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def format_config(cfg: RunConfig) -> str:
    """Fully resolved config (every key, defaults filled) in file syntax."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["frontend"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["frontend"].items()}
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    fe = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("frontend").items()}
    return ModelConfig(frontend=FrontendParams(**fe), **d)
