"""Weighted-sum probing of the frozen encoder's representation stack."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from progre import archive
from progre.encoder import EncoderOutputs, ModelConfig, ProgRE
from progre.pitch import estimate_f0, log_normalize, reconcile_length


def stack_tags(cfg: ModelConfig) -> list[str]:
    """[pitch, speaker, layer_1..layer_n] without the speaker-extractor insertion layer."""
    return ["pitch", "speaker"] + [f"layer_{k}" for k in range(1, cfg.num_layers + 1) if k != cfg.insert_layer]


@dataclass
class RepresentationStack:
    reps: list
    tags: list[str]
    insert_layer: int

    def __len__(self):
        return len(self.reps)


def assemble_stack(out: EncoderOutputs, cfg: ModelConfig) -> RepresentationStack:
    layers = [out.layer(k) for k in range(1, cfg.num_layers + 1) if k != cfg.insert_layer]
    return RepresentationStack([out.pitch_repr, out.speaker_repr, *layers], stack_tags(cfg), cfg.insert_layer)


@dataclass
class LayerWeights:
    logits: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.size == 0:
            raise ValueError("empty layer-weight vector")
        if self.weights is None:
            z = np.exp(self.logits - self.logits.max())
            self.weights = z / z.sum()
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @classmethod
    def inject(cls, weights) -> "LayerWeights":
        """Use ``weights`` verbatim (e.g. exact one-hot), logits = log(weights)."""
        weights = np.asarray(weights, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(np.log(weights), weights)


def weighted_sum(stack: RepresentationStack | list, w: LayerWeights):
    reps = stack.reps if isinstance(stack, RepresentationStack) else stack
    if len(reps) == 0:
        raise ValueError("empty representation stack")
    if len(reps) != len(w.weights):
        raise ValueError(f"{len(w.weights)} weights for {len(reps)} stack entries")
    total = w.weights[0] * reps[0]
    for wk, rk in zip(w.weights[1:], reps[1:]):
        total = total + wk * rk
    return total


# ------------------------------------------------------------- extraction


def extract_stack(model: ProgRE, samples: np.ndarray) -> np.ndarray:
    """Inference-mode stack for one utterance, shape (K, T, D), float32."""
    from progre.audio import Waveform

    wave = Waveform(samples)
    T = model.num_frames(len(wave))
    pitch = reconcile_length(log_normalize(estimate_f0(wave)), T)
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(samples, dtype=dtype)[None], torch.as_tensor(pitch.values, dtype=dtype)[None])
    stack = assemble_stack(out, model.cfg)
    return torch.stack([r[0] for r in stack.reps]).float().numpy()


# ------------------------------------------------------------------ probes


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 300
    lr: float = 1e-2
    batch_size: int = 8
    seed: int = 0
    test_fraction: float = 0.25


class WeightedSumProbe(nn.Module):
    """Softmax layer weights + linear head; utterance task mean-pools over time first."""

    def __init__(self, n_reps: int, dim: int, n_classes: int, task: str):
        super().__init__()
        if task not in ("utterance", "frame"):
            raise ValueError(f"unknown probe task {task!r}")
        self.task = task
        self.layer_logits = nn.Parameter(torch.zeros(n_reps))
        self.head = nn.Linear(dim, n_classes)

    def forward(self, reps: torch.Tensor) -> torch.Tensor:
        """reps (B, K, T, D) -> logits (B, C) or (B, T, C)."""
        w = torch.softmax(self.layer_logits, dim=0)
        r = torch.einsum("k,bktd->btd", w, reps)
        if self.task == "utterance":
            r = r.mean(dim=1)
        return self.head(r)


@dataclass
class ProbeResult:
    weights: LayerWeights
    probe: WeightedSumProbe
    metrics: dict
    tags: list[str]
    classes: list

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"layer_logits": self.weights.logits}
        for k, v in self.probe.head.state_dict().items():
            out[f"head.{k}"] = v.detach().numpy().astype(np.float64)
        return out

    def save(self, path: str | os.PathLike) -> None:
        meta = {"tags": self.tags, "classes": [str(c) for c in self.classes], "metrics": self.metrics}
        archive.save(path, self.arrays(), meta)


def load_probe_weights(path: str | os.PathLike) -> tuple[LayerWeights, list[str], dict]:
    arrays, meta = archive.load(path)
    return LayerWeights(arrays["layer_logits"]), meta["tags"], meta


def _split(n: int, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_test = int(round(test_fraction * n)) if n > 1 else 0
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def train_probe(task: str, stacks: list[np.ndarray], labels: list, tags: list[str],
                cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Train layer-weight logits and a linear head with cross-entropy; encoder features are fixed inputs.

    ``stacks[j]`` is the (K, T, D) stack of utterance j. ``labels[j]`` is a
    class label (utterance task) or a length-T label sequence (frame task).
    Accuracy is reported on a seeded held-out split of utterances.
    """
    if len(stacks) != len(labels):
        raise ValueError(f"{len(stacks)} utterances but {len(labels)} labels")
    if task == "frame":
        for j, (s, lab) in enumerate(zip(stacks, labels)):
            if len(lab) < s.shape[1]:
                raise ValueError(f"utterance {j}: {len(lab)} frame labels for {s.shape[1]} frames")
        flat = np.concatenate([np.asarray(l) for l in labels])
        classes = sorted(set(flat.tolist()))
    else:
        classes = sorted(set(labels))
    index = {c: i for i, c in enumerate(classes)}
    K, _, D = stacks[0].shape
    if len(tags) != K:
        raise ValueError(f"{len(tags)} tags for {K} stack entries")

    rng = np.random.default_rng(cfg.seed)
    train_idx, test_idx = _split(len(stacks), cfg.test_fraction, rng)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        probe = WeightedSumProbe(K, D, len(classes), task)
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr)

    def batch(ids):
        T = min(stacks[j].shape[1] for j in ids)
        x = torch.as_tensor(np.stack([stacks[j][:, :T] for j in ids]))
        if task == "utterance":
            y = torch.as_tensor([index[labels[j]] for j in ids])
        else:
            y = torch.as_tensor(np.stack([[index[v] for v in np.asarray(labels[j])[:T]] for j in ids]))
        return x, y

    def loss_fn(logits, y):
        return nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1))

    probe.train()
    for _ in range(cfg.steps):
        ids = rng.choice(train_idx, size=min(cfg.batch_size, len(train_idx)), replace=False)
        x, y = batch(sorted(ids))
        opt.zero_grad()
        loss_fn(probe(x), y).backward()
        opt.step()

    def accuracy(ids):
        if len(ids) == 0:
            return float("nan")
        correct = total = 0
        with torch.no_grad():
            for j in ids:
                x, y = batch([j])
                pred = probe(x).argmax(-1)
                correct += int((pred == y).sum())
                total += y.numel()
        return correct / total

    probe.eval()
    metrics = {
        "task": task,
        "accuracy": accuracy(test_idx),
        "train_accuracy": accuracy(train_idx),
        "steps": cfg.steps,
    }
    weights = LayerWeights(probe.layer_logits.detach().double().numpy())
    return ProbeResult(weights, probe, metrics, list(tags), classes)


# ---------------------------------------------------------------- reporting


def layer_weight_rows(w: LayerWeights, tags: list[str], clip: float | None = None) -> list[dict]:
    top2 = set(np.argsort(-w.weights, kind="stable")[:2].tolist())
    rows = []
    for k, (tag, weight) in enumerate(zip(tags, w.weights)):
        plot = min(weight, clip) if clip is not None else weight
        rows.append({"tag": tag, "weight": float(weight), "plot_value": float(plot), "top2": int(k in top2)})
    return rows


def export_layer_weights(w: LayerWeights, tags: list[str], path: str | os.PathLike,
                         clip: float | None = None) -> list[dict]:
    """CSV with columns tag, weight, plot_value (weight clipped at ``clip``), top2 marker."""
    if len(tags) != len(w.weights):
        raise ValueError(f"{len(tags)} tags for {len(w.weights)} weights")
    rows = layer_weight_rows(w, tags, clip)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["tag", "weight", "plot_value", "top2"], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "weight": repr(r["weight"]), "plot_value": repr(r["plot_value"])})
    archive.atomic_write_text(path, buf.getvalue())
    return rows
