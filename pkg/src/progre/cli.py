"""Command-line entry point: ``progre <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path


from progre import archive
from progre.config import RunConfig, derive_seed, format_config, load_config

log = logging.getLogger("progre")

SUBCOMMANDS = ("gen-data", "units", "pretrain", "dump-features", "finetune", "probe-weights", "extract")


def _echo_config(cfg: RunConfig, out: Path, is_dir: bool = True) -> None:
    target = out / "config.resolved" if is_dir else out.with_name(out.name + ".config")
    archive.atomic_write_text(target, format_config(cfg))


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_gen_data(args, cfg):
    from progre.corpus import CorpusSpec, gen_synthetic_corpus

    spec = CorpusSpec(n_speakers=args.n_speakers, n_utts=args.n_utts, duration_s=args.duration,
                      seed=derive_seed(cfg.seed, "data"))
    out = Path(args.out)
    manifest = gen_synthetic_corpus(spec, out)
    _echo_config(cfg, out)
    print(f"wrote {len(manifest)} utterances to {out / 'manifest.jsonl'}")


def cmd_units(args, cfg):
    from progre.checkpoint import load_model
    from progre.corpus import read_manifest
    from progre.discovery import run_iteration

    if args.iteration is not None:
        cfg.iteration = args.iteration
    if args.num_clusters is not None:
        cfg.num_clusters = args.num_clusters
    if args.subset_fraction is not None:
        cfg.subset_fraction = args.subset_fraction
    model = None
    if cfg.iteration == 2:
        model, _ = load_model(args.checkpoint)
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    path = run_iteration(cfg, manifest, out, model)
    _echo_config(cfg, out)
    print(f"wrote labels to {path}")


def cmd_pretrain(args, cfg):
    from progre.corpus import read_manifest
    from progre.teacher import make_teacher
    from progre.training import prepare_utterances, pretrain
    from progre.units import load_labels

    if args.steps is not None:
        cfg.steps = args.steps
    if args.teacher_file:
        cfg.teacher_kind, cfg.teacher_file = "file", args.teacher_file
    labels = load_labels(args.labels)
    if cfg.num_units is None:
        cfg.num_units = int(max(int(v.max()) for v in labels.values())) + 1
    manifest = read_manifest(args.manifest)
    teacher = make_teacher(cfg.teacher_kind, cfg.teacher_dim, derive_seed(cfg.seed, "teacher"),
                           cfg.teacher_file or None)
    if cfg.speaker_dim is None:
        cfg.speaker_dim = cfg.teacher_dim
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    utts = prepare_utterances(manifest, labels, teacher)
    _, history = pretrain(cfg, utts, out)
    print(f"step 0 l_c={history[0]['l_c']:.4f}  final l_c={history[-1]['l_c']:.4f}; "
          f"checkpoint {out / 'checkpoint_final.pgna'}")


def cmd_dump_features(args, cfg):
    from progre.checkpoint import load_model
    from progre.corpus import read_manifest
    from progre.discovery import dump_layer_features

    model, _ = load_model(args.checkpoint)
    k = args.layer if args.layer is not None else cfg.dump_layer(model.cfg.num_layers)
    out = Path(args.out)
    store = dump_layer_features(model, read_manifest(args.manifest), k, out)
    _echo_config(cfg, out, is_dir=False)
    print(f"wrote layer-{k} features ({len(store.features)} utterances, dim {store.dim}) to {out}")


def cmd_finetune(args, cfg):
    from progre.checkpoint import load_model
    from progre.corpus import read_manifest
    from progre.probing import ProbeConfig, extract_stack, stack_tags, train_probe
    from progre.units import load_labels

    task = args.task or cfg.probe_task
    model, _ = load_model(args.checkpoint)
    manifest = read_manifest(args.manifest)
    stacks = [extract_stack(model, manifest.load(e).samples) for e in manifest]
    if task == "utterance":
        labels = [e.probe_label if e.probe_label is not None else e.speaker_label for e in manifest]
        if any(l is None for l in labels):
            raise ValueError("utterance probe needs probe_label or speaker_label on every manifest entry")
    else:
        path = args.frame_labels or Path(args.manifest).parent / "frame_labels"
        table = load_labels(path)
        missing = [e.utterance_id for e in manifest if e.utterance_id not in table]
        if missing:
            raise KeyError(f"no frame labels for utterance {missing[0]!r}")
        labels = [table[e.utterance_id] for e in manifest]
    pcfg = ProbeConfig(cfg.probe_steps, cfg.probe_lr, cfg.probe_batch, derive_seed(cfg.seed, "probe"))
    result = train_probe(task, stacks, labels, stack_tags(model.cfg), pcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.save(out / "probe.pgna")
    archive.atomic_write_text(out / "metrics.json", json.dumps(
        {k: result.metrics[k] for k in ("task", "accuracy", "steps")}, indent=1, sort_keys=True))
    _echo_config(cfg, out)
    print(f"{task} probe accuracy {result.metrics['accuracy']:.3f}; weights "
          + " ".join(f"{t}={w:.3f}" for t, w in zip(result.tags, result.weights.weights)))


def cmd_probe_weights(args, cfg):
    from progre.probing import export_layer_weights, load_probe_weights

    weights, tags, _ = load_probe_weights(args.probe)
    out = Path(args.out)
    rows = export_layer_weights(weights, tags, out, args.clip)
    _echo_config(cfg, out, is_dir=False)
    for r in rows:
        print(f"{r['tag']:>10s} {r['weight']:.4f}{' *' if r['top2'] else ''}")


def cmd_extract(args, cfg):
    import torch

    from progre.audio import load_waveform
    from progre.checkpoint import load_model
    from progre.encoder import progre_forward
    from progre.pitch import estimate_f0, log_normalize, reconcile_length

    model, _ = load_model(args.checkpoint)
    arrays = {}
    for path in args.audio:
        wave = load_waveform(path)
        T = model.num_frames(len(wave))
        pitch = reconcile_length(log_normalize(estimate_f0(wave)), T)
        out = progre_forward(wave, pitch, model)
        uid = Path(path).stem
        named = {"x_f": out.x_f, "pitch_repr": out.pitch_repr, "branch_x": out.branch_x,
                 "speaker_repr": out.speaker_repr, "content_out": out.content_out}
        named.update({f"layer_{k}": out.layer(k) for k in range(1, model.cfg.num_layers + 1)})
        for name, t in named.items():
            arrays[f"{uid}.{name}"] = t[0].detach().numpy()
        arrays[f"{uid}.normalized_pitch"] = pitch.values
    out_path = Path(args.out)
    archive.save(out_path, arrays, {"checkpoint": str(args.checkpoint), "utterances": [Path(p).stem for p in args.audio]})
    _echo_config(cfg, out_path, is_dir=False)
    print(f"wrote {len(arrays)} arrays to {out_path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progre", description="Progressive residual extraction pre-training toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", required=True, help="output path")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a seeded synthetic corpus")
    p.add_argument("--n-speakers", type=int, default=4)
    p.add_argument("--n-utts", type=int, default=8)
    p.add_argument("--duration", type=float, default=2.0)

    p = add("units", cmd_units, "run one unit-discovery iteration")
    p.add_argument("--iteration", type=int, choices=(1, 2))
    p.add_argument("--manifest", help="audio manifest (JSON lines)")
    p.add_argument("--checkpoint", help="iteration-1 checkpoint (iteration 2 only)")
    p.add_argument("--num-clusters", type=int)
    p.add_argument("--subset-fraction", type=float)

    p = add("pretrain", cmd_pretrain, "pre-train a model on pseudo-labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True, help="label store written by 'units'")
    p.add_argument("--steps", type=int)
    p.add_argument("--teacher-file", help="external speaker embeddings (archive + .json index)")

    p = add("dump-features", cmd_dump_features, "dump one layer's features for every utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer", type=int)

    p = add("finetune", cmd_finetune, "train a weighted-sum probe on the frozen encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=("utterance", "frame"))
    p.add_argument("--frame-labels", help="frame label store (default: <manifest dir>/frame_labels)")

    p = add("probe-weights", cmd_probe_weights, "export learned layer weights as CSV")
    p.add_argument("--probe", required=True, help="probe.pgna written by 'finetune'")
    p.add_argument("--clip", type=float, help="clip plotted weights at this value (e.g. 0.45)")

    p = add("extract", cmd_extract, "write every encoder representation for the given audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", nargs="+", required=True)
    return parser


def _origin(exc: BaseException) -> str:
    module = "progre.cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("progre"):
            module = name
    return module


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "units":
        it = args.iteration
        if not args.manifest:
            parser.error("units: --manifest is required (iteration 1 clusters MFCCs of the audio manifest)")
        if it == 2 and not args.checkpoint:
            parser.error("units: --iteration 2 requires --checkpoint")
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "units" and (args.iteration or cfg.iteration) == 2 and not args.checkpoint:
            parser.error("units: iteration 2 requires --checkpoint")
        args.func(args, cfg)
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
