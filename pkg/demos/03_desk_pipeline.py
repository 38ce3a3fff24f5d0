"""
Desk-scale pre-training and layer-weight probing
================================================

The full loop on a synthetic corpus: data, units, a short pre-training run,
then a speaker probe over the representation stack.
Takes about a minute on one CPU.
"""

import sys
import tempfile
from pathlib import Path

from progre.cli import main as cli

config = str(Path(__file__).resolve().parents[1] / "configs" / "tiny.cfg")
steps = sys.argv[1] if len(sys.argv) > 1 else "200"

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    manifest = str(root / "data" / "manifest.jsonl")
    cli(["gen-data", "--config", config, "--out", str(root / "data")])
    cli(["units", "--config", config, "--iteration", "1", "--manifest", manifest, "--out", str(root / "units")])
    cli(["pretrain", "--config", config, "--steps", steps, "--manifest", manifest,
         "--labels", str(root / "units" / "labels.pgna"), "--out", str(root / "run")])

    lines = (root / "run" / "losses.csv").read_text().splitlines()
    print("\n".join(["loss log (header, first step, last step):", lines[0], lines[1], lines[-1]]))

    # Frozen encoder, trainable softmax layer weights and a linear head.
    cli(["finetune", "--config", config, "--task", "utterance", "--checkpoint",
         str(root / "run" / "checkpoint_final.pgna"), "--manifest", manifest, "--out", str(root / "probe")])
    cli(["probe-weights", "--probe", str(root / "probe" / "probe.pgna"), "--out", str(root / "weights.csv")])
