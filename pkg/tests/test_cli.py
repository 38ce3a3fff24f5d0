import csv
import json

import numpy as np
import pytest

from progre import archive
from progre.cli import main


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """gen-data -> units -> a very short pretrain, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text("preset = tiny\nnum_clusters = 4\nsubset_fraction = 1.0\nrestarts = 2\n"
                   "steps = 3\nbatch_size = 4\ncheckpoint_every = 2\nprobe_steps = 10\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data"),
                 "--n-speakers", "2", "--n-utts", "3", "--duration", "0.6"]) == 0
    assert main(["units", "--config", str(cfg), "--manifest", str(root / "data/manifest.jsonl"),
                 "--out", str(root / "units")]) == 0
    assert main(["pretrain", "--config", str(cfg), "--manifest", str(root / "data/manifest.jsonl"),
                 "--labels", str(root / "units/labels.pgna"), "--out", str(root / "pt")]) == 0
    return root


class TestPipeline:
    def test_outputs(self, run_dir):
        assert (run_dir / "data/config.resolved").exists()
        assert (run_dir / "units/codebook.pgna").exists()
        with open(run_dir / "pt/losses.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["step"] for r in rows] == ["0", "1", "2"]
        assert set(rows[0]) == {"step", "l_f", "l_s", "l_c", "total", "lr"}
        assert (run_dir / "pt/checkpoint_000002.pgna").exists()
        assert (run_dir / "pt/checkpoint_final.pgna").exists()
        resolved = (run_dir / "pt/config.resolved").read_text()
        assert "num_units = 4" in resolved and "steps = 3" in resolved

    def test_dump_features(self, run_dir):
        out = run_dir / "feats.pgna"
        assert main(["dump-features", "--checkpoint", str(run_dir / "pt/checkpoint_final.pgna"),
                     "--manifest", str(run_dir / "data/manifest.jsonl"), "--layer", "2",
                     "--out", str(out)]) == 0
        arrays, meta = archive.load(out)
        assert len(arrays) == 6 and meta["source"] == "layer_2"
        assert (run_dir / "feats.pgna.config").exists()

    def test_finetune_and_weights(self, run_dir, capsys):
        ck = str(run_dir / "pt/checkpoint_final.pgna")
        man = str(run_dir / "data/manifest.jsonl")
        cfg = str(run_dir / "run.cfg")
        assert main(["finetune", "--config", cfg, "--checkpoint", ck, "--manifest", man,
                     "--out", str(run_dir / "probe")]) == 0
        metrics = json.loads((run_dir / "probe/metrics.json").read_text())
        assert set(metrics) == {"task", "accuracy", "steps"} and metrics["steps"] == 10
        assert main(["finetune", "--config", cfg, "--checkpoint", ck, "--manifest", man, "--task", "frame",
                     "--out", str(run_dir / "probe_frame")]) == 0
        assert main(["probe-weights", "--probe", str(run_dir / "probe/probe.pgna"), "--clip", "0.45",
                     "--out", str(run_dir / "weights.csv")]) == 0
        with open(run_dir / "weights.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["tag"] for r in rows] == ["pitch", "speaker", "layer_2", "layer_3"]
        assert abs(sum(float(r["weight"]) for r in rows) - 1) < 1e-6
        assert sum(int(r["top2"]) for r in rows) == 2

    def test_extract(self, run_dir):
        wav = sorted((run_dir / "data/wav").glob("*.wav"))[0]
        out = run_dir / "reps.pgna"
        assert main(["extract", "--checkpoint", str(run_dir / "pt/checkpoint_final.pgna"),
                     "--audio", str(wav), "--out", str(out)]) == 0
        arrays, _ = archive.load(out)
        uid = wav.stem
        assert arrays[f"{uid}.x_f"].shape == (29, 32)
        assert arrays[f"{uid}.normalized_pitch"].shape == (29,)
        np.testing.assert_array_equal(arrays[f"{uid}.content_out"], arrays[f"{uid}.layer_3"])

    def test_iteration_two(self, run_dir):
        assert main(["units", "--iteration", "2", "--num-clusters", "3",
                     "--checkpoint", str(run_dir / "pt/checkpoint_final.pgna"),
                     "--manifest", str(run_dir / "data/manifest.jsonl"), "--out", str(run_dir / "units2")]) == 0
        assert (run_dir / "units2/features.pgna").exists()


class TestErrors:
    def test_units_without_manifest(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            main(["units", "--out", str(tmp_path)])
        assert info.value.code != 0
        assert "--manifest" in capsys.readouterr().err

    def test_unknown_flag(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            main(["gen-data", "--out", str(tmp_path), "--bogus"])
        assert info.value.code != 0
        assert "usage" in capsys.readouterr().err

    def test_module_qualified_diagnostic(self, tmp_path, capsys):
        code = main(["dump-features", "--checkpoint", str(tmp_path / "none.pgna"),
                     "--manifest", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "f")])
        assert code == 1
        assert capsys.readouterr().err.startswith("error [progre.")

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("nonsense = 1\n")
        assert main(["gen-data", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "d")]) == 1
        assert "error [progre.config]" in capsys.readouterr().err
