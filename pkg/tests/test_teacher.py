import numpy as np
import pytest

from progre.teacher import FileTeacher, SyntheticTeacher, make_teacher, write_embeddings


class TestSynthetic:
    def test_same_label_same_vector(self):
        t = SyntheticTeacher(192, seed=3)
        a = t.speaker_target("u1", "spk00")
        b = t.speaker_target("u2", "spk00")
        np.testing.assert_array_equal(a, b)
        assert a.shape == (192,)

    def test_unit_norm(self):
        t = SyntheticTeacher(192)
        for i in range(20):
            assert abs(np.linalg.norm(t.speaker_target("u", f"s{i}")) - 1) < 1e-6

    def test_distinct_speakers_near_orthogonal(self):
        t = SyntheticTeacher(192)
        v = np.stack([t.speaker_target("u", f"speaker{i}") for i in range(100)])
        cos = v @ v.T
        np.fill_diagonal(cos, 0)
        assert np.abs(cos).max() < 0.5

    def test_seed_changes_vectors(self):
        a = SyntheticTeacher(8, seed=0).speaker_target("u", "s")
        b = SyntheticTeacher(8, seed=1).speaker_target("u", "s")
        assert not np.allclose(a, b)

    def test_missing_label(self):
        with pytest.raises(KeyError):
            SyntheticTeacher().speaker_target("u")


class TestFile:
    def test_renormalized(self, tmp_path):
        write_embeddings(tmp_path / "emb.pgna", {"u1": np.full(4, 2.0), "u2": np.array([3.0, 0, 0, 0])})
        t = make_teacher("external-file", 4, path=tmp_path / "emb.pgna")
        np.testing.assert_allclose(t.speaker_target("u1"), np.full(4, 0.5))
        np.testing.assert_allclose(t.speaker_target("u2"), [1.0, 0, 0, 0])

    def test_missing_entry(self, tmp_path):
        write_embeddings(tmp_path / "emb.pgna", {"u1": np.ones(4)})
        with pytest.raises(KeyError):
            FileTeacher(tmp_path / "emb.pgna", 4).speaker_target("u9")

    def test_wrong_dim(self, tmp_path):
        write_embeddings(tmp_path / "emb.pgna", {"u1": np.ones(3)})
        with pytest.raises(ValueError, match="dim"):
            FileTeacher(tmp_path / "emb.pgna", 4)


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_teacher("dino")
