"""Tests for src/formats/: .cti images, embeddings, score files, pyramids, checkpoints."""

import numpy as np
import pytest

from ctdata import CtImage
from formats.checkpoint import Checkpoint, payload_hash, read_checkpoint, write_checkpoint
from formats.cti import format_header, parse_header, read_cti, write_cti
from formats.embedding import MAGIC, read_embeddings, read_vocab, write_embeddings, write_vocab
from formats.pyramid import read_pyramid, write_pyramid
from formats.scores import read_scores, write_scores
from validator import MissingPrerequisiteError, ValidationError


class TestCti:
    def test_write_read_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = CtImage(id="slice_001", pixels=rng.uniform(-1000, 2000, (5, 7)).astype(np.float32))
        path = write_cti(img, tmp_path / "slice_001.cti")
        assert (tmp_path / "slice_001.bin").stat().st_size == 5 * 7 * 4
        back = read_cti(path)
        assert back.id == "slice_001"
        np.testing.assert_array_equal(back.pixels, img.pixels)

    def test_header_format(self):
        text = "id=x\nwidth=2\nheight=3\ndtype=float32\nslope=1.0\nintercept=0.0\npayload=x.bin\n"
        header = parse_header(text, "x.cti")
        assert (header.width, header.height) == (2, 3)
        assert format_header(header) == text

    def test_missing_key(self):
        with pytest.raises(ValidationError, match="missing key"):
            parse_header("id=x\nwidth=2\n", "x.cti")

    def test_unsupported_dtype(self):
        text = "id=x\nwidth=2\nheight=3\ndtype=int16\nslope=1\nintercept=0\npayload=x.bin\n"
        with pytest.raises(ValidationError, match="Unsupported dtype"):
            parse_header(text, "x.cti")

    def test_slope_intercept_applied(self, tmp_path):
        (tmp_path / "s.bin").write_bytes(np.array([1.0, 2.0], dtype="<f4").tobytes())
        (tmp_path / "s.cti").write_text(
            "id=s\nwidth=2\nheight=1\ndtype=float32\nslope=2.0\nintercept=-1024.0\npayload=s.bin\n"
        )
        np.testing.assert_array_equal(read_cti(tmp_path / "s.cti").pixels, [[-1022.0, -1020.0]])

    def test_payload_size_mismatch(self, tmp_path):
        (tmp_path / "s.bin").write_bytes(np.zeros(3, dtype="<f4").tobytes())
        (tmp_path / "s.cti").write_text(
            "id=s\nwidth=2\nheight=2\ndtype=float32\nslope=1.0\nintercept=0.0\npayload=s.bin\n"
        )
        with pytest.raises(ValidationError, match="expected 4"):
            read_cti(tmp_path / "s.cti")


class TestEmbeddings:
    def test_vocab_line_numbers_are_ids(self, tmp_path):
        path = write_vocab(["[PAD]", "liver", "ct"], tmp_path / "vocab.txt")
        assert read_vocab(path) == ["[PAD]", "liver", "ct"]

    def test_vocab_rejects_newlines(self, tmp_path):
        with pytest.raises(ValidationError, match="newline"):
            write_vocab(["a\nb"], tmp_path / "vocab.txt")

    def test_embedding_table(self, tmp_path):
        table = np.arange(12, dtype=np.float32).reshape(4, 3)
        path = write_embeddings(table, tmp_path / "emb.bin")
        assert path.read_bytes()[:8] == MAGIC
        np.testing.assert_array_equal(read_embeddings(path), table)

    def test_dimension_mismatch(self, tmp_path):
        path = write_embeddings(np.zeros((4, 3), dtype=np.float32), tmp_path / "emb.bin")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValidationError, match="dimension mismatch"):
            read_embeddings(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"XXXXXXXX" + b"\0" * 8)
        with pytest.raises(ValidationError, match="Bad magic"):
            read_embeddings(path)


class TestScores:
    def test_dense(self, tmp_path):
        records = {"b": np.array([0.1, -0.2, 0.9]), "a": np.array([1.0, 0.0, -1.0])}
        path = write_scores(records, 3, tmp_path / "s.scores")
        assert path.read_bytes().startswith(b"SCORES dense 3 2\na\n")
        vocab, back = read_scores(path)
        assert vocab == 3
        np.testing.assert_array_equal(back["b"], np.array([0.1, -0.2, 0.9], dtype=np.float32))

    def test_sparse_fills_floor(self, tmp_path):
        records = {"a": np.array([-1.0, 0.5, -1.0, 0.7])}
        vocab, back = read_scores(write_scores(records, 4, tmp_path / "s.scores", sparse=True))
        np.testing.assert_array_equal(back["a"], np.array([-1.0, 0.5, -1.0, 0.7], dtype=np.float32))

    def test_wrong_length(self, tmp_path):
        with pytest.raises(ValidationError, match="expected 3"):
            write_scores({"a": np.zeros(2)}, 3, tmp_path / "s.scores")

    def test_truncated(self, tmp_path):
        path = write_scores({"a": np.zeros(8)}, 8, tmp_path / "s.scores")
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValidationError, match="Truncated"):
            read_scores(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "s.scores"
        path.write_bytes(b"SCORES weird 3 1\n")
        with pytest.raises(ValidationError, match="Bad score file header"):
            read_scores(path)


class TestPyramid:
    def test_header_and_grids(self, tmp_path):
        ids = [np.array([[[5]]]), np.arange(16).reshape(1, 4, 4)]
        path = write_pyramid("phantom_1", ids, tmp_path / "p.pyr")
        assert path.read_bytes().startswith(b"TOKENPYRAMID 1\nimage=phantom_1\nbatch=1\nlayers=2\n")
        pf = read_pyramid(path)
        assert pf.image_id == "phantom_1"
        assert pf.sizes == [(1, 1), (4, 4)]
        np.testing.assert_array_equal(pf.ids[1], ids[1])

    def test_two_dimensional_grid_gets_batch_axis(self, tmp_path):
        pf = read_pyramid(write_pyramid("x", [np.array([[1, 2], [3, 4]])], tmp_path / "x.pyr"))
        assert pf.ids[0].shape == (1, 2, 2)

    def test_negative_ids_rejected(self, tmp_path):
        with pytest.raises(ValidationError, match="int32 range"):
            write_pyramid("x", [np.array([[-1]])], tmp_path / "x.pyr")

    def test_trailing_bytes(self, tmp_path):
        path = write_pyramid("x", [np.array([[1]])], tmp_path / "x.pyr")
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ValidationError, match="trailing"):
            read_pyramid(path)

    def test_truncated(self, tmp_path):
        path = write_pyramid("x", [np.arange(4).reshape(2, 2)], tmp_path / "x.pyr")
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(ValidationError, match="Truncated"):
            read_pyramid(path)


class TestCheckpoint:
    def _ckpt(self):
        return Checkpoint(
            kind="denoiser", step=100, seed=3,
            tensors={"model.w": np.arange(6, dtype=np.float32).reshape(2, 3),
                     "model.n": np.array(7, dtype=np.int64)},
            meta={"mode": "full"}, config={"denoiser.lam": "0.5"},
        )

    def test_write_read(self, tmp_path):
        directory = write_checkpoint(self._ckpt(), tmp_path / "step_000100")
        manifest = (directory / "manifest.txt").read_text()
        assert manifest.startswith("CHECKPOINT 1\nkind=denoiser\nstep=100\nseed=3\n")
        assert "tensor model.w float32 2,3 0 24" in manifest
        back = read_checkpoint(directory)
        assert (back.kind, back.step, back.seed) == ("denoiser", 100, 3)
        assert back.meta == {"mode": "full"}
        assert back.config == {"denoiser.lam": "0.5"}
        np.testing.assert_array_equal(back.tensors["model.w"], self._ckpt().tensors["model.w"])
        assert back.tensors["model.n"].shape == ()
        assert back.tensors["model.n"].dtype == np.int64

    def test_rewrite_is_bit_identical(self, tmp_path):
        a = write_checkpoint(self._ckpt(), tmp_path / "a")
        b = write_checkpoint(self._ckpt(), tmp_path / "b")
        assert payload_hash(a) == payload_hash(b)
        assert (a / "manifest.txt").read_bytes() == (b / "manifest.txt").read_bytes()

    def test_overwrite_leaves_no_tmp(self, tmp_path):
        write_checkpoint(self._ckpt(), tmp_path / "c")
        write_checkpoint(self._ckpt(), tmp_path / "c")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["c"]

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(MissingPrerequisiteError):
            read_checkpoint(tmp_path / "empty")

    def test_no_end_line(self, tmp_path):
        directory = write_checkpoint(self._ckpt(), tmp_path / "c")
        manifest = directory / "manifest.txt"
        manifest.write_text(manifest.read_text().replace("end\n", ""))
        with pytest.raises(ValidationError, match="no 'end' line"):
            read_checkpoint(directory)

    def test_unsupported_dtype(self, tmp_path):
        ckpt = self._ckpt()
        ckpt.tensors["flag"] = np.array([True])
        with pytest.raises(ValidationError, match="Unsupported tensor dtype"):
            write_checkpoint(ckpt, tmp_path / "c")
