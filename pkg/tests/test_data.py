"""Dataset ingestion and loading."""

import numpy as np
import pytest

from smoelab import data as data_mod
from smoelab.errors import DataError


def test_char_lm_byte_identity(tmp_path):
    src = tmp_path / "abc.txt"
    src.write_bytes(b"abc")
    m = data_mod.ingest(str(src), "char-lm", str(tmp_path / "ds"))
    tokens = np.fromfile(tmp_path / "ds" / "tokens.bin", dtype="<u4")
    assert tokens.tolist() == [97, 98, 99]
    assert m.vocab_size == 256


def test_char_lm_splits_disjoint_and_cover(tmp_path):
    src = tmp_path / "big.txt"
    src.write_bytes(bytes(range(256)) * 40)
    m = data_mod.ingest(str(src), "char-lm", str(tmp_path / "ds"))
    spans = sorted(m.splits.values())
    assert spans[0][1] == spans[1][0] and spans[1][1] == spans[2][0]
    assert spans[0][0] == 0 and spans[2][1] == 256 * 40
    train = data_mod.load_tokens(tmp_path / "ds", "train")
    valid = data_mod.load_tokens(tmp_path / "ds", "valid")
    assert train.size == m.splits["train"][1]
    assert valid.size == m.splits["valid"][1] - m.splits["valid"][0]


def test_reingest_identical(tmp_path):
    src = tmp_path / "x.txt"
    src.write_bytes(b"deterministic content" * 100)
    m1 = data_mod.ingest(str(src), "char-lm", str(tmp_path / "a"))
    m2 = data_mod.ingest(str(src), "char-lm", str(tmp_path / "b"))
    assert m1.checksums == m2.checksums
    a = (tmp_path / "a" / "tokens.bin").read_bytes()
    b = (tmp_path / "b" / "tokens.bin").read_bytes()
    assert a == b


def test_checksum_verified_on_load(tmp_path):
    src = tmp_path / "x.txt"
    src.write_bytes(b"hello world" * 50)
    data_mod.ingest(str(src), "char-lm", str(tmp_path / "ds"))
    with open(tmp_path / "ds" / "tokens.bin", "r+b") as f:
        f.seek(0)
        f.write(b"\xff")
    with pytest.raises(DataError, match="checksum"):
        data_mod.load_tokens(tmp_path / "ds", "train")


def test_empty_source_rejected(tmp_path):
    src = tmp_path / "empty.txt"
    src.write_bytes(b"")
    with pytest.raises(DataError):
        data_mod.ingest(str(src), "char-lm", str(tmp_path / "ds"))


def test_word_lm_vocabulary_and_unknowns(tmp_path):
    src = tmp_path / "w.txt"
    src.write_text("red red red blue blue green\nred blue crimson\n")
    m = data_mod.ingest(str(src), "word-lm", str(tmp_path / "ds"))
    # ids by frequency: red=1, blue=2, then lexicographic ties
    tokens = np.fromfile(tmp_path / "ds" / "tokens.bin", dtype="<u4")
    assert m.vocab_size == 5  # unk + 4 words
    assert tokens[0] == tokens[1] == tokens[2] == 1
    assert tokens[3] == tokens[4] == 2
    vocab = (tmp_path / "ds" / "vocab.txt").read_text().split()
    assert vocab[0] == "<unk>"
    assert vocab[1] == "red" and vocab[2] == "blue"


def test_classification_round_trip(tmp_path):
    src = tmp_path / "c.tsv"
    src.write_text("pos\tgood stuff\nneg\tbad stuff\n")
    m = data_mod.ingest(str(src), "classification", str(tmp_path / "ds"))
    assert m.n_labels == 2
    assert m.labels == ["neg", "pos"]
    all_records = []
    for split in ("train", "valid", "test"):
        all_records += data_mod.load_records(tmp_path / "ds", split)
    assert len(all_records) == 2
    label, ids = all_records[0]
    assert bytes(ids.astype(np.uint8)).decode() == "good stuff"
    assert m.labels[label] == "pos"


def test_classification_malformed_line_reports_number(tmp_path):
    src = tmp_path / "c.tsv"
    src.write_text("pos\tfine\nno tab here\n")
    with pytest.raises(DataError, match="line 2"):
        data_mod.ingest(str(src), "classification", str(tmp_path / "ds"))


def test_unknown_split_rejected(tmp_path):
    src = tmp_path / "x.txt"
    src.write_bytes(b"abcdef" * 10)
    data_mod.ingest(str(src), "char-lm", str(tmp_path / "ds"))
    with pytest.raises(DataError):
        data_mod.load_tokens(tmp_path / "ds", "holdout")
