"""Dataset ingestion and loading.

Three dataset kinds share one on-disk layout (a directory with a manifest
plus binary token files, all little-endian u32 ids):

* char-lm: raw bytes mapped to ids 0..255, one contiguous stream split
  90/5/5 into train/valid/test by offset.
* word-lm: whitespace tokens, frequency-capped vocabulary (50,000 plus an
  unknown id 0), same contiguous split.
* classification: one `label<TAB>text` record per line; text is byte
  tokenized so models pretrained on byte streams transfer. Records split
  80/10/10.

The manifest records source and token-file checksums; loads verify the
token file hash.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

KINDS = ("char-lm", "word-lm", "classification")
WORD_VOCAB_CAP = 50_000
UNK_ID = 0
LM_SPLITS = (0.90, 0.05, 0.05)
CLS_SPLITS = (0.80, 0.10, 0.10)


@dataclass
class DatasetManifest:
    kind: str
    vocab_size: int
    splits: dict[str, tuple[int, int]]  # split name -> (start, end) in records/tokens
    checksums: dict[str, str]
    n_labels: int = 0
    labels: list[str] = field(default_factory=list)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _split_offsets(n, fractions):
    a = int(n * fractions[0])
    b = a + int(n * fractions[1])
    return {"train": (0, a), "valid": (a, b), "test": (b, n)}


def _write_manifest(out_dir, m: DatasetManifest):
    lines = [f"kind = {m.kind}", f"vocab_size = {m.vocab_size}", f"n_labels = {m.n_labels}"]
    for name, (lo, hi) in sorted(m.splits.items()):
        lines.append(f"split.{name} = {lo}:{hi}")
    for name, digest in sorted(m.checksums.items()):
        lines.append(f"checksum.{name} = {digest}")
    for i, label in enumerate(m.labels):
        lines.append(f"label.{i} = {label}")
    _atomic_write(os.path.join(out_dir, "manifest.txt"), ("\n".join(lines) + "\n").encode())


def load_manifest(dataset_dir) -> DatasetManifest:
    path = os.path.join(dataset_dir, "manifest.txt")
    if not os.path.exists(path):
        raise DataError(f"no manifest at {path}")
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                key, _, value = line.partition(" = ")
                kv[key] = value
    splits = {}
    checksums = {}
    labels = {}
    for key, value in kv.items():
        if key.startswith("split."):
            lo, _, hi = value.partition(":")
            splits[key[6:]] = (int(lo), int(hi))
        elif key.startswith("checksum."):
            checksums[key[9:]] = value
        elif key.startswith("label."):
            labels[int(key[6:])] = value
    return DatasetManifest(
        kind=kv["kind"],
        vocab_size=int(kv["vocab_size"]),
        splits=splits,
        checksums=checksums,
        n_labels=int(kv.get("n_labels", 0)),
        labels=[labels[i] for i in sorted(labels)],
    )


def ingest(source_path, kind: str, out_dir) -> DatasetManifest:
    """Tokenize a source file into out_dir and write its manifest."""
    if kind not in KINDS:
        raise ContractError(f"unknown dataset kind {kind!r}, expected one of {KINDS}")
    if not os.path.exists(source_path):
        raise DataError(f"source file not found: {source_path}")
    os.makedirs(out_dir, exist_ok=True)
    source_sum = _sha256(source_path)
    if kind == "classification":
        manifest = _ingest_classification(source_path, out_dir)
    elif kind == "char-lm":
        manifest = _ingest_char(source_path, out_dir)
    else:
        manifest = _ingest_word(source_path, out_dir)
    manifest.checksums["source"] = source_sum
    _write_manifest(out_dir, manifest)
    return manifest


def _ingest_char(source_path, out_dir) -> DatasetManifest:
    raw = np.fromfile(source_path, dtype=np.uint8)
    if raw.size == 0:
        raise DataError(f"empty source: {source_path}")
    tokens = raw.astype("<u4")
    token_path = os.path.join(out_dir, "tokens.bin")
    _atomic_write(token_path, tokens.tobytes())
    return DatasetManifest(
        kind="char-lm",
        vocab_size=256,
        splits=_split_offsets(tokens.size, LM_SPLITS),
        checksums={"tokens": _sha256(token_path)},
    )


def _ingest_word(source_path, out_dir) -> DatasetManifest:
    with open(source_path, encoding="utf-8") as f:
        words = f.read().split()
    if not words:
        raise DataError(f"empty source: {source_path}")
    counts = Counter(words)
    # most frequent first; ties resolved lexicographically for determinism
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: WORD_VOCAB_CAP - 1]
    vocab = {w: i + 1 for i, (w, _) in enumerate(ranked)}
    tokens = np.array([vocab.get(w, UNK_ID) for w in words], dtype="<u4")
    token_path = os.path.join(out_dir, "tokens.bin")
    _atomic_write(token_path, tokens.tobytes())
    vocab_lines = ["<unk>"] + [w for w, _ in ranked]
    _atomic_write(os.path.join(out_dir, "vocab.txt"), ("\n".join(vocab_lines) + "\n").encode())
    return DatasetManifest(
        kind="word-lm",
        vocab_size=len(vocab_lines),
        splits=_split_offsets(tokens.size, LM_SPLITS),
        checksums={"tokens": _sha256(token_path)},
    )


def _ingest_classification(source_path, out_dir) -> DatasetManifest:
    records = []
    labels = set()
    with open(source_path, encoding="utf-8") as f:
        any_line = False
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            any_line = True
            label, sep, text = line.partition("\t")
            if not sep or not label:
                raise DataError(f"line {lineno}: expected label<TAB>text")
            labels.add(label)
            records.append((label, text))
    if not any_line:
        raise DataError(f"empty source: {source_path}")
    label_table = sorted(labels)
    label_id = {lab: i for i, lab in enumerate(label_table)}
    chunks = []
    for label, text in records:
        ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype("<u4")
        chunks.append(np.concatenate([np.array([label_id[label], ids.size], dtype="<u4"), ids]))
    blob = np.concatenate(chunks) if chunks else np.array([], dtype="<u4")
    token_path = os.path.join(out_dir, "records.bin")
    _atomic_write(token_path, blob.tobytes())
    return DatasetManifest(
        kind="classification",
        vocab_size=256,
        splits=_split_offsets(len(records), CLS_SPLITS),
        checksums={"tokens": _sha256(token_path)},
        n_labels=len(label_table),
        labels=label_table,
    )


def _verify(dataset_dir, manifest: DatasetManifest, token_file):
    path = os.path.join(dataset_dir, token_file)
    if not os.path.exists(path):
        raise DataError(f"missing token file {path}")
    if _sha256(path) != manifest.checksums.get("tokens"):
        raise DataError(f"checksum mismatch for {path}")
    return path


def load_tokens(dataset_dir, split: str) -> np.ndarray:
    """Token id stream for one split of a char-lm or word-lm dataset."""
    manifest = load_manifest(dataset_dir)
    if manifest.kind == "classification":
        raise DataError("load_tokens is for language-model datasets")
    if split not in manifest.splits:
        raise DataError(f"unknown split {split!r}")
    path = _verify(dataset_dir, manifest, "tokens.bin")
    lo, hi = manifest.splits[split]
    tokens = np.fromfile(path, dtype="<u4")
    return tokens[lo:hi].astype(np.int64)


def load_records(dataset_dir, split: str) -> list[tuple[int, np.ndarray]]:
    """(label, token ids) records for one split of a classification dataset."""
    manifest = load_manifest(dataset_dir)
    if manifest.kind != "classification":
        raise DataError("load_records is for classification datasets")
    path = _verify(dataset_dir, manifest, "records.bin")
    blob = np.fromfile(path, dtype="<u4")
    records = []
    off = 0
    while off < blob.size:
        label = int(blob[off])
        length = int(blob[off + 1])
        records.append((label, blob[off + 2 : off + 2 + length].astype(np.int64)))
        off += 2 + length
    lo, hi = manifest.splits[split]
    return records[lo:hi]
