"""Vocabulary (one token per line) and binary embedding table files.

Embedding file layout, all little-endian:
    8 bytes   magic b"LLMEMB01"
    uint32    vocabulary size |V|
    uint32    embedding dim d
    float32   |V| * d values, row-major (row t is e(t))
"""

import struct
from pathlib import Path

import numpy as np

from validator import ValidationError, validate_file, validate_magic

MAGIC = b"LLMEMB01"
_DIMS = struct.Struct("<II")


def read_vocab(path: Path) -> list[str]:
    """Read a UTF-8 vocabulary file; line number (from 0) is the token id."""
    validate_file(path, "vocabulary")
    text = Path(path).read_text(encoding="utf-8")
    tokens = text.split("\n")
    if tokens and tokens[-1] == "":
        tokens.pop()
    return [t.rstrip("\r") for t in tokens]


def write_vocab(tokens: list[str], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for t in tokens:
        if "\n" in t:
            raise ValidationError(f"Token contains a newline: {t!r}")
    path.write_text("".join(t + "\n" for t in tokens), encoding="utf-8")
    return path


def read_embeddings(path: Path) -> np.ndarray:
    """Read the embedding table as a (|V|, d) float32 array."""
    path = Path(path)
    validate_magic(path, MAGIC)
    data = path.read_bytes()
    header_end = len(MAGIC) + _DIMS.size
    if len(data) < header_end:
        raise ValidationError(f"Truncated embedding header: {path.name}")
    rows, dim = _DIMS.unpack_from(data, len(MAGIC))
    values = np.frombuffer(data, dtype="<f4", offset=header_end)
    if values.size != rows * dim:
        raise ValidationError(
            f"Embedding dimension mismatch in {path.name}: header says {rows}x{dim} "
            f"but payload holds {values.size} values"
        )
    return values.reshape(rows, dim).astype(np.float32)


def write_embeddings(embeddings: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.ascontiguousarray(embeddings, dtype="<f4")
    if table.ndim != 2:
        raise ValidationError(f"Embedding table must be 2-D, got shape {table.shape}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_DIMS.pack(table.shape[0], table.shape[1]))
        f.write(table.tobytes())
    return path
