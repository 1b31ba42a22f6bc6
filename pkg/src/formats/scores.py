"""Per-image similarity score files.

Layout: one ASCII header line, then one record per image.

    SCORES dense <|V|> <count>\n
    <image id>\n  followed by |V| little-endian float32 scores

    SCORES sparse <|V|> <count>\n
    <image id>\n  followed by uint32 k, then k pairs of (uint32 token id, float32 score)

Tokens missing from a sparse record score -1.
"""

import struct
from pathlib import Path

import numpy as np

from validator import ValidationError, validate_file, validate_image_id

_U32 = struct.Struct("<I")
_PAIR = np.dtype([("id", "<u4"), ("score", "<f4")])
SPARSE_DEFAULT = -1.0


def _read_line(data: bytes, pos: int, source: str) -> tuple[str, int]:
    end = data.find(b"\n", pos)
    if end < 0:
        raise ValidationError(f"Truncated score file {source} at byte {pos}")
    return data[pos:end].decode("utf-8"), end + 1


def read_scores(path: Path) -> tuple[int, dict[str, np.ndarray]]:
    """Return (|V|, {image id: float32 scores of length |V|})."""
    path = Path(path)
    validate_file(path, "score file")
    data = path.read_bytes()
    line, pos = _read_line(data, 0, path.name)
    parts = line.split()
    if len(parts) != 4 or parts[0] != "SCORES" or parts[1] not in ("dense", "sparse"):
        raise ValidationError(f"Bad score file header in {path.name}: '{line}'")
    try:
        vocab_size, count = int(parts[2]), int(parts[3])
    except ValueError:
        raise ValidationError(f"Bad score file header in {path.name}: '{line}'")
    sparse = parts[1] == "sparse"

    records = {}
    for _ in range(count):
        image_id, pos = _read_line(data, pos, path.name)
        if sparse:
            if pos + _U32.size > len(data):
                raise ValidationError(f"Truncated sparse record '{image_id}' in {path.name}")
            (k,) = _U32.unpack_from(data, pos)
            pos += _U32.size
            nbytes = k * _PAIR.itemsize
            if pos + nbytes > len(data):
                raise ValidationError(f"Truncated sparse record '{image_id}' in {path.name}")
            pairs = np.frombuffer(data, dtype=_PAIR, count=k, offset=pos)
            pos += nbytes
            if k and int(pairs["id"].max()) >= vocab_size:
                raise ValidationError(f"Token id out of range in record '{image_id}' of {path.name}")
            scores = np.full(vocab_size, SPARSE_DEFAULT, dtype=np.float32)
            scores[pairs["id"].astype(np.int64)] = pairs["score"]
        else:
            nbytes = vocab_size * 4
            if pos + nbytes > len(data):
                raise ValidationError(f"Truncated dense record '{image_id}' in {path.name}")
            scores = np.frombuffer(data, dtype="<f4", count=vocab_size, offset=pos).astype(np.float32)
            pos += nbytes
        if image_id in records:
            raise ValidationError(f"Duplicate image id '{image_id}' in {path.name}")
        records[image_id] = scores

    if pos != len(data):
        print(f"  Warning: {len(data) - pos} trailing byte(s) in {path.name}")
    return vocab_size, records


def write_scores(records: dict[str, np.ndarray], vocab_size: int, path: Path,
                 sparse: bool = False, sparse_floor: float = SPARSE_DEFAULT) -> Path:
    """Write records in id order; sparse mode keeps scores above sparse_floor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "sparse" if sparse else "dense"
    chunks = [f"SCORES {kind} {vocab_size} {len(records)}\n".encode("ascii")]
    for image_id in sorted(records):
        validate_image_id(image_id, "score record")
        scores = np.asarray(records[image_id], dtype="<f4")
        if scores.shape != (vocab_size,):
            raise ValidationError(
                f"Record '{image_id}' has {scores.size} scores, expected {vocab_size}"
            )
        chunks.append(image_id.encode("utf-8") + b"\n")
        if sparse:
            keep = np.nonzero(scores > sparse_floor)[0]
            pairs = np.empty(keep.size, dtype=_PAIR)
            pairs["id"] = keep
            pairs["score"] = scores[keep]
            chunks.append(_U32.pack(keep.size))
            chunks.append(pairs.tobytes())
        else:
            chunks.append(scores.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path
