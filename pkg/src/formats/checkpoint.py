"""Named-tensor checkpoint directories.

    <dir>/manifest.txt   text manifest
    <dir>/tensors.bin    little-endian tensor payloads, concatenated

Manifest:
    CHECKPOINT 1
    kind=autoencoder
    step=300
    seed=0
    meta.codebook=<sha256>
    config.autoencoder.alpha=0.3
    tensor encoder.conv_in.weight float32 64,1,3,3 0 2304
    end
"""

import hashlib
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from validator import MissingPrerequisiteError, ValidationError, validate_file

MAGIC_LINE = "CHECKPOINT 1"
MANIFEST = "manifest.txt"
PAYLOAD = "tensors.bin"
DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
}
_KINDS = {("f", 4): "float32", ("f", 8): "float64", ("i", 8): "int64", ("i", 4): "int32"}


@dataclass
class Checkpoint:
    kind: str
    step: int
    seed: int
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    config: dict[str, str] = field(default_factory=dict)


def _dtype_name(arr: np.ndarray) -> str:
    name = _KINDS.get((arr.dtype.kind, arr.dtype.itemsize))
    if name is None:
        raise ValidationError(f"Unsupported tensor dtype {arr.dtype}")
    return name


def write_checkpoint(ckpt: Checkpoint, directory: Path) -> Path:
    """Write the checkpoint, replacing `directory` only once both files are complete."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)

    lines = [MAGIC_LINE, f"kind={ckpt.kind}", f"step={ckpt.step}", f"seed={ckpt.seed}"]
    lines += [f"meta.{k}={v}" for k, v in sorted(ckpt.meta.items())]
    lines += [f"config.{k}={v}" for k, v in sorted(ckpt.config.items())]

    offset = 0
    with open(tmp / PAYLOAD, "wb") as f:
        for name, value in ckpt.tensors.items():
            if " " in name:
                raise ValidationError(f"Tensor name contains a space: '{name}'")
            arr = np.asarray(value)
            dtype = _dtype_name(arr)
            raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"tensor {name} {dtype} {shape} {offset} {len(raw)}")
            f.write(raw)
            offset += len(raw)
    lines.append("end")
    (tmp / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")

    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    return directory


def read_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        raise MissingPrerequisiteError(f"No checkpoint manifest in {directory}")
    validate_file(directory / PAYLOAD, f"checkpoint {directory.name}")
    lines = (directory / MANIFEST).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MAGIC_LINE:
        raise ValidationError(f"Bad checkpoint manifest in {directory}")
    payload = (directory / PAYLOAD).read_bytes()

    header, meta, config, tensors = {}, {}, {}, {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "end":
            break
        if line.startswith("tensor "):
            parts = line.split(" ")
            if len(parts) != 6 or parts[2] not in DTYPES:
                raise ValidationError(f"Malformed tensor line {lineno} in {directory.name}: '{line}'")
            _, name, dtype, shape, offset, nbytes = parts
            offset, nbytes = int(offset), int(nbytes)
            if offset + nbytes > len(payload):
                raise ValidationError(f"Tensor '{name}' runs past the payload in {directory.name}")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            count = nbytes // np.dtype(DTYPES[dtype]).itemsize
            arr = np.frombuffer(payload, dtype=DTYPES[dtype], count=count, offset=offset)
            tensors[name] = arr.reshape(dims).astype(dtype)
        elif "=" in line:
            key, value = line.split("=", 1)
            if key.startswith("meta."):
                meta[key[5:]] = value
            elif key.startswith("config."):
                config[key[7:]] = value
            else:
                header[key] = value
        else:
            raise ValidationError(f"Malformed manifest line {lineno} in {directory.name}: '{line}'")
    else:
        raise ValidationError(f"Checkpoint manifest in {directory.name} has no 'end' line")

    missing = [k for k in ("kind", "step", "seed") if k not in header]
    if missing:
        raise ValidationError(f"Checkpoint {directory.name} missing key(s): {', '.join(missing)}")
    return Checkpoint(
        kind=header["kind"], step=int(header["step"]), seed=int(header["seed"]),
        tensors=tensors, meta=meta, config=config,
    )


def payload_hash(directory: Path) -> str:
    """SHA-256 of the tensor payload; equal hashes mean bit-identical weights."""
    return hashlib.sha256((Path(directory) / PAYLOAD).read_bytes()).hexdigest()
