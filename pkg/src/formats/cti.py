"""Read and write `.cti` image sidecars with their little-endian `.bin` payloads.

Sidecar format (UTF-8, one `key=value` per line):
    id=phantom_00000007
    width=64
    height=64
    dtype=float32
    slope=1.0
    intercept=0.0
    payload=phantom_00000007.bin

Payload: width*height little-endian float32 values, row-major.
HU = stored * slope + intercept.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ctdata import CtImage
from validator import ValidationError, validate_file

REQUIRED_KEYS = ("id", "width", "height", "dtype", "slope", "intercept", "payload")


@dataclass
class CtiHeader:
    id: str
    width: int
    height: int
    dtype: str
    slope: float
    intercept: float
    payload: str


def parse_header(text: str, source: str = "") -> CtiHeader:
    """Parse the sidecar text into a CtiHeader."""
    data = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"Malformed sidecar line {lineno} in {source}: '{line}'")
        key, value = line.split("=", 1)
        data[key.strip()] = value.strip()

    missing = [k for k in REQUIRED_KEYS if k not in data]
    if missing:
        raise ValidationError(f"Sidecar {source} missing key(s): {', '.join(missing)}")
    if data["dtype"] != "float32":
        raise ValidationError(f"Unsupported dtype '{data['dtype']}' in {source} (expected float32)")
    try:
        header = CtiHeader(
            id=data["id"],
            width=int(data["width"]),
            height=int(data["height"]),
            dtype=data["dtype"],
            slope=float(data["slope"]),
            intercept=float(data["intercept"]),
            payload=data["payload"],
        )
    except ValueError as e:
        raise ValidationError(f"Bad numeric value in sidecar {source}: {e}")
    if header.width <= 0 or header.height <= 0:
        raise ValidationError(f"Non-positive size {header.width}x{header.height} in {source}")
    return header


def format_header(header: CtiHeader) -> str:
    return (
        f"id={header.id}\n"
        f"width={header.width}\n"
        f"height={header.height}\n"
        f"dtype={header.dtype}\n"
        f"slope={header.slope!r}\n"
        f"intercept={header.intercept!r}\n"
        f"payload={header.payload}\n"
    )


def write_cti(img: CtImage, path: Path) -> Path:
    """Write `<path>` (sidecar) and its `.bin` payload next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = path.with_suffix(".bin")
    header = CtiHeader(
        id=img.id,
        width=img.width,
        height=img.height,
        dtype="float32",
        slope=1.0,
        intercept=0.0,
        payload=payload.name,
    )
    payload.write_bytes(np.ascontiguousarray(img.pixels, dtype="<f4").tobytes())
    path.write_text(format_header(header), encoding="utf-8")
    return path


def read_cti(path: Path) -> CtImage:
    """Read a sidecar and its payload into a CtImage in HU."""
    path = Path(path)
    validate_file(path, "cti sidecar")
    header = parse_header(path.read_text(encoding="utf-8"), path.name)
    payload = path.parent / header.payload
    validate_file(payload, f"payload of {path.name}")

    raw = np.frombuffer(payload.read_bytes(), dtype="<f4")
    expected = header.width * header.height
    if raw.size != expected:
        raise ValidationError(
            f"Payload {payload.name} holds {raw.size} values, expected {expected}"
        )
    pixels = raw.reshape(header.height, header.width).astype(np.float32)
    if header.slope != 1.0 or header.intercept != 0.0:
        pixels = (pixels.astype(np.float64) * header.slope + header.intercept).astype(np.float32)
    return CtImage(id=header.id, pixels=pixels)
