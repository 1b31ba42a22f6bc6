"""Token pyramid files: text header, then int32 id grids.

    TOKENPYRAMID 1
    image=phantom_00000007
    codebook=<sha256 of the codebook, optional>
    batch=1
    layers=2
    layer1=1x1
    layer2=4x4
    end
    <batch*h1*w1 little-endian int32> <batch*h2*w2 little-endian int32> ...
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from validator import ValidationError, validate_file

MAGIC_LINE = "TOKENPYRAMID 1"
END_LINE = "end"


@dataclass
class PyramidFile:
    image_id: str
    ids: list[np.ndarray]
    codebook: str = ""

    @property
    def sizes(self) -> list[tuple[int, int]]:
        return [(int(g.shape[-2]), int(g.shape[-1])) for g in self.ids]


def write_pyramid(image_id: str, ids, path: Path, codebook: str = "") -> Path:
    """Write per-layer (B, h, w) id grids; tensors are accepted and copied to numpy.

    `codebook` is the fingerprint of the table the ids index into.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grids = [np.asarray(g.cpu() if hasattr(g, "cpu") else g) for g in ids]
    if not grids:
        raise ValidationError(f"Pyramid for '{image_id}' has no layers")
    grids = [g[None] if g.ndim == 2 else g for g in grids]
    batch = grids[0].shape[0]
    lines = [MAGIC_LINE, f"image={image_id}"]
    if codebook:
        lines.append(f"codebook={codebook}")
    lines += [f"batch={batch}", f"layers={len(grids)}"]
    for l, g in enumerate(grids, start=1):
        if g.ndim != 3 or g.shape[0] != batch:
            raise ValidationError(f"Layer {l} of '{image_id}' has shape {g.shape}, expected ({batch}, h, w)")
        if g.min() < 0 or g.max() > np.iinfo(np.int32).max:
            raise ValidationError(f"Layer {l} of '{image_id}' has ids outside the int32 range")
        lines.append(f"layer{l}={g.shape[1]}x{g.shape[2]}")
    lines.append(END_LINE)
    payload = b"".join(np.ascontiguousarray(g, dtype="<i4").tobytes() for g in grids)
    path.write_bytes(("\n".join(lines) + "\n").encode("ascii") + payload)
    return path


def _header_value(fields: dict, key: str, source: str) -> str:
    if key not in fields:
        raise ValidationError(f"Pyramid file {source} missing '{key}'")
    return fields[key]


def read_pyramid(path: Path) -> PyramidFile:
    path = Path(path)
    validate_file(path, "token pyramid")
    data = path.read_bytes()
    marker = f"\n{END_LINE}\n".encode("ascii")
    cut = data.find(marker)
    if cut < 0:
        raise ValidationError(f"Pyramid file {path.name} has no header terminator")
    header = data[:cut].decode("ascii").split("\n")
    if header[0] != MAGIC_LINE:
        raise ValidationError(f"Bad pyramid magic in {path.name}: '{header[0]}'")
    fields = dict(line.split("=", 1) for line in header[1:] if "=" in line)

    try:
        batch = int(_header_value(fields, "batch", path.name))
        depth = int(_header_value(fields, "layers", path.name))
        sizes = []
        for l in range(1, depth + 1):
            h, w = _header_value(fields, f"layer{l}", path.name).split("x")
            sizes.append((int(h), int(w)))
    except ValueError as e:
        raise ValidationError(f"Bad pyramid header in {path.name}: {e}")

    pos = cut + len(marker)
    ids = []
    for h, w in sizes:
        count = batch * h * w
        if pos + 4 * count > len(data):
            raise ValidationError(f"Truncated pyramid payload in {path.name}")
        grid = np.frombuffer(data, dtype="<i4", count=count, offset=pos).reshape(batch, h, w)
        ids.append(grid.astype(np.int64))
        pos += 4 * count
    if pos != len(data):
        raise ValidationError(f"{len(data) - pos} trailing byte(s) in pyramid file {path.name}")
    return PyramidFile(image_id=_header_value(fields, "image", path.name), ids=ids,
                       codebook=fields.get("codebook", ""))
