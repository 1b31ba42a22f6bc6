"""Token reports: decode quantized pyramids back into codebook token strings."""

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import torch

from codebook import LlmCodebook, TokenPyramid, quantize_pyramid
from ctdata import TRAINING_WINDOW, CtImage, WindowSpec
from formats.pyramid import PyramidFile, read_pyramid, write_pyramid
from loader import to_tensor
from validator import ValidationError

DEFAULT_LAYERS = (1, 2)


@dataclass(frozen=True)
class TokenEntry:
    row: int
    col: int
    token_id: int
    token: str


@dataclass
class LayerTokens:
    layer: int
    size: tuple[int, int]
    entries: list[TokenEntry]
    frequencies: dict[int, int]


@dataclass
class TokenReport:
    """Per-layer (position, id, string) lists for one image."""
    image_id: str
    depth: int
    layers: list[LayerTokens] = field(default_factory=list)

    @property
    def shown(self) -> list[int]:
        return [lt.layer for lt in self.layers]

    def coverage(self) -> str:
        shown = ",".join(str(l) for l in self.shown)
        return f"layers {shown} of {self.depth}"

    def text(self, cb: LlmCodebook) -> str:
        lines = [f"# tokens for {self.image_id} ({self.coverage()})"]
        for lt in self.layers:
            h, w = lt.size
            lines.append(f"[layer {lt.layer}] {h}x{w}")
            for e in lt.entries:
                lines.append(f"  ({e.row},{e.col}) {e.token_id} {e.token}")
            freq = ", ".join(f"{cb.token(i)} x{n}" for i, n in lt.frequencies.items())
            lines.append(f"  frequencies: {freq}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        layers = []
        for lt in self.layers:
            h, w = lt.size
            ids = [[0] * w for _ in range(h)]
            tokens = [[""] * w for _ in range(h)]
            for e in lt.entries:
                ids[e.row][e.col] = e.token_id
                tokens[e.row][e.col] = e.token
            layers.append({
                "layer": lt.layer,
                "size": [h, w],
                "ids": ids,
                "tokens": tokens,
                "frequencies": {str(i): n for i, n in lt.frequencies.items()},
            })
        return {"image": self.image_id, "depth": self.depth, "layers": layers}


def tokens_for_image(img: CtImage, ae, cb: LlmCodebook,
                     window: WindowSpec = TRAINING_WINDOW) -> TokenPyramid:
    """Encode one image and quantize its latent into a batch-1 token pyramid."""
    x = to_tensor(img, window).unsqueeze(0)
    with torch.no_grad():
        z = ae.encode(x)
        return quantize_pyramid(z, cb, ae.sizes_for(z.shape[-2:]))


def _layer_grid(pyramid: TokenPyramid, layer: int, batch_index: int = 0) -> list[list[int]]:
    if not 1 <= layer <= pyramid.depth:
        raise ValidationError(f"Layer {layer} out of range: pyramid has {pyramid.depth} layer(s)")
    if not 0 <= batch_index < pyramid.batch:
        raise ValidationError(f"Batch index {batch_index} out of range for batch {pyramid.batch}")
    return pyramid.ids[layer - 1][batch_index].tolist()


def token_frequencies(pyramid: TokenPyramid, layer: int, batch_index: int = 0) -> dict[int, int]:
    """id -> count in one layer, most frequent first (ties by id)."""
    counts = Counter(i for row in _layer_grid(pyramid, layer, batch_index) for i in row)
    return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


def resolve_layers(depth: int, layers=None, all_layers: bool = False) -> list[int]:
    if all_layers:
        return list(range(1, depth + 1))
    if layers is None:
        return [l for l in DEFAULT_LAYERS if l <= depth]
    chosen = sorted(set(int(l) for l in layers))
    for l in chosen:
        if not 1 <= l <= depth:
            raise ValidationError(f"Layer {l} out of range: pyramid has {depth} layer(s)")
    return chosen


def render_report(pyramid: TokenPyramid, cb: LlmCodebook, layers=None, image_id: str = "image",
                  all_layers: bool = False, batch_index: int = 0) -> TokenReport:
    """Token report for the requested layers (default: layers 1-2)."""
    report = TokenReport(image_id=image_id, depth=pyramid.depth)
    for layer in resolve_layers(pyramid.depth, layers, all_layers):
        grid = _layer_grid(pyramid, layer, batch_index)
        entries = [
            TokenEntry(row=r, col=c, token_id=i, token=cb.token(i))
            for r, row in enumerate(grid) for c, i in enumerate(row)
        ]
        report.layers.append(LayerTokens(
            layer=layer,
            size=(len(grid), len(grid[0])),
            entries=entries,
            frequencies=token_frequencies(pyramid, layer, batch_index),
        ))
    return report


def pyramid_from_file(pf: PyramidFile, cb: LlmCodebook) -> TokenPyramid:
    return TokenPyramid.from_ids([torch.from_numpy(g.astype("int64")) for g in pf.ids], cb)


def load_pyramid(path: Path, cb: LlmCodebook) -> tuple[str, TokenPyramid]:
    """Read a .pyr file; it must have been written against `cb`."""
    pf = read_pyramid(path)
    if pf.codebook != cb.fingerprint():
        recorded = f"codebook {pf.codebook[:12]}" if pf.codebook else "no codebook fingerprint"
        raise ValidationError(
            f"Pyramid {Path(path).name} was quantized with {recorded}, "
            f"but the loaded codebook is {cb.fingerprint()[:12]}"
        )
    return pf.image_id, pyramid_from_file(pf, cb)


def write_report(report: TokenReport, cb: LlmCodebook, out_dir: Path,
                 pyramid: TokenPyramid | None = None) -> list[Path]:
    """<id>.tokens.txt and <id>.tokens.json, plus <id>.pyr when the pyramid is given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"{report.image_id}.tokens.txt"
    txt.write_text(report.text(cb), encoding="utf-8")
    sidecar = out_dir / f"{report.image_id}.tokens.json"
    sidecar.write_text(json.dumps(report.as_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    written = [txt, sidecar]
    if pyramid is not None:
        written.append(write_pyramid(report.image_id, pyramid.ids, out_dir / f"{report.image_id}.pyr",
                                     codebook=cb.fingerprint()))
    return written
