"""Paired `.cti` dataset trees: writing, reading, manifests, and batching.

Layout: <root>/{train,test}/{ldct,ndct}/<id>.cti (+ <id>.bin), plus
<root>/manifest.txt listing every file's SHA-256 and the generation settings.
"""

import hashlib
import shutil
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from config import LowDoseConfig, PhantomConfig
from ctdata import (
    TRAINING_WINDOW,
    CtImage,
    PairedSample,
    WindowSpec,
    apply_window,
    make_pair,
    phantom_seed,
    validate_ct_image,
)
from formats.cti import read_cti, write_cti
from validator import MissingPrerequisiteError, ValidationError, check_dataset_counts, validate_image_id

SPLITS = ("train", "test")
KINDS = ("ldct", "ndct")
MANIFEST = "manifest.txt"


def _check_split(split: str, kind: str | None = None) -> None:
    if split not in SPLITS:
        raise ValidationError(f"Unknown split '{split}' (expected one of {', '.join(SPLITS)})")
    if kind is not None and kind not in KINDS:
        raise ValidationError(f"Unknown image kind '{kind}' (expected one of {', '.join(KINDS)})")


def sample_path(root: Path, split: str, kind: str, image_id: str) -> Path:
    _check_split(split, kind)
    validate_image_id(image_id, f"{split}/{kind}")
    return Path(root) / split / kind / f"{image_id}.cti"


def write_pair(root: Path, split: str, pair: PairedSample) -> list[Path]:
    return [
        write_cti(pair.ldct, sample_path(root, split, "ldct", pair.ldct.id)),
        write_cti(pair.ndct, sample_path(root, split, "ndct", pair.ndct.id)),
    ]


def read_images(root: Path, split: str, kind: str) -> list[CtImage]:
    _check_split(split, kind)
    directory = Path(root) / split / kind
    if not directory.is_dir():
        raise MissingPrerequisiteError(f"Dataset directory not found: {directory}")
    return [read_cti(p) for p in sorted(directory.glob("*.cti"))]


def read_split(root: Path, split: str) -> list[PairedSample]:
    """Paired samples sorted by id; any id present on one side only is an error."""
    ldct = {img.id: img for img in read_images(root, split, "ldct")}
    ndct = {img.id: img for img in read_images(root, split, "ndct")}
    unpaired = sorted(set(ldct) ^ set(ndct))
    if unpaired:
        raise ValidationError(f"Unpaired image id(s) in {split}: {', '.join(unpaired)}")
    if not ndct:
        raise MissingPrerequisiteError(f"No images in {Path(root) / split}")
    return [PairedSample(ldct=ldct[i], ndct=ndct[i]) for i in sorted(ndct)]


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _data_files(root: Path) -> list[Path]:
    root = Path(root)
    return sorted(p for split in SPLITS for p in (root / split).rglob("*") if p.is_file())


def write_manifest(root: Path, settings: dict[str, str]) -> Path:
    root = Path(root)
    lines = ["# paired CT dataset"]
    lines += [f"{k}={v}" for k, v in settings.items()]
    for path in _data_files(root):
        lines.append(f"{file_hash(path)}  {path.relative_to(root).as_posix()}")
    manifest = root / MANIFEST
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(root: Path) -> tuple[dict[str, str], dict[str, str]]:
    """Return (settings, {relative path: sha256})."""
    manifest = Path(root) / MANIFEST
    if not manifest.exists():
        raise MissingPrerequisiteError(f"No manifest in {root}")
    settings, hashes = {}, {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        if "  " in line:
            digest, rel = line.split("  ", 1)
            hashes[rel] = digest
        elif "=" in line:
            key, value = line.split("=", 1)
            settings[key] = value
    return settings, hashes


def verify_manifest(root: Path) -> list[str]:
    """Re-hash every listed file. Returns problem descriptions (empty when intact)."""
    root = Path(root)
    settings, hashes = read_manifest(root)
    problems = []
    for rel, digest in hashes.items():
        path = root / rel
        if not path.exists():
            problems.append(f"missing: {rel}")
        elif file_hash(path) != digest:
            problems.append(f"hash mismatch: {rel}")
    listed = set(hashes)
    for path in _data_files(root):
        rel = path.relative_to(root).as_posix()
        if rel not in listed:
            problems.append(f"unlisted: {rel}")
    for split in SPLITS:
        expected = settings.get(f"{split}_count")
        if expected is None:
            continue
        for kind in KINDS:
            found = sum(1 for rel in hashes if rel.startswith(f"{split}/{kind}/") and rel.endswith(".cti"))
            if not check_dataset_counts(found, int(expected), f"{split}/{kind}"):
                problems.append(f"count mismatch: {split}/{kind}")
    return problems


def prepare_output_dir(root: Path, force: bool = False) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise ValidationError(f"Output directory {root} is not empty (use --force to overwrite)")
        for child in root.iterdir():
            if child.is_dir():
                shutil.rmtree(child)
            else:
                child.unlink()
    root.mkdir(parents=True, exist_ok=True)
    return root


def generate_dataset(root: Path, phantom: PhantomConfig, lowdose: LowDoseConfig,
                     seed: int, force: bool = False) -> Path:
    """Write train/test phantom pairs from disjoint seed ranges, then the manifest."""
    root = prepare_output_dir(root, force)
    counts = {"train": phantom.train_count, "test": phantom.test_count}
    for split, count in counts.items():
        print(f"  {split}: generating {count} pairs")
        for i in range(count):
            spec = phantom.spec(phantom_seed(seed, split, i))
            write_pair(root, split, make_pair(spec, lowdose.photon_count, lowdose.read_noise_hu))
    settings = {
        "seed": str(seed),
        "size": str(phantom.size),
        "photon_count": repr(float(lowdose.photon_count)),
        "read_noise_hu": repr(float(lowdose.read_noise_hu)),
        "train_count": str(counts["train"]),
        "test_count": str(counts["test"]),
    }
    return write_manifest(root, settings)


def import_slices(src_dir: Path, root: Path, split: str, kind: str) -> list[Path]:
    """Convert exported HU slices (`<id>.npy`, 2-D) into `.cti` files of the tree."""
    _check_split(split, kind)
    src_dir = Path(src_dir)
    sources = sorted(src_dir.glob("*.npy"))
    if not sources:
        raise MissingPrerequisiteError(f"No .npy slices in {src_dir}")
    written = []
    for src in sources:
        img = CtImage(id=src.stem, pixels=np.load(src))
        validate_ct_image(img)
        written.append(write_cti(img, sample_path(root, split, kind, img.id)))
    print(f"  Imported {len(written)} slice(s) into {split}/{kind}")
    return written


def to_tensor(img: CtImage, window: WindowSpec = TRAINING_WINDOW) -> torch.Tensor:
    """Windowed 1 x H x W float32 tensor."""
    return torch.from_numpy(apply_window(img, window)).unsqueeze(0)


class ImageDataset(Dataset):
    """Windowed (image, index) tensors, for autoencoder training on NDCT only."""

    def __init__(self, images: list[CtImage], window: WindowSpec = TRAINING_WINDOW):
        if not images:
            raise ValidationError("Empty dataset")
        self.images = images
        self.window = window

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int):
        return to_tensor(self.images[index], self.window), index


class PairDataset(Dataset):
    """Windowed (ldct, ndct, index) tensors of a split."""

    def __init__(self, samples: list[PairedSample], window: WindowSpec = TRAINING_WINDOW):
        if not samples:
            raise ValidationError("Empty dataset")
        self.samples = samples
        self.window = window

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int):
        pair = self.samples[index]
        return to_tensor(pair.ldct, self.window), to_tensor(pair.ndct, self.window), index


def make_loader(dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True) -> DataLoader:
    """Seeded, single-process loader; full batches only when the dataset allows one."""
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=torch.Generator().manual_seed(seed),
        num_workers=0,
        drop_last=len(dataset) >= batch_size,
    )
