"""Validation functions and error types for the LEDA pipeline."""

import math
import re
from pathlib import Path

import numpy as np


class ValidationError(Exception):
    """Raised for bad inputs: files, headers, shapes, values."""
    pass


class ConfigError(ValidationError):
    """Raised for invalid configuration keys or values."""
    pass


class MissingPrerequisiteError(ValidationError):
    """Raised when an artifact a workflow depends on does not exist."""
    pass


class FrozenModelError(ValidationError):
    """Raised when a model that must stay frozen requires gradients."""
    pass


class NonFiniteLossError(Exception):
    """Raised when a loss component becomes NaN or infinite."""

    def __init__(self, component: str, value: float, checkpoint: Path | None = None):
        self.component = component
        self.value = value
        self.checkpoint = checkpoint
        msg = f"Non-finite loss component '{component}' ({value})"
        if checkpoint is not None:
            msg += f"; last-good checkpoint at {checkpoint}"
        super().__init__(msg)


def _ctx(context: str) -> str:
    return f" in {context}" if context else ""


def validate_file(path: Path, context: str = "") -> None:
    """Validate that a file exists and is non-empty."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"File not found: {path}{_ctx(context)}")
    if path.stat().st_size == 0:
        raise ValidationError(f"Empty file: {path}{_ctx(context)}")


def validate_magic(path: Path, magic: bytes) -> None:
    """Validate that a binary file starts with the expected magic bytes."""
    validate_file(path)
    with open(path, "rb") as f:
        head = f.read(len(magic))
    if head != magic:
        raise ValidationError(f"Bad magic bytes (expected {magic!r}): {Path(path).name}")


_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.\-]*$")


def validate_image_id(image_id: str, context: str = "") -> None:
    """Validate an image id usable as a file stem."""
    if not image_id:
        raise ValidationError(f"Empty image id{_ctx(context)}")
    if not _ID_RE.match(image_id):
        raise ValidationError(f"Invalid image id '{image_id}'{_ctx(context)}")


def validate_finite(values: np.ndarray, what: str, context: str = "") -> None:
    """Reject arrays containing NaN or infinity."""
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise ValidationError(f"{what} has {bad} non-finite value(s){_ctx(context)}")


def validate_shape_multiple(height: int, width: int, factor: int, context: str = "") -> None:
    """Validate that both spatial dims are positive multiples of factor."""
    if height <= 0 or width <= 0:
        raise ValidationError(f"Non-positive image size {height}x{width}{_ctx(context)}")
    if height % factor or width % factor:
        raise ValidationError(
            f"Image size {height}x{width} is not a multiple of {factor}{_ctx(context)}"
        )


def validate_threshold(rho: float, context: str = "") -> None:
    """Validate a similarity threshold in [-1, 1]."""
    if not (-1.0 <= rho <= 1.0) or math.isnan(rho):
        raise ValidationError(f"Threshold {rho} outside [-1, 1]{_ctx(context)}")


def validate_power_of_two(value: int, name: str) -> None:
    if value < 1 or value & (value - 1):
        raise ConfigError(f"{name}={value} must be a power of 2")


def validate_non_negative(value: float, name: str) -> None:
    if not value >= 0:
        raise ConfigError(f"{name}={value} must be >= 0")


def check_frozen(module, name: str = "autoencoder") -> None:
    """Raise FrozenModelError if any parameter of module requires grad."""
    live = [n for n, p in module.named_parameters() if p.requires_grad]
    if live:
        raise FrozenModelError(
            f"{name} is not frozen: {len(live)} parameter(s) require grad (e.g. '{live[0]}')"
        )


def check_loss_finite(components: dict[str, float]) -> None:
    """Raise NonFiniteLossError for the first non-finite component."""
    for name, value in components.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)


def check_dataset_counts(found: int, expected: int, what: str) -> bool:
    """Warn if a dataset count differs from what a manifest promised. Returns True if OK."""
    if found != expected:
        print(f"  Warning: {what}: expected {expected} files but found {found}")
        return False
    return True
