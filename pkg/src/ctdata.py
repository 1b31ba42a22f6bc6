"""CT images, HU windowing, synthetic phantoms, and low-dose noise simulation."""

from dataclasses import dataclass

import numpy as np

from validator import ValidationError, validate_finite, validate_image_id

HU_MIN = -1024.0
HU_MAX = 4000.0
DOSE_TAGS = ("ldct", "ndct")
INVERT_TOLERANCE = 1e-6


@dataclass
class CtImage:
    """Single-channel grid of HU values (row-major, height x width)."""
    id: str
    pixels: np.ndarray

    def __post_init__(self):
        validate_image_id(self.id, "CtImage")
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValidationError(
                f"CtImage '{self.id}' must be 2-D, got shape {self.pixels.shape}"
            )

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def stem(self) -> str:
        head, _, tag = self.id.rpartition(".")
        return head if head and tag in DOSE_TAGS else self.id


def validate_ct_image(img: CtImage) -> None:
    """Check the HU invariants of a stored image."""
    validate_finite(img.pixels, "pixels", f"image '{img.id}'")
    lo, hi = float(img.pixels.min()), float(img.pixels.max())
    if lo < HU_MIN or hi > HU_MAX:
        raise ValidationError(
            f"Image '{img.id}' has HU range [{lo}, {hi}] outside [{HU_MIN}, {HU_MAX}]"
        )


@dataclass(frozen=True)
class WindowSpec:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError(f"Window lower bound {self.lo} must be < upper bound {self.hi}")

    @property
    def width(self) -> float:
        return self.hi - self.lo


TRAINING_WINDOW = WindowSpec(-1000.0, 2000.0)
METRIC_WINDOW = WindowSpec(-160.0, 240.0)


@dataclass
class PairedSample:
    ldct: CtImage
    ndct: CtImage

    def __post_init__(self):
        if self.ldct.shape != self.ndct.shape:
            raise ValidationError(
                f"Shape mismatch in pair: {self.ldct.id} {self.ldct.shape} "
                f"vs {self.ndct.id} {self.ndct.shape}"
            )
        if self.ldct.stem != self.ndct.stem:
            raise ValidationError(
                f"Pair ids do not share a stem: '{self.ldct.id}' vs '{self.ndct.id}'"
            )

    @property
    def stem(self) -> str:
        return self.ndct.stem


@dataclass
class PhantomSpec:
    """Ellipse phantom recipe. The first ellipse is the body outline."""
    size: int = 64
    min_ellipses: int = 3
    max_ellipses: int = 8
    hu_lo: float = -100.0
    hu_hi: float = 300.0
    background_hu: float = -1000.0
    edge_softness: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ValidationError(f"Phantom size {self.size} must be >= 32")
        if not 0 <= self.min_ellipses <= self.max_ellipses:
            raise ValidationError(
                f"Invalid ellipse count range [{self.min_ellipses}, {self.max_ellipses}]"
            )
        if self.hu_lo > self.hu_hi:
            raise ValidationError(f"Invalid ellipse HU range [{self.hu_lo}, {self.hu_hi}]")
        for name in ("hu_lo", "hu_hi", "background_hu"):
            value = getattr(self, name)
            if not HU_MIN <= value <= HU_MAX:
                raise ValidationError(f"Phantom {name}={value} outside [{HU_MIN}, {HU_MAX}]")
        if self.edge_softness <= 0:
            raise ValidationError(f"edge_softness={self.edge_softness} must be > 0")


def apply_window(img: CtImage, w: WindowSpec) -> np.ndarray:
    """Map HU to [0, 1] over the window, clamping outside values."""
    if not np.all(np.isfinite(img.pixels)):
        raise ValidationError(f"Non-finite pixel values in image '{img.id}'")
    norm = (img.pixels.astype(np.float64) - w.lo) / (w.hi - w.lo)
    return np.clip(norm, 0.0, 1.0).astype(np.float32)


def invert_window(norm: np.ndarray, w: WindowSpec, image_id: str = "restored") -> CtImage:
    """Inverse of apply_window on the non-clamped range: HU = lo + v * (hi - lo)."""
    norm = np.asarray(norm, dtype=np.float64)
    if norm.size and (norm.min() < -INVERT_TOLERANCE or norm.max() > 1.0 + INVERT_TOLERANCE):
        raise ValidationError(
            f"Normalized values outside [0, 1] for '{image_id}': "
            f"[{norm.min():.8f}, {norm.max():.8f}]"
        )
    norm = np.clip(norm, 0.0, 1.0)
    return CtImage(id=image_id, pixels=(w.lo + norm * (w.hi - w.lo)).astype(np.float32))


def generate_phantom(spec: PhantomSpec, image_id: str | None = None) -> CtImage:
    """Background plus soft-edged ellipses, blended in drawing order.

    Each ellipse blends toward its own HU value, so every pixel stays inside
    the span of the background and the ellipse HU range.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.full((n, n), spec.background_hu, dtype=np.float64)

    count = int(rng.integers(spec.min_ellipses, spec.max_ellipses + 1))
    for k in range(count):
        if k == 0:
            cx, cy = rng.uniform(-0.05, 0.05, size=2)
            ax, ay = rng.uniform(0.75, 0.9), rng.uniform(0.6, 0.8)
            angle = rng.uniform(-0.2, 0.2)
            hu = rng.uniform(spec.hu_lo, min(spec.hu_hi, max(spec.hu_lo, 60.0)))
        else:
            cx, cy = rng.uniform(-0.45, 0.45, size=2)
            ax, ay = rng.uniform(0.06, 0.3, size=2)
            angle = rng.uniform(0.0, np.pi)
            hu = rng.uniform(spec.hu_lo, spec.hu_hi)
        c, s = np.cos(angle), np.sin(angle)
        u = ((xx - cx) * c + (yy - cy) * s) / ax
        v = (-(xx - cx) * s + (yy - cy) * c) / ay
        r = np.sqrt(u * u + v * v)
        mask = 0.5 * (1.0 - np.tanh((r - 1.0) / spec.edge_softness))
        img = img * (1.0 - mask) + hu * mask

    return CtImage(id=image_id or f"phantom_{spec.seed:08d}", pixels=img.astype(np.float32))


def simulate_low_dose(
    ndct: CtImage,
    photon_count: float,
    seed: int,
    window: WindowSpec = TRAINING_WINDOW,
    read_noise_hu: float = 0.0,
) -> CtImage:
    """Image-domain Poisson noise on pseudo-intensities.

    mu = windowed value, counts ~ Poisson(I0 * exp(-mu)), mu' = -log(counts / I0),
    mapped back to HU through the same window.
    """
    if not photon_count > 0:
        raise ValidationError(f"Photon count must be > 0, got {photon_count}")
    rng = np.random.default_rng(seed)
    mu = apply_window(ndct, window).astype(np.float64)
    expected = photon_count * np.exp(-mu)
    counts = rng.poisson(expected).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    mu_noisy = -np.log(counts / photon_count)
    hu = window.lo + mu_noisy * (window.hi - window.lo)
    if read_noise_hu > 0:
        hu = hu + rng.normal(0.0, read_noise_hu, size=hu.shape)
    hu = np.clip(hu, HU_MIN, HU_MAX)
    return CtImage(id=ndct.id, pixels=hu.astype(np.float32))


def phantom_seed(base_seed: int, split: str, index: int) -> int:
    """Seed for phantom `index` of a split; train and test ranges never overlap."""
    if split not in ("train", "test"):
        raise ValidationError(f"Unknown split '{split}'")
    if not 0 <= index < 50000:
        raise ValidationError(f"Phantom index {index} outside [0, 50000)")
    offset = 0 if split == "train" else 50000
    return base_seed * 100000 + offset + index


def make_pair(spec: PhantomSpec, photon_count: float, read_noise_hu: float = 0.0) -> PairedSample:
    """Phantom NDCT plus its simulated LDCT, both keyed by the phantom seed."""
    ndct = generate_phantom(spec)
    # Noise stream is decorrelated from the geometry stream but still seed-indexed.
    ldct = simulate_low_dose(ndct, photon_count, seed=spec.seed + 7919, read_noise_hu=read_noise_hu)
    return PairedSample(ldct=ldct, ndct=ndct)
