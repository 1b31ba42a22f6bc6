"""PSNR, SSIM and FSIM on metric-windowed images, with mean ± std reports."""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage, signal

from ctdata import METRIC_WINDOW, CtImage, WindowSpec, apply_window
from validator import ValidationError

METRICS = ("psnr", "ssim", "fsim")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

FSIM_MIN_SIZE = 32
FSIM_T1, FSIM_T2 = 0.85, 160.0
SCHARR = np.array([[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]]) / 16.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"Shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValidationError(f"Metrics expect 2-D images, got shape {a.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); identical images give +inf."""
    a, b = _pair(a, b)
    if not data_range > 0:
        raise ValidationError(f"data_range must be > 0, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), mean over valid positions."""
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValidationError(f"Image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(x):
        return signal.correlate2d(x, win, mode="valid")

    mu1, mu2 = filt(a), filt(b)
    s11 = filt(a * a) - mu1 * mu1
    s22 = filt(b * b) - mu2 * mu2
    s12 = filt(a * b) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def _meshgrid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    def axis(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, n / 2) / (n - 1)
        return np.arange(-n / 2, n / 2) / n
    return np.meshgrid(axis(h), axis(w), indexing="ij")


def _lowpass(h: int, w: int, cutoff: float = 0.45, n: int = 15) -> np.ndarray:
    gx, gy = _meshgrid(h, w)
    radius = np.sqrt(gx ** 2 + gy ** 2)
    return np.fft.ifftshift(1.0 / (1.0 + (radius / cutoff) ** (2 * n)))


def _log_gabor_filters(h: int, w: int, scales: int, orientations: int, min_length: float,
                       mult: float, sigma_f: float, delta_theta: float) -> np.ndarray:
    """(orientations * scales, h, w) frequency-domain filters, orientation-major."""
    theta_sigma = math.pi / (orientations * delta_theta)
    gx, gy = _meshgrid(h, w)
    radius = np.fft.ifftshift(np.sqrt(gx ** 2 + gy ** 2))
    theta = np.fft.ifftshift(np.arctan2(-gy, gx))
    radius[0, 0] = 1.0
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    lp = _lowpass(h, w)

    radial = []
    for s in range(scales):
        omega_0 = 1.0 / (min_length * mult ** s)
        g = np.exp(-(np.log(radius / omega_0) ** 2) / (2 * math.log(sigma_f) ** 2)) * lp
        g[0, 0] = 0.0
        radial.append(g)

    filters = []
    for o in range(orientations):
        angle = o * math.pi / orientations
        ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
        dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
        spread = np.exp(-(np.abs(np.arctan2(ds, dc)) ** 2) / (2 * theta_sigma ** 2))
        filters += [spread * g for g in radial]
    return np.stack(filters)


def phase_congruency(img: np.ndarray, scales: int = 4, orientations: int = 4, min_length: float = 6.0,
                     mult: float = 2.0, sigma_f: float = 0.55, delta_theta: float = 1.2,
                     k: float = 2.0) -> np.ndarray:
    """Phase congruency map with noise compensation from the smallest-scale response."""
    eps = np.finfo(np.float64).eps
    h, w = img.shape
    filters = _log_gabor_filters(h, w, scales, orientations, min_length, mult, sigma_f, delta_theta)
    filters_ifft = np.real(np.fft.ifft2(filters)) * math.sqrt(h * w)
    eo = np.fft.ifft2(np.fft.fft2(img)[None] * filters).reshape(orientations, scales, h, w)
    even, odd = eo.real, eo.imag
    an = np.abs(eo)

    em_n = (filters.reshape(orientations, scales, h, w)[:, :1] ** 2).sum(axis=(-2, -1), keepdims=True)
    sum_e = even.sum(axis=1, keepdims=True)
    sum_o = odd.sum(axis=1, keepdims=True)
    x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + eps
    mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
    energy = (even * mean_e + odd * mean_o - np.abs(even * mean_o - odd * mean_e)).sum(axis=1, keepdims=True)

    # Lower median, matching the reference implementation.
    e2n = (an[:, :1] ** 2).reshape(orientations, 1, h * w)
    median_e2n = np.sort(e2n, axis=-1)[..., (h * w - 1) // 2][..., None, None]
    noise_power = (-median_e2n / math.log(0.5)) / em_n

    fi = filters_ifft.reshape(orientations, scales, h, w)
    sum_an2 = (fi ** 2).sum(axis=1, keepdims=True).sum(axis=(-2, -1), keepdims=True)
    sum_ai_aj = np.zeros((orientations, 1, h, w))
    for s in range(scales - 1):
        sum_ai_aj = sum_ai_aj + (fi[:, s:s + 1] * fi[:, s + 1:]).sum(axis=1, keepdims=True)
    sum_ai_aj = sum_ai_aj.sum(axis=(-2, -1), keepdims=True)

    noise_energy2 = 2 * noise_power * sum_an2 + 4 * noise_power * sum_ai_aj
    tau = np.sqrt(noise_energy2 / 2)
    threshold = (tau * math.sqrt(math.pi / 2) + k * np.sqrt((2 - math.pi / 2) * tau ** 2)) / 1.7
    energy = np.maximum(energy - threshold, 0.0)

    return (energy.sum(axis=(0, 1)) + eps) / (an.sum(axis=(0, 1)) + eps)


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Scharr gradient magnitude; edge-replicated borders keep it offset-invariant."""
    gx = ndimage.correlate(img, SCHARR, mode="nearest")
    gy = ndimage.correlate(img, SCHARR.T, mode="nearest")
    return np.sqrt(gx ** 2 + gy ** 2)


def _similarity(x, y, c):
    return (2 * x * y + c) / (x ** 2 + y ** 2 + c)


def _avg_pool(img: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return img
    h, w = (img.shape[0] // k) * k, (img.shape[1] // k) * k
    return img[:h, :w].reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def fsim(a, b, data_range: float = 1.0) -> float:
    """Grayscale FSIM: phase congruency and gradient similarity, pooled by max phase congruency.

    Images with zero phase congruency everywhere score 1.0.
    """
    a, b = _pair(a, b)
    if min(a.shape) < FSIM_MIN_SIZE:
        raise ValidationError(f"Image {a.shape} is smaller than the FSIM minimum {FSIM_MIN_SIZE}x{FSIM_MIN_SIZE}")
    a = a / float(data_range) * 255.0
    b = b / float(data_range) * 255.0
    k = max(1, round(min(a.shape) / 256))
    a, b = _avg_pool(a, k), _avg_pool(b, k)

    pc_a, pc_b = phase_congruency(a), phase_congruency(b)
    s_pc = _similarity(pc_a, pc_b, FSIM_T1)
    s_g = _similarity(gradient_magnitude(a), gradient_magnitude(b), FSIM_T2)
    pc_max = np.maximum(pc_a, pc_b)
    denom = float(pc_max.sum())
    if denom == 0.0:
        return 1.0
    return float((s_g * s_pc * pc_max).sum() / denom)


METRIC_FUNCS = {"psnr": psnr, "ssim": ssim, "fsim": fsim}


@dataclass
class MetricReport:
    """Per-image values of one metric with their mean and population std."""
    metric: str
    values: dict[str, float]
    mean: float
    std: float
    excluded: int
    window: WindowSpec

    @property
    def count(self) -> int:
        return len(self.values)

    def summary(self, digits: int) -> str:
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


def aggregate(metric: str, values: dict[str, float], window: WindowSpec = METRIC_WINDOW) -> MetricReport:
    """Mean and population std over finite values, in id order."""
    ordered = [values[k] for k in sorted(values)]
    finite = np.array([v for v in ordered if math.isfinite(v)], dtype=np.float64)
    excluded = len(ordered) - finite.size
    if excluded:
        print(f"  Warning: {metric}: {excluded} infinite value(s) excluded from mean/std")
    mean = float(finite.mean()) if finite.size else math.inf
    std = float(finite.std()) if finite.size else 0.0
    return MetricReport(metric=metric, values=dict(values), mean=mean, std=std, excluded=excluded, window=window)


def evaluate_pairs(pairs: list[tuple[CtImage, CtImage]],
                   window: WindowSpec = METRIC_WINDOW) -> dict[str, MetricReport]:
    """Metrics for (estimate, reference) HU image pairs, windowed to [0, 1] with data range 1."""
    if not pairs:
        raise ValidationError("Cannot evaluate an empty dataset")
    values = {m: {} for m in METRICS}
    for estimate, reference in pairs:
        if estimate.stem != reference.stem:
            raise ValidationError(f"Unpaired ids: '{estimate.id}' vs '{reference.id}'")
        if reference.id in values["psnr"]:
            raise ValidationError(f"Duplicate image id '{reference.id}' in evaluation set")
        a = apply_window(estimate, window)
        b = apply_window(reference, window)
        for m, func in METRIC_FUNCS.items():
            values[m][reference.id] = func(a, b, 1.0)
    return {m: aggregate(m, values[m], window) for m in METRICS}


DIGITS = {"psnr": 2, "ssim": 4, "fsim": 4}


def render_table(rows: list[tuple[str, dict[str, MetricReport]]], window: WindowSpec = METRIC_WINDOW) -> str:
    """One row per method: 'mean ± std' per metric, PSNR in dB."""
    if not rows:
        raise ValidationError("No rows to render")
    count = rows[0][1]["psnr"].count
    header = (
        f"# window [{window.lo:g}, {window.hi:g}] HU; mean ± population std over {count} image(s)\n"
    )
    label_width = max(len("Method"), *(len(label) for label, _ in rows))
    cells = [["Method".ljust(label_width), "PSNR (dB)", "SSIM", "FSIM"]]
    for label, reports in rows:
        cells.append([label.ljust(label_width)] + [reports[m].summary(DIGITS[m]) for m in METRICS])
    widths = [max(len(row[i]) for row in cells) for i in range(4)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in cells]
    notes = [
        f"# {label}: {reports[m].excluded} infinite {m} value(s) excluded"
        for label, reports in rows for m in METRICS if reports[m].excluded
    ]
    return header + "\n".join(lines + notes) + "\n"


def write_metrics_csv(reports: dict[str, MetricReport], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = sorted(reports["psnr"].values)
    frame = pd.DataFrame({"id": ids, **{m: [reports[m].values[i] for i in ids] for m in METRICS}})
    frame.to_csv(path, index=False)
    return path


def read_metrics_csv(path: Path, window: WindowSpec = METRIC_WINDOW) -> dict[str, MetricReport]:
    frame = pd.read_csv(path)
    missing = [c for c in ("id", *METRICS) if c not in frame.columns]
    if missing:
        raise ValidationError(f"Metrics CSV {Path(path).name} missing column(s): {', '.join(missing)}")
    ids = frame["id"].astype(str).tolist()
    return {
        m: aggregate(m, dict(zip(ids, frame[m].astype(float).tolist())), window)
        for m in METRICS
    }
