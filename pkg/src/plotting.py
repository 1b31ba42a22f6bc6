"""SVG loss curves and metric bar charts from history / metrics CSV files."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from autoencoder import HISTORY_COLUMNS as AE_COLUMNS  # noqa: E402
from leda import HISTORY_COLUMNS as DENOISER_COLUMNS  # noqa: E402
from metrics import DIGITS, METRICS, MetricReport  # noqa: E402
from validator import ConfigError, MissingPrerequisiteError  # noqa: E402

HISTORY_KINDS = {"autoencoder": AE_COLUMNS, "denoiser": DENOISER_COLUMNS}
SVG_METADATA = {"Date": None}


def _style() -> None:
    plt.rcParams["svg.hashsalt"] = "leda"
    plt.rcParams["svg.fonttype"] = "path"


def read_history(path: Path, kind: str = "auto") -> tuple[str, pd.DataFrame]:
    """Parse a history CSV; returns (kind, frame). Malformed files raise ConfigError."""
    path = Path(path)
    if not path.is_file():
        raise MissingPrerequisiteError(f"History CSV not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f"Malformed history CSV {path.name}: {e}")
    if kind == "auto":
        kind = "denoiser" if any(c in frame.columns for c in ("mse", "continuous", "discrete")) else "autoencoder"
    if kind not in HISTORY_KINDS:
        raise ConfigError(f"Unknown history kind '{kind}' (expected one of {', '.join(HISTORY_KINDS)})")
    for column in ("step", *HISTORY_KINDS[kind]):
        if column not in frame.columns:
            raise ConfigError(f"History CSV {path.name} is missing column '{column}'")
        if not pd.api.types.is_numeric_dtype(frame[column]):
            raise ConfigError(f"History CSV {path.name} column '{column}' is not numeric")
    if frame.empty:
        raise ConfigError(f"History CSV {path.name} has no rows")
    return kind, frame


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    return path


def plot_history(path: Path, out_dir: Path, kind: str = "auto") -> list[Path]:
    """One SVG per loss column plus a summary chart of all columns scaled to their max."""
    kind, frame = read_history(path, kind)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _style()
    columns = HISTORY_KINDS[kind]
    steps = frame["step"].to_numpy()
    written = []
    for column in columns:
        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        ax.plot(steps, frame[column].to_numpy(), linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(column)
        ax.set_title(f"{kind}: {column}")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        written.append(_save(fig, out_dir / f"{kind}_{column}.svg"))

    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=100)
    for column in columns:
        values = frame[column].to_numpy(dtype=np.float64)
        peak = np.nanmax(np.abs(values)) if values.size else 0.0
        ax.plot(steps, values / peak if peak > 0 else values, label=column, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("value / max")
    ax.set_title(f"{kind} losses (normalized)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    written.append(_save(fig, out_dir / f"{kind}_summary.svg"))
    print(f"  Wrote {len(written)} figure(s) to {out_dir}")
    return written


def plot_metrics(rows: list[tuple[str, dict[str, MetricReport]]], out_dir: Path) -> Path:
    """Grouped mean ± std bars, one panel per metric."""
    if not rows:
        raise ConfigError("No metric rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _style()
    labels = [label for label, _ in rows]
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 4), dpi=100)
    for ax, metric in zip(axes, METRICS):
        means = [reports[metric].mean if np.isfinite(reports[metric].mean) else np.nan for _, reports in rows]
        stds = [reports[metric].std for _, reports in rows]
        x = np.arange(len(labels))
        ax.bar(x, means, yerr=stds, capsize=3, color="#4c72b0")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.set_title(metric.upper())
        for xi, m in zip(x, means):
            if not np.isfinite(m):
                continue
            ax.annotate(f"{m:.{DIGITS[metric]}f}", (xi, m), ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    return _save(fig, out_dir / "metrics.svg")
