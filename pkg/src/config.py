"""Run configuration: flat `section.key=value` text with preset defaults.

Precedence, lowest first: preset defaults, config file, `--set key=value`,
`--seed`. `RunConfig.echo()` renders every effective key and parses back to
the same configuration.
"""

import math
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from codebook import layer_sizes
from ctdata import PhantomSpec, WindowSpec
from validator import (
    ConfigError,
    ValidationError,
    validate_non_negative,
    validate_power_of_two,
    validate_threshold,
)

PRESETS = ("desk", "full")
LEDA_MODES = ("full", "continuous-only", "discrete-only", "mse-only", "perceptual")
SCORER_KINDS = ("synthetic", "precomputed")


@dataclass
class RunSection:
    preset: str = "desk"
    seed: int = 0
    name: str = ""


@dataclass
class PathsConfig:
    data: str = "data/phantoms"
    vocab: str = ""
    embeddings: str = ""
    scores: str = ""
    autoencoder: str = ""
    denoiser: str = ""
    runs: str = "runs"
    cache: str = ""


@dataclass
class CodebookConfig:
    """Synthetic codebook shape, used when no vocabulary/embedding files are given."""
    size: int = 256
    dim: int = 16
    normalize: bool = False


@dataclass
class ScorerConfig:
    kind: str = "synthetic"
    sparse: bool = False


@dataclass
class PhantomConfig:
    train_count: int = 32
    test_count: int = 8
    size: int = 64
    min_ellipses: int = 3
    max_ellipses: int = 8
    hu_lo: float = -100.0
    hu_hi: float = 300.0
    background_hu: float = -1000.0
    edge_softness: float = 0.04

    def spec(self, seed: int) -> PhantomSpec:
        return PhantomSpec(
            size=self.size,
            min_ellipses=self.min_ellipses,
            max_ellipses=self.max_ellipses,
            hu_lo=self.hu_lo,
            hu_hi=self.hu_hi,
            background_hu=self.background_hu,
            edge_softness=self.edge_softness,
            seed=seed,
        )


@dataclass
class LowDoseConfig:
    photon_count: float = 5e3
    read_noise_hu: float = 0.0


@dataclass
class WindowConfig:
    train_lo: float = -1000.0
    train_hi: float = 2000.0
    metric_lo: float = -160.0
    metric_hi: float = 240.0

    @property
    def training(self) -> WindowSpec:
        return WindowSpec(self.train_lo, self.train_hi)

    @property
    def metric(self) -> WindowSpec:
        return WindowSpec(self.metric_lo, self.metric_hi)


@dataclass
class AutoencoderConfig:
    image_size: int = 64
    downsample: int = 16
    base_channels: int = 32
    res_blocks: int = 1
    attention_blocks: int = 2
    latent_dim: int = 16
    pyramid_depth: int = 2
    layer_ratio: int = 4
    thresholds: tuple[float, ...] = (0.4, 0.3)
    alpha: float = 0.3
    beta: float = 0.3
    gamma: float = 0.1
    eta: float = 0.1
    disc_start: int = 500
    disc_channels: int = 32
    lr: float = 1e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-9
    batch_size: int = 4
    steps: int = 300
    checkpoint_every: int = 100
    log_every: int = 10
    seed: int = 0

    @property
    def levels(self) -> int:
        return int(math.log2(self.downsample))

    @property
    def latent_hw(self) -> tuple[int, int]:
        n = self.image_size // self.downsample
        return n, n

    def layer_sizes(self) -> list[tuple[int, int]]:
        return layer_sizes(self.latent_hw, self.pyramid_depth, self.layer_ratio)

    def validate(self) -> None:
        validate_power_of_two(self.downsample, "autoencoder.downsample")
        if self.downsample < 2:
            raise ConfigError(f"autoencoder.downsample={self.downsample} must be >= 2")
        if self.image_size % self.downsample:
            raise ConfigError(
                f"autoencoder.image_size={self.image_size} is not a multiple of "
                f"autoencoder.downsample={self.downsample}"
            )
        for name in ("alpha", "beta", "gamma", "eta", "weight_decay"):
            validate_non_negative(getattr(self, name), f"autoencoder.{name}")
        for name in ("base_channels", "res_blocks", "latent_dim", "disc_channels",
                     "batch_size", "steps", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"autoencoder.{name}={getattr(self, name)} must be >= 1")
        if len(self.thresholds) != self.pyramid_depth:
            raise ConfigError(
                f"autoencoder.thresholds has {len(self.thresholds)} value(s) "
                f"but autoencoder.pyramid_depth={self.pyramid_depth}"
            )
        try:
            for rho in self.thresholds:
                validate_threshold(rho, "autoencoder.thresholds")
            self.layer_sizes()
        except ValidationError as e:
            raise ConfigError(str(e))


@dataclass
class DenoiserConfig:
    channels: int = 32
    kernel: int = 5
    lam: float = 0.5
    mode: str = "full"
    ste: bool = True
    lr: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-9
    batch_size: int = 4
    steps: int = 300
    checkpoint_every: int = 100
    log_every: int = 10
    seed: int = 0

    def validate(self) -> None:
        validate_non_negative(self.lam, "denoiser.lam")
        if self.mode not in LEDA_MODES:
            raise ConfigError(f"denoiser.mode='{self.mode}' not one of {', '.join(LEDA_MODES)}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"denoiser.kernel={self.kernel} must be a positive odd number")
        for name in ("channels", "batch_size", "steps", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"denoiser.{name}={getattr(self, name)} must be >= 1")


@dataclass
class EvalConfig:
    layers: tuple[int, ...] = ()
    all_layers: bool = False
    batch_size: int = 8


SECTIONS = {
    "run": RunSection,
    "paths": PathsConfig,
    "codebook": CodebookConfig,
    "scorer": ScorerConfig,
    "phantom": PhantomConfig,
    "lowdose": LowDoseConfig,
    "window": WindowConfig,
    "autoencoder": AutoencoderConfig,
    "denoiser": DenoiserConfig,
    "eval": EvalConfig,
}


def coerce_value(raw: str, tp, key: str):
    """Convert config text to the field's declared type."""
    raw = raw.strip()
    try:
        if tp is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            (elem, _) = typing.get_args(tp)
            return tuple(coerce_value(p, elem, key) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"Bad value for {key}: '{raw}'")
    raise ConfigError(f"Unsupported type {tp} for {key}")


def render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(render_value(v) for v in value)
    return str(value)


def section_to_flat(obj, prefix: str) -> dict[str, str]:
    return {f"{prefix}.{f.name}": render_value(getattr(obj, f.name)) for f in fields(obj)}


def section_from_flat(cls, flat: dict[str, str], prefix: str):
    """Build a section dataclass from `prefix.key` entries; absent keys keep defaults."""
    hints = typing.get_type_hints(cls)
    values = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key in flat:
            values[f.name] = coerce_value(flat[key], hints[f.name], key)
    return cls(**values)


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    """Parse `section.key=value` lines; `#` starts a comment line."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"Malformed line {lineno} in {source}: '{line}'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_set_args(items) -> dict[str, str]:
    pairs = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _preset_sections(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"run.preset='{name}' not one of {', '.join(PRESETS)}")
    sections = {section: cls() for section, cls in SECTIONS.items()}
    sections["run"].preset = name
    if name == "full":
        sections["phantom"] = replace(sections["phantom"], size=512)
        sections["codebook"] = replace(sections["codebook"], size=30522, dim=512)
        sections["autoencoder"] = replace(
            sections["autoencoder"],
            image_size=512,
            base_channels=64,
            disc_channels=64,
            latent_dim=512,
            pyramid_depth=3,
            thresholds=(0.95, 0.9, 0.8),
        )
        sections["denoiser"] = replace(sections["denoiser"], channels=96, lr=1e-4, lr_min=1e-6)
        sections["lowdose"] = replace(sections["lowdose"], photon_count=2e4)
    return sections


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsConfig = field(default_factory=PathsConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    lowdose: LowDoseConfig = field(default_factory=LowDoseConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def preset(cls, name: str = "desk") -> "RunConfig":
        return cls(**_preset_sections(name))

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"Unknown config key '{key}'")
        obj = getattr(self, section)
        hints = typing.get_type_hints(type(obj))
        if name not in hints:
            raise ConfigError(f"Unknown config key '{key}'")
        setattr(self, section, replace(obj, **{name: coerce_value(raw, hints[name], key)}))

    def apply(self, pairs: dict[str, str]) -> None:
        for key, raw in pairs.items():
            self.set(key, raw)

    def with_seed(self, seed: int) -> None:
        self.run = replace(self.run, seed=seed)
        self.autoencoder = replace(self.autoencoder, seed=seed)
        self.denoiser = replace(self.denoiser, seed=seed)

    def flat(self) -> dict[str, str]:
        out = {}
        for section in SECTIONS:
            out.update(section_to_flat(getattr(self, section), section))
        return dict(sorted(out.items()))

    def echo(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.flat().items())

    def validate(self) -> None:
        self.autoencoder.validate()
        self.denoiser.validate()
        if self.scorer.kind not in SCORER_KINDS:
            raise ConfigError(f"scorer.kind='{self.scorer.kind}' not one of {', '.join(SCORER_KINDS)}")
        if self.codebook.size < 2 or self.codebook.dim < 1:
            raise ConfigError(f"codebook.size/dim {self.codebook.size}x{self.codebook.dim} too small")
        if not self.lowdose.photon_count > 0:
            raise ConfigError(f"lowdose.photon_count={self.lowdose.photon_count} must be > 0")
        validate_non_negative(self.lowdose.read_noise_hu, "lowdose.read_noise_hu")
        for name in ("train_count", "test_count"):
            count = getattr(self.phantom, name)
            if not 1 <= count < 50000:
                raise ConfigError(f"phantom.{name}={count} outside [1, 50000)")
        if any(layer < 1 for layer in self.eval.layers):
            raise ConfigError(f"eval.layers={render_value(self.eval.layers)} must be >= 1")
        try:
            self.phantom.spec(self.run.seed)
            self.window.training
            self.window.metric
        except ValidationError as e:
            raise ConfigError(str(e))


def load_config(path: Path | None = None, overrides=(), seed: int | None = None) -> RunConfig:
    """Preset defaults < file < --set overrides < --seed.

    The per-module seeds and the latent dim follow `run.seed` and
    `codebook.dim` unless they are set explicitly.
    """
    pairs = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        pairs = parse_config_text(path.read_text(encoding="utf-8"), path.name)
    pairs.update(parse_set_args(overrides))

    cfg = RunConfig.preset(pairs.get("run.preset", "desk"))
    cfg.apply(pairs)
    for key in ("autoencoder.seed", "denoiser.seed"):
        if key not in pairs:
            cfg.set(key, str(cfg.run.seed))
    if "autoencoder.latent_dim" not in pairs:
        cfg.set("autoencoder.latent_dim", str(cfg.codebook.dim))
    if seed is not None:
        cfg.with_seed(seed)
    cfg.validate()
    return cfg
