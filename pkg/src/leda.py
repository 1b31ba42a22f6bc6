"""Denoiser backbone, dual-space alignment loss, and denoiser training against a frozen autoencoder."""

from dataclasses import dataclass, fields
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from codebook import straight_through
from config import LEDA_MODES, DenoiserConfig, section_from_flat, section_to_flat
from ctdata import TRAINING_WINDOW, PairedSample, WindowSpec
from loader import PairDataset, make_loader
from trainer import (
    History,
    checkpoint_dir,
    cycle,
    freeze,
    guard_finite,
    load_checkpoint,
    load_module_arrays,
    make_optimizer,
    make_scheduler,
    module_arrays,
    module_hash,
    save_checkpoint,
    seed_everything,
)
from validator import ConfigError, FrozenModelError, ValidationError, check_frozen

HISTORY_COLUMNS = ("mse", "continuous", "discrete", "perceptual", "total")
CONTINUOUS_MODES = ("full", "continuous-only")
DISCRETE_MODES = ("full", "discrete-only")


class RedCnn(nn.Module):
    """Residual encoder-decoder: 5 valid convs, 5 transposed convs, two inner skips.

    Predicts the noise; the output is clamp(x - noise, 0, 1). The last layer
    starts at zero, so an untrained network returns its input.
    """

    def __init__(self, channels: int = 32, kernel: int = 5):
        super().__init__()
        c, k = channels, kernel
        self.kernel = k
        self.conv1 = nn.Conv2d(1, c, k)
        self.conv2 = nn.Conv2d(c, c, k)
        self.conv3 = nn.Conv2d(c, c, k)
        self.conv4 = nn.Conv2d(c, c, k)
        self.conv5 = nn.Conv2d(c, c, k)
        self.tconv1 = nn.ConvTranspose2d(c, c, k)
        self.tconv2 = nn.ConvTranspose2d(c, c, k)
        self.tconv3 = nn.ConvTranspose2d(c, c, k)
        self.tconv4 = nn.ConvTranspose2d(c, c, k)
        self.tconv5 = nn.ConvTranspose2d(c, 1, k)
        nn.init.zeros_(self.tconv5.weight)
        nn.init.zeros_(self.tconv5.bias)

    @property
    def min_size(self) -> int:
        return 5 * (self.kernel - 1) + 1

    def noise(self, x):
        out = F.relu(self.conv1(x))
        out = F.relu(self.conv2(out))
        skip2 = out
        out = F.relu(self.conv3(out))
        out = F.relu(self.conv4(out))
        skip3 = out
        out = F.relu(self.conv5(out))
        out = self.tconv1(out) + skip3
        out = self.tconv2(F.relu(out))
        out = self.tconv3(F.relu(out)) + skip2
        out = self.tconv4(F.relu(out))
        return self.tconv5(F.relu(out))

    def forward(self, x):
        return torch.clamp(x - self.noise(x), 0.0, 1.0)


class PassthroughDenoiser(nn.Module):
    """Identity; evaluates the noisy input itself."""

    min_size = 1

    def forward(self, x):
        return x


def denoise(x: torch.Tensor, model: nn.Module) -> torch.Tensor:
    """Windowed (B, 1, H, W) LDCT in [0, 1] to a same-shape denoised estimate."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValidationError(f"Expected (B, 1, H, W) input, got {tuple(x.shape)}")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValidationError("Denoiser input must be windowed to [0, 1]")
    min_size = getattr(model, "min_size", 1)
    if min(x.shape[-2:]) < min_size:
        raise ValidationError(f"Input {tuple(x.shape[-2:])} is smaller than the backbone minimum {min_size}")
    return model(x)


@dataclass
class LedaLossReport:
    mse: torch.Tensor
    continuous: torch.Tensor
    discrete: torch.Tensor
    perceptual: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).detach().item() for f in fields(self)}


def leda_loss(y: torch.Tensor, y_hat: torch.Tensor, ae: nn.Module, lam: float = 0.5,
              mode: str = "full", ste: bool = True) -> LedaLossReport:
    """MSE plus lam times the continuous and/or discrete alignment terms through a frozen autoencoder.

    Both alignment terms are always reported; only the ones the mode uses
    enter the total and carry gradient. `ste=False` detaches the discrete term.
    """
    if mode not in LEDA_MODES:
        raise ConfigError(f"Unknown loss mode '{mode}' (expected one of {', '.join(LEDA_MODES)})")
    check_frozen(ae, "autoencoder")
    if y.shape != y_hat.shape:
        raise ValidationError(f"Shape mismatch: target {tuple(y.shape)} vs estimate {tuple(y_hat.shape)}")

    uses_c = mode in CONTINUOUS_MODES
    uses_d = mode in DISCRETE_MODES
    mse = F.mse_loss(y_hat, y)
    with torch.no_grad():
        z = ae.encode(y)
        z_q = ae.quantize(z).finest
    with torch.set_grad_enabled(torch.is_grad_enabled() and (uses_c or uses_d)):
        z_hat = ae.encode(y_hat)
        z_q_hat = ae.quantize(z_hat).finest
        if uses_d and ste:
            z_q_hat = straight_through(z_hat, z_q_hat)
        continuous = F.mse_loss(z_hat, z)
        discrete = F.mse_loss(z_q_hat, z_q)
    if not uses_c:
        continuous = continuous.detach()
    if not uses_d:
        discrete = discrete.detach()

    perceptual = y_hat.new_zeros(())
    if mode == "perceptual":
        perceptual = ae.feature_net.distance(y_hat, y)

    align = y_hat.new_zeros(())
    if uses_c:
        align = align + continuous
    if uses_d:
        align = align + discrete
    total = mse + lam * (align + perceptual)
    return LedaLossReport(mse=mse, continuous=continuous, discrete=discrete,
                          perceptual=perceptual, total=total)


def assert_no_grad(module: nn.Module, name: str = "autoencoder") -> None:
    """Raise FrozenModelError if any parameter accumulated a nonzero gradient."""
    for pname, p in module.named_parameters():
        if p.grad is not None and torch.any(p.grad != 0):
            raise FrozenModelError(f"Gradient reached {name} parameter '{pname}'")


@dataclass
class TrainResult:
    model: nn.Module
    history: History
    checkpoint: Path
    history_path: Path


def train_denoiser(samples: list[PairedSample], ae: nn.Module, cfg: DenoiserConfig, run_dir: Path,
                   window: WindowSpec = TRAINING_WINDOW,
                   config_flat: dict[str, str] | None = None,
                   ae_fingerprint: str = "") -> TrainResult:
    """Minimize the LEDA loss on (LDCT, NDCT) pairs; the autoencoder must stay frozen."""
    if not samples:
        raise ValidationError("Empty training set")
    cfg.validate()
    check_frozen(ae, "autoencoder")
    ae_hash = module_hash(ae)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    seed_everything(cfg.seed)
    model = RedCnn(cfg.channels, cfg.kernel)
    min_side = min(min(s.ndct.shape) for s in samples)
    if min_side < model.min_size:
        raise ValidationError(f"Training images ({min_side} px) are smaller than the backbone minimum {model.min_size}")
    opt = make_optimizer(model.parameters(), cfg)
    sched = make_scheduler(opt, cfg)
    batches = cycle(make_loader(PairDataset(samples, window), cfg.batch_size, cfg.seed))

    modules = {"model": model}
    meta = {"autoencoder": ae_fingerprint or ae_hash, "mode": cfg.mode}
    ckpt_config = {**(config_flat or {}), **section_to_flat(cfg, "denoiser")}
    history = History(list(HISTORY_COLUMNS))
    last_good, last_step = module_arrays(modules), 0

    def dump():
        return save_checkpoint(
            run_dir / "checkpoints" / f"last_good_step_{last_step:06d}", "denoiser",
            last_step, cfg.seed, meta=meta, config=ckpt_config, arrays=last_good,
        )

    print(f"[train-denoiser] {len(samples)} pairs, {cfg.steps} steps, mode {cfg.mode}, lambda {cfg.lam}")
    model.train()
    checkpoint = None
    for step in range(1, cfg.steps + 1):
        x, y, _ = next(batches)
        report = leda_loss(y, model(x), ae, cfg.lam, cfg.mode, cfg.ste)
        values = report.as_dict()
        guard_finite(values, dump)

        opt.zero_grad(set_to_none=True)
        report.total.backward()
        assert_no_grad(ae)
        last_good, last_step = module_arrays(modules), step - 1
        opt.step()

        history.append(step, values, sched.get_last_lr()[0])
        sched.step()

        if step % cfg.log_every == 0 or step == cfg.steps:
            print(
                f"  step {step}/{cfg.steps} mse {values['mse']:.6f} cont {values['continuous']:.6f} "
                f"disc {values['discrete']:.6f} total {values['total']:.6f}"
            )
        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            checkpoint = save_checkpoint(
                checkpoint_dir(run_dir, step), "denoiser", step, cfg.seed,
                modules, meta=meta, config=ckpt_config,
            )

    if module_hash(ae) != ae_hash:
        raise FrozenModelError("Autoencoder weights changed during denoiser training")
    if cfg.mode in DISCRETE_MODES and not any(r["discrete"] > 0 for r in history.rows):
        print("  Warning: the discrete term was 0 on every step; the autoencoder gave "
              "denoised and target images identical tokens")
    history_path = history.write(run_dir / "history.csv")
    print(f"  Saved checkpoint: {checkpoint}")
    return TrainResult(model=model, history=history, checkpoint=checkpoint, history_path=history_path)


def load_denoiser(path: Path) -> RedCnn:
    ckpt = load_checkpoint(path, "denoiser")
    cfg = section_from_flat(DenoiserConfig, ckpt.config, "denoiser")
    model = RedCnn(cfg.channels, cfg.kernel)
    load_module_arrays(model, ckpt.tensors, "model")
    return freeze(model)
