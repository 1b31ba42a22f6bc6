"""LLM-codebook VQ autoencoder: networks, pyramid semantic loss, composite objective, training."""

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from codebook import LlmCodebook, TokenPyramid, layer_sizes, quantize_pyramid, squared_distances, straight_through
from config import AutoencoderConfig, section_from_flat, section_to_flat
from ctdata import TRAINING_WINDOW, CtImage, WindowSpec
from loader import ImageDataset, make_loader
from scorer import CandidatePool, Scorer, pools_for_image, score_dataset
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
    save_checkpoint,
    seed_everything,
)
from validator import ConfigError, ValidationError, validate_shape_multiple

EPS = 1e-8
FEATURE_SEED = 1234
HISTORY_COLUMNS = ("recon", "commit", "gan", "perceptual", "semantic", "omega", "total", "disc")


def _groups(channels: int) -> int:
    return math.gcd(32, channels)


def _channel_mults(levels: int) -> list[int]:
    return [min(2 ** (i // 2), 4) for i in range(levels)]


class ResnetBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int | None = None):
        super().__init__()
        out_ch = out_ch or in_ch
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class AttnBlock(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


def _mid_blocks(ch: int, attention_blocks: int) -> nn.Sequential:
    if attention_blocks == 0:
        return nn.Sequential(ResnetBlock(ch))
    blocks = []
    for _ in range(attention_blocks):
        blocks += [ResnetBlock(ch), AttnBlock(ch)]
    return nn.Sequential(*blocks)


class Encoder(nn.Module):
    """log2(f) stride-2 stages of residual blocks, then a residual/attention middle, out to d channels."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        ch = cfg.base_channels
        self.conv_in = nn.Conv2d(1, ch, 3, padding=1)
        blocks = []
        for mult in _channel_mults(cfg.levels):
            out = cfg.base_channels * mult
            for _ in range(cfg.res_blocks):
                blocks.append(ResnetBlock(ch, out))
                ch = out
            blocks.append(nn.Conv2d(ch, ch, 4, stride=2, padding=1))
        self.down = nn.Sequential(*blocks)
        self.mid = _mid_blocks(ch, cfg.attention_blocks)
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.latent_dim, 3, padding=1)

    def forward(self, x):
        h = self.mid(self.down(self.conv_in(x)))
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    """Mirror of the encoder with nearest upsampling; sigmoid output in [0, 1]."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        mults = _channel_mults(cfg.levels)
        ch = cfg.base_channels * mults[-1]
        self.conv_in = nn.Conv2d(cfg.latent_dim, ch, 3, padding=1)
        self.mid = _mid_blocks(ch, cfg.attention_blocks)
        blocks = []
        for mult in reversed(mults):
            out = cfg.base_channels * mult
            for _ in range(cfg.res_blocks):
                blocks.append(ResnetBlock(ch, out))
                ch = out
            blocks += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, ch, 3, padding=1)]
        self.up = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, 1, 3, padding=1)

    def forward(self, z_q):
        h = self.up(self.mid(self.conv_in(z_q)))
        return torch.sigmoid(self.conv_out(F.silu(self.norm_out(h))))


class PatchDiscriminator(nn.Module):
    """4-layer patch discriminator; one logit per receptive-field patch."""

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.GroupNorm(_groups(2 * c), 2 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=1, padding=1),
            nn.GroupNorm(_groups(4 * c), 4 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class FeatureNet(nn.Module):
    """Frozen feature stack for the perceptual loss.

    Defaults to four seed-fixed random conv stages. Pass `stages` (modules
    taking a 1-channel image, applied in sequence) to use a pretrained
    network instead.
    """

    def __init__(self, stages: nn.ModuleList | None = None, seed: int = FEATURE_SEED):
        super().__init__()
        if stages is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                stages = nn.ModuleList([
                    nn.Sequential(nn.Conv2d(1, 16, 3, padding=1), nn.ReLU()),
                    nn.Sequential(nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU()),
                    nn.Sequential(nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU()),
                    nn.Sequential(nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.ReLU()),
                ])
        self.stages = stages
        freeze(self)

    def features(self, x) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def distance(self, a, b) -> torch.Tensor:
        """Mean over stages of the mean squared feature-map difference."""
        pairs = zip(self.features(a), self.features(b))
        return torch.stack([F.mse_loss(fa, fb) for fa, fb in pairs]).mean()


class LlmGuidedAutoencoder(nn.Module):
    """Encoder, frozen-codebook pyramid quantizer and decoder."""

    def __init__(self, cfg: AutoencoderConfig, cb: LlmCodebook, feature_net: FeatureNet | None = None):
        super().__init__()
        if cfg.latent_dim != cb.dim:
            raise ConfigError(
                f"autoencoder.latent_dim={cfg.latent_dim} must equal the codebook dim {cb.dim}"
            )
        self.cfg = cfg
        self.cb = cb
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.feature_net = feature_net or FeatureNet()

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [*self.encoder.parameters(), *self.decoder.parameters()]

    def sizes_for(self, latent_hw) -> list[tuple[int, int]]:
        return layer_sizes(tuple(int(s) for s in latent_hw), self.cfg.pyramid_depth, self.cfg.layer_ratio)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) windowed images to (B, d, H/f, W/f) latents."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValidationError(f"Expected (B, 1, H, W) input, got {tuple(x.shape)}")
        validate_shape_multiple(int(x.shape[-2]), int(x.shape[-1]), self.cfg.downsample, "autoencoder input")
        return self.encoder(x)

    def quantize(self, z: torch.Tensor) -> TokenPyramid:
        return quantize_pyramid(z, self.cb, self.sizes_for(z.shape[-2:]))

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        if z_q.ndim != 4 or z_q.shape[1] != self.cfg.latent_dim:
            raise ValidationError(
                f"Decoder expects (B, {self.cfg.latent_dim}, h, w), got {tuple(z_q.shape)}"
            )
        return self.decoder(z_q)

    def forward(self, x):
        z = self.encode(x)
        pyramid = self.quantize(z)
        return self.decode(straight_through(z, pyramid.finest)), z, pyramid


def semantic_loss(pooled: list[torch.Tensor], pools: list[list[CandidatePool]], cb: LlmCodebook) -> torch.Tensor:
    """Pyramid semantic loss.

    pooled[l] is the (B, d, h_l, w_l) layer feature grid, pools[b][l] the
    candidate pool of sample b at layer l. Averages -log softmax(-||z_l - e(k)||^2)
    over the full vocabulary, taken at every pool member, over positions, then
    layers, then the batch.
    """
    if not pooled:
        raise ValidationError("semantic_loss needs at least one layer")
    batch = int(pooled[0].shape[0])
    if len(pools) != batch:
        raise ValidationError(f"Got pools for {len(pools)} sample(s) but the batch holds {batch}")
    per_layer = []
    for l, z_l in enumerate(pooled):
        b, d, h, w = z_l.shape
        flat = z_l.permute(0, 2, 3, 1).reshape(b, h * w, d)
        terms = []
        for i in range(b):
            if len(pools[i]) != len(pooled):
                raise ValidationError(f"Sample {i} has {len(pools[i])} pool(s) for {len(pooled)} layer(s)")
            pool = pools[i][l]
            if not pool.token_ids:
                raise ValidationError(f"Empty candidate pool at layer {l + 1}")
            log_probs = F.log_softmax(-squared_distances(flat[i], cb), dim=1)
            ids = torch.as_tensor(pool.token_ids, dtype=torch.long)
            terms.append(-log_probs[:, ids].mean())
        per_layer.append(torch.stack(terms))
    return torch.stack(per_layer).mean(dim=0).mean()


def hinge_generator(fake_logits):
    return -fake_logits.mean()


def hinge_discriminator(real_logits, fake_logits):
    return F.relu(1 - real_logits).mean() + F.relu(1 + fake_logits).mean()


def commitment_loss(z: torch.Tensor, pyramid: TokenPyramid) -> torch.Tensor:
    """Sum over layers of mean ||z - sg(z_hat_<=l)||^2."""
    return torch.stack([F.mse_loss(z, c.detach()) for c in pyramid.cumulative]).sum()


@dataclass
class VqganTerms:
    recon: torch.Tensor
    commit: torch.Tensor
    gan: torch.Tensor
    perceptual: torch.Tensor

    def weighted(self, cfg: AutoencoderConfig) -> torch.Tensor:
        return self.recon + cfg.beta * self.commit + cfg.gamma * self.gan + cfg.eta * self.perceptual


def vqgan_loss(y, y_rec, z, pyramid: TokenPyramid,
               discriminator: nn.Module | None = None,
               feature_net: FeatureNet | None = None) -> VqganTerms:
    """Unweighted VQGAN components; GAN/perceptual are 0 without their networks."""
    if y.shape != y_rec.shape:
        raise ValidationError(f"Shape mismatch: target {tuple(y.shape)} vs reconstruction {tuple(y_rec.shape)}")
    zero = y_rec.new_zeros(())
    return VqganTerms(
        recon=F.mse_loss(y_rec, y),
        commit=commitment_loss(z, pyramid),
        gan=hinge_generator(discriminator(y_rec)) if discriminator is not None else zero,
        perceptual=feature_net.distance(y_rec, y) if feature_net is not None else zero,
    )


def _scalar(value) -> float:
    return value.detach().item() if torch.is_tensor(value) else float(value)


def dynamic_weight(l_vqgan, l_sem) -> float:
    """omega = L_vqgan / max(L_sem, eps), as a plain number outside the graph."""
    return _scalar(l_vqgan) / max(_scalar(l_sem), EPS)


def total_loss(l_vqgan, l_sem, omega: float, alpha: float):
    return l_vqgan + alpha * omega * l_sem


@dataclass
class TrainResult:
    model: nn.Module
    history: History
    checkpoint: Path
    history_path: Path


def compute_pools(images: list[CtImage], scorer: Scorer, thresholds,
                  cache_dir: Path | None = None) -> list[list[CandidatePool]]:
    sims = score_dataset(images, scorer, cache_dir)
    return [pools_for_image(sims[img.id], thresholds) for img in images]


def train_autoencoder(images: list[CtImage], cb: LlmCodebook, cfg: AutoencoderConfig, scorer: Scorer,
                      run_dir: Path, window: WindowSpec = TRAINING_WINDOW,
                      config_flat: dict[str, str] | None = None,
                      cache_dir: Path | None = None) -> TrainResult:
    """Alternating generator/discriminator training on NDCT images."""
    if not images:
        raise ValidationError("Empty training set")
    cfg.validate()
    for img in images:
        validate_shape_multiple(img.height, img.width, cfg.downsample, f"image '{img.id}'")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    fingerprint = cb.fingerprint()
    pools = compute_pools(images, scorer, cfg.thresholds, cache_dir)
    fallbacks = sum(p.fallback for per_image in pools for p in per_image)
    if fallbacks:
        print(f"  {fallbacks} pool(s) fell back to the top-scoring token")

    seed_everything(cfg.seed)
    model = LlmGuidedAutoencoder(cfg, cb)
    disc = PatchDiscriminator(cfg.disc_channels)
    opt_g = make_optimizer(model.trainable_parameters(), cfg)
    opt_d = make_optimizer(disc.parameters(), cfg)
    sched_g = make_scheduler(opt_g, cfg)
    sched_d = make_scheduler(opt_d, cfg, steps=cfg.steps - cfg.disc_start)
    batches = cycle(make_loader(ImageDataset(images, window), cfg.batch_size, cfg.seed))

    modules = {"model": model, "discriminator": disc}
    meta = {
        "codebook": fingerprint,
        "layers": ",".join(f"{h}x{w}" for h, w in cfg.layer_sizes()),
    }
    ckpt_config = {**(config_flat or {}), **section_to_flat(cfg, "autoencoder")}
    history = History(list(HISTORY_COLUMNS))
    last_good, last_step = module_arrays(modules), 0

    def dump():
        return save_checkpoint(
            run_dir / "checkpoints" / f"last_good_step_{last_step:06d}", "autoencoder",
            last_step, cfg.seed, meta=meta, config=ckpt_config, arrays=last_good,
        )

    print(f"[train-ae] {len(images)} images, {cfg.steps} steps, batch {cfg.batch_size}")
    model.train()
    disc.train()
    checkpoint = None
    for step in range(1, cfg.steps + 1):
        x, idx = next(batches)
        gan_on = step > cfg.disc_start

        rec, z, pyramid = model(x)
        terms = vqgan_loss(x, rec, z, pyramid, disc if gan_on else None, model.feature_net)
        l_vqgan = terms.weighted(cfg)
        l_sem = semantic_loss(pyramid.pooled, [pools[i] for i in idx.tolist()], cb)
        omega = dynamic_weight(l_vqgan, l_sem)
        total = total_loss(l_vqgan, l_sem, omega, cfg.alpha)
        values = {
            "recon": terms.recon.item(), "commit": terms.commit.item(), "gan": terms.gan.item(),
            "perceptual": terms.perceptual.item(), "semantic": l_sem.item(), "omega": omega,
            "total": total.item(),
        }
        guard_finite(values, dump)

        opt_g.zero_grad(set_to_none=True)
        total.backward()
        last_good, last_step = module_arrays(modules), step - 1
        opt_g.step()

        d_loss = 0.0
        if gan_on:
            loss_d = hinge_discriminator(disc(x), disc(rec.detach()))
            guard_finite({"disc": loss_d.item()}, dump)
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
            sched_d.step()
            d_loss = loss_d.item()
        values["disc"] = d_loss

        history.append(step, values, sched_g.get_last_lr()[0])
        sched_g.step()

        if step % cfg.log_every == 0 or step == cfg.steps:
            print(
                f"  step {step}/{cfg.steps} recon {values['recon']:.5f} commit {values['commit']:.5f} "
                f"sem {values['semantic']:.4f} omega {omega:.3f} total {values['total']:.5f}"
            )
        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            checkpoint = save_checkpoint(
                checkpoint_dir(run_dir, step), "autoencoder", step, cfg.seed,
                modules, meta=meta, config=ckpt_config,
            )

    print(f"  recon {history.moving_average('recon', cfg.steps):.5f} over the last 10 steps, "
          f"{history.moving_average('recon', 10):.5f} over the first 10")
    history_path = history.write(run_dir / "history.csv")
    print(f"  Saved checkpoint: {checkpoint}")
    return TrainResult(model=model, history=history, checkpoint=checkpoint, history_path=history_path)


def load_autoencoder(path: Path, cb: LlmCodebook, feature_net: FeatureNet | None = None) -> LlmGuidedAutoencoder:
    """Rebuild a trained autoencoder from its checkpoint and freeze it."""
    ckpt = load_checkpoint(path, "autoencoder")
    expected = ckpt.meta.get("codebook")
    if expected != cb.fingerprint():
        raise ValidationError(
            f"Checkpoint was trained with codebook {str(expected)[:12]}, "
            f"but the loaded codebook is {cb.fingerprint()[:12]}"
        )
    cfg = section_from_flat(AutoencoderConfig, ckpt.config, "autoencoder")
    model = LlmGuidedAutoencoder(cfg, cb, feature_net)
    load_module_arrays(model, ckpt.tensors, "model")
    return freeze(model)
