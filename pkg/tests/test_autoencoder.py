"""Tests for src/autoencoder.py."""

import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch

from autoencoder import (
    HISTORY_COLUMNS,
    FeatureNet,
    LlmGuidedAutoencoder,
    PatchDiscriminator,
    commitment_loss,
    dynamic_weight,
    hinge_discriminator,
    hinge_generator,
    load_autoencoder,
    semantic_loss,
    total_loss,
    train_autoencoder,
    vqgan_loss,
)
from codebook import LlmCodebook, quantize_pyramid, synthetic_codebook
from ctdata import CtImage
from formats.checkpoint import payload_hash
from scorer import CandidatePool, SyntheticScorer
from trainer import make_scheduler
from validator import ConfigError, NonFiniteLossError, ValidationError

LOG1P_EXP_M1 = math.log1p(math.exp(-1.0))


def _pool(*ids, layer=1):
    return CandidatePool(layer=layer, threshold=0.9, token_ids=tuple(ids))


def _zero_grid(dtype=torch.float64):
    return torch.zeros(1, 1, 1, 1, dtype=dtype)


class TestSemanticLoss:
    def test_single_member_pool(self, binary_codebook):
        loss = semantic_loss([_zero_grid()], [[_pool(0)]], binary_codebook)
        assert loss.item() == pytest.approx(0.31326, abs=1e-5)
        assert loss.item() == pytest.approx(LOG1P_EXP_M1, abs=1e-12)

    def test_two_member_pool(self, binary_codebook):
        loss = semantic_loss([_zero_grid()], [[_pool(0, 1)]], binary_codebook)
        assert loss.item() == pytest.approx(0.81326, abs=1e-5)

    def test_equidistant_tokens_give_log_vocab(self):
        # identity rows are all at distance 1 from the origin
        cb = LlmCodebook([f"t{i}" for i in range(8)], np.eye(8))
        loss = semantic_loss([torch.zeros(1, 8, 2, 2, dtype=torch.float64)], [[_pool(3)]], cb)
        assert loss.item() == pytest.approx(math.log(8), abs=1e-9)

    def test_averages_layers(self, binary_codebook):
        coarse = _zero_grid()
        fine = torch.ones(1, 1, 2, 2, dtype=torch.float64)
        pools = [[_pool(0, layer=1), _pool(1, layer=2)]]
        loss = semantic_loss([coarse, fine], pools, binary_codebook)
        # z = 1 against pool {b} is the mirror image of z = 0 against {a}
        assert loss.item() == pytest.approx(LOG1P_EXP_M1, abs=1e-12)

    def test_pool_count_mismatch(self, binary_codebook):
        with pytest.raises(ValidationError, match="batch holds 1"):
            semantic_loss([_zero_grid()], [[_pool(0)], [_pool(0)]], binary_codebook)

    def test_layer_count_mismatch(self, binary_codebook):
        with pytest.raises(ValidationError, match="1 pool"):
            semantic_loss([_zero_grid(), _zero_grid()], [[_pool(0)]], binary_codebook)

    def test_gradcheck(self, small_codebook):
        z = torch.randn(2, 8, 2, 2, dtype=torch.float64, requires_grad=True)
        pools = [[_pool(1, 5, 9)], [_pool(0)]]
        assert torch.autograd.gradcheck(lambda t: semantic_loss([t], pools, small_codebook), (z,))


class TestWeighting:
    def test_dynamic_weight(self):
        assert dynamic_weight(2.0, 0.5) == pytest.approx(4.0)
        assert dynamic_weight(1.0, 0.0) == pytest.approx(1e8)

    def test_total_is_scaled_vqgan(self):
        omega = dynamic_weight(2.0, 0.5)
        assert total_loss(2.0, 0.5, omega, 0.3) == pytest.approx(2.6)
        assert total_loss(2.0, 0.5, omega, 0.3) == pytest.approx(1.3 * 2.0)

    def test_zero_semantic(self):
        omega = dynamic_weight(2.0, 0.0)
        assert total_loss(2.0, 0.0, omega, 0.3) == 2.0

    def test_omega_carries_no_gradient(self):
        v = torch.tensor(2.0, requires_grad=True)
        s = torch.tensor(0.5, requires_grad=True)
        total_loss(v, s, dynamic_weight(v, s), 0.3).backward()
        assert v.grad.item() == pytest.approx(1.0)
        assert s.grad.item() == pytest.approx(0.3 * 4.0)

    def test_total_identity_on_random_draws(self):
        rng = np.random.default_rng(2)
        for vqgan, sem, alpha in zip(rng.uniform(1e-3, 10.0, 100), rng.uniform(1e-6, 5.0, 100),
                                     rng.uniform(0.0, 1.0, 100)):
            omega = dynamic_weight(vqgan, sem)
            assert total_loss(vqgan, sem, omega, alpha) == pytest.approx((1 + alpha) * vqgan, rel=1e-9)

    def test_tiny_semantic_is_floored(self):
        omega = dynamic_weight(2.0, 1e-10)
        assert omega == pytest.approx(2e8)
        assert total_loss(2.0, 1e-10, omega, 0.3) == pytest.approx(2.0 + 0.3 * 2e8 * 1e-10)

    def test_weight_from_graph_tensors_is_silent(self):
        v = torch.tensor(2.0, requires_grad=True) * 1.0
        s = torch.tensor(0.5, requires_grad=True) * 1.0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            omega = dynamic_weight(v, s)
        assert type(omega) is float
        assert omega == pytest.approx(4.0)


class TestVqganTerms:
    def test_commitment_matches_naive(self, binary_codebook):
        z = torch.full((1, 1, 1, 1), 0.2, dtype=torch.float64)
        pyr = quantize_pyramid(z, binary_codebook, [(1, 1)])
        assert commitment_loss(z, pyr).item() == pytest.approx(0.04)

    def test_commitment_sums_layers(self, small_codebook):
        z = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        pyr = quantize_pyramid(z, small_codebook, [(1, 1), (4, 4)])
        naive = sum(((z - c) ** 2).mean() for c in pyr.cumulative)
        assert commitment_loss(z, pyr).item() == pytest.approx(naive.item(), rel=1e-12)

    def test_commitment_gradient_only_to_encoder(self, small_codebook):
        z = torch.randn(1, 8, 2, 2, dtype=torch.float64, requires_grad=True)
        pyr = quantize_pyramid(z, small_codebook, [(2, 2)])
        assert torch.autograd.gradcheck(lambda t: commitment_loss(t, pyr), (z,))

    def test_optional_networks_are_zero(self, binary_codebook):
        y = torch.rand(1, 1, 4, 4)
        z = torch.zeros(1, 1, 1, 1)
        terms = vqgan_loss(y, y, z, quantize_pyramid(z, binary_codebook, [(1, 1)]))
        assert (terms.recon.item(), terms.gan.item(), terms.perceptual.item()) == (0.0, 0.0, 0.0)

    def test_shape_mismatch(self, binary_codebook):
        z = torch.zeros(1, 1, 1, 1)
        pyr = quantize_pyramid(z, binary_codebook, [(1, 1)])
        with pytest.raises(ValidationError, match="Shape mismatch"):
            vqgan_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 8, 8), z, pyr)

    def test_hinge(self):
        assert hinge_generator(torch.tensor([0.5, 1.5])).item() == pytest.approx(-1.0)
        real, fake = torch.tensor([2.0, 0.0]), torch.tensor([-2.0, 0.5])
        assert hinge_discriminator(real, fake).item() == pytest.approx(0.5 + 0.75)

    def test_perceptual_distance(self):
        net = FeatureNet()
        x = torch.rand(1, 1, 32, 32)
        assert net.distance(x, x).item() == 0.0
        assert net.distance(x, 1 - x).item() > 0.0
        assert not any(p.requires_grad for p in net.parameters())

    def test_feature_net_is_seed_fixed(self):
        a, b = FeatureNet(), FeatureNet()
        x = torch.rand(1, 1, 16, 16)
        torch.testing.assert_close(a.features(x)[-1], b.features(x)[-1])


class TestModel:
    @pytest.mark.parametrize("size,latent", [(64, 4), (128, 8)])
    def test_shapes(self, tiny_ae_config, small_codebook, size, latent):
        torch.manual_seed(0)
        model = LlmGuidedAutoencoder(tiny_ae_config, small_codebook)
        rec, z, pyramid = model(torch.rand(2, 1, size, size))
        assert rec.shape == (2, 1, size, size)
        assert z.shape == (2, 8, latent, latent)
        assert pyramid.finest.shape == z.shape
        assert 0.0 <= rec.min().item() and rec.max().item() <= 1.0

    def test_codebook_receives_no_gradient(self, tiny_ae_config, small_codebook):
        model = LlmGuidedAutoencoder(tiny_ae_config, small_codebook)
        rec, z, pyramid = model(torch.rand(1, 1, 32, 32))
        loss = rec.mean() + semantic_loss(pyramid.pooled, [[_pool(0)]], small_codebook)
        loss.backward()
        assert small_codebook.embeddings.grad is None
        assert model.encoder.conv_in.weight.grad is not None

    def test_latent_dim_must_match_codebook(self, tiny_ae_config, small_codebook):
        with pytest.raises(ConfigError, match="latent_dim"):
            LlmGuidedAutoencoder(replace(tiny_ae_config, latent_dim=4), small_codebook)

    def test_bad_input(self, tiny_ae_config, small_codebook):
        model = LlmGuidedAutoencoder(tiny_ae_config, small_codebook)
        with pytest.raises(ValidationError, match=r"\(B, 1, H, W\)"):
            model.encode(torch.rand(1, 3, 32, 32))
        with pytest.raises(ValidationError, match="not a multiple of 16"):
            model.encode(torch.rand(1, 1, 40, 40))

    def test_discriminator_patches(self):
        assert PatchDiscriminator(8)(torch.rand(2, 1, 32, 32)).shape == (2, 1, 6, 6)


class TestTraining:
    def _train(self, run_dir, cfg, cb, images):
        return train_autoencoder(images, cb, cfg, SyntheticScorer(cb), run_dir)

    def test_deterministic_checkpoint(self, tmp_path, tiny_ae_config, small_codebook, phantom_pairs):
        images = [p.ndct for p in phantom_pairs]
        before = small_codebook.fingerprint()
        a = self._train(tmp_path / "a", tiny_ae_config, small_codebook, images)
        b = self._train(tmp_path / "b", tiny_ae_config, small_codebook, images)
        assert a.checkpoint.name == "step_000003"
        assert payload_hash(a.checkpoint) == payload_hash(b.checkpoint)
        assert small_codebook.fingerprint() == before

    def test_history_and_checkpoints(self, tmp_path, tiny_ae_config, small_codebook, phantom_pairs):
        result = self._train(tmp_path, tiny_ae_config, small_codebook, [p.ndct for p in phantom_pairs])
        df = result.history.frame()
        assert list(df.columns) == ["step", *HISTORY_COLUMNS, "lr"]
        assert df["step"].tolist() == [1, 2, 3]
        assert df["disc"].tolist()[:2] == [0.0, 0.0]
        assert np.isfinite(df[list(HISTORY_COLUMNS)].to_numpy()).all()
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["step_000002", "step_000003"]

    def test_load_reproduces_encoder(self, tmp_path, tiny_ae_config, small_codebook, phantom_pairs):
        result = self._train(tmp_path, tiny_ae_config, small_codebook, [p.ndct for p in phantom_pairs])
        loaded = load_autoencoder(tmp_path, small_codebook)
        x = torch.rand(1, 1, 32, 32)
        with torch.no_grad():
            torch.testing.assert_close(loaded.encode(x), result.model.encode(x))
        assert not any(p.requires_grad for p in loaded.parameters())

    def test_load_with_other_codebook(self, tmp_path, tiny_ae_config, small_codebook, phantom_pairs):
        self._train(tmp_path, tiny_ae_config, small_codebook, [p.ndct for p in phantom_pairs])
        with pytest.raises(ValidationError, match="trained with codebook"):
            load_autoencoder(tmp_path, synthetic_codebook(64, 8, seed=4))

    def test_discriminator_schedule_starts_with_adversarial_phase(self, tmp_path, tiny_ae_config, small_codebook,
                                                                  phantom_pairs, monkeypatch):
        schedulers = []

        def recording(opt, cfg, steps=None):
            sched = make_scheduler(opt, cfg, steps)
            schedulers.append(sched)
            return sched

        monkeypatch.setattr("autoencoder.make_scheduler", recording)
        cfg = replace(tiny_ae_config, steps=4, disc_start=2, checkpoint_every=4)
        with warnings.catch_warnings():
            warnings.filterwarnings("error", message=".*lr_scheduler.step")
            self._train(tmp_path, cfg, small_codebook, [p.ndct for p in phantom_pairs])
        gen, disc = schedulers
        assert gen.last_epoch == 4
        assert disc.last_epoch == 2
        assert disc.T_max == 2

    def test_image_size_checked(self, tmp_path, tiny_ae_config, small_codebook, ramp_image):
        odd = CtImage(id="odd", pixels=np.zeros((40, 40), dtype=np.float32))
        with pytest.raises(ValidationError, match="not a multiple"):
            self._train(tmp_path, tiny_ae_config, small_codebook, [ramp_image, odd])

    def test_non_finite_dumps_last_good(self, tmp_path, tiny_ae_config, small_codebook, phantom_pairs, monkeypatch):
        monkeypatch.setattr("autoencoder.semantic_loss", lambda *args: torch.tensor(float("nan")))
        with pytest.raises(NonFiniteLossError) as e:
            self._train(tmp_path, tiny_ae_config, small_codebook, [p.ndct for p in phantom_pairs])
        assert e.value.checkpoint.name == "last_good_step_000000"
        assert (e.value.checkpoint / "manifest.txt").exists()
