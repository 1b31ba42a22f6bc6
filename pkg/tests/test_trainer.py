"""Tests for src/trainer.py."""

import numpy as np
import pandas as pd
import pytest
import torch
from torch import nn

from config import DenoiserConfig
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
    module_hash,
    resolve_checkpoint,
    save_checkpoint,
    seed_everything,
)
from validator import MissingPrerequisiteError, NonFiniteLossError


def _net(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(nn.Conv2d(1, 2, 3), nn.ReLU(), nn.Conv2d(2, 1, 1))


class TestSeeding:
    def test_same_seed_same_weights(self):
        seed_everything(4)
        a = module_hash(nn.Linear(3, 3))
        seed_everything(4)
        assert module_hash(nn.Linear(3, 3)) == a

    def test_freeze(self):
        net = freeze(_net())
        assert not any(p.requires_grad for p in net.parameters())
        assert not net.training


class TestSchedule:
    def test_cosine_reaches_floor(self):
        cfg = DenoiserConfig(lr=1e-3, lr_min=1e-5, steps=10)
        opt = make_optimizer(_net().parameters(), cfg)
        sched = make_scheduler(opt, cfg)
        assert opt.param_groups[0]["betas"] == (0.9, 0.99)
        for _ in range(10):
            opt.step()
            sched.step()
        assert opt.param_groups[0]["lr"] == pytest.approx(1e-5)


class TestCheckpoints:
    def test_save_and_reload(self, tmp_path):
        net = _net(1)
        directory = save_checkpoint(checkpoint_dir(tmp_path, 20), "denoiser", 20, 1, {"model": net},
                                    meta={"mode": "full"})
        assert directory.name == "step_000020"
        ckpt = load_checkpoint(tmp_path, "denoiser")
        fresh = load_module_arrays(_net(2), ckpt.tensors, "model")
        assert module_hash(fresh) == module_hash(net)

    def test_latest_step_wins(self, tmp_path):
        for step in (5, 10):
            save_checkpoint(checkpoint_dir(tmp_path, step), "denoiser", step, 0, {"model": _net()})
        assert resolve_checkpoint(tmp_path).name == "step_000010"

    def test_kind_mismatch(self, tmp_path):
        save_checkpoint(checkpoint_dir(tmp_path, 1), "autoencoder", 1, 0, {"model": _net()})
        with pytest.raises(MissingPrerequisiteError, match="expected 'denoiser'"):
            load_checkpoint(tmp_path, "denoiser")

    def test_nothing_to_resolve(self, tmp_path):
        with pytest.raises(MissingPrerequisiteError, match="No checkpoint found"):
            resolve_checkpoint(tmp_path)

    def test_missing_prefix(self, tmp_path):
        save_checkpoint(checkpoint_dir(tmp_path, 1), "denoiser", 1, 0, {"model": _net()})
        ckpt = load_checkpoint(tmp_path, "denoiser")
        with pytest.raises(MissingPrerequisiteError, match="no tensors for 'disc'"):
            load_module_arrays(_net(), ckpt.tensors, "disc")


class TestHistory:
    def test_csv_columns(self, tmp_path):
        h = History(["mse", "total"])
        h.append(1, {"mse": 0.5, "total": 0.7, "extra": 9.0}, lr=1e-4)
        h.append(2, {"mse": 0.25, "total": 0.3}, lr=9e-5)
        df = pd.read_csv(h.write(tmp_path / "logs" / "history.csv"))
        assert list(df.columns) == ["step", "mse", "total", "lr"]
        assert df["mse"].tolist() == [0.5, 0.25]

    def test_moving_average(self):
        h = History(["total"])
        for step in range(1, 21):
            h.append(step, {"total": float(step)}, lr=0.0)
        assert h.moving_average("total", 20) == pytest.approx(15.5)
        assert h.moving_average("total", 3, window=10) == pytest.approx(2.0)
        assert np.isnan(h.moving_average("total", 0))


class TestGuardFinite:
    def test_finite_passes(self):
        guard_finite({"total": 1.0}, dump=lambda: pytest.fail("dumped"))

    def test_dumps_then_raises(self, tmp_path, capsys):
        target = tmp_path / "last_good"
        with pytest.raises(NonFiniteLossError) as e:
            guard_finite({"recon": 0.1, "total": float("nan")}, dump=lambda: target)
        assert e.value.component == "total"
        assert e.value.checkpoint == target
        assert "last-good" in capsys.readouterr().out


def test_cycle_restarts():
    it = cycle([1, 2])
    assert [next(it) for _ in range(5)] == [1, 2, 1, 2, 1]
