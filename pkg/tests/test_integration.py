"""Integration tests - the default desk preset through the CLI, several minutes on CPU.

Run with: pytest tests/test_integration.py -v -m integration
"""

import math

import pandas as pd
import pytest

import main as cli
from autoencoder import HISTORY_COLUMNS as AE_COLUMNS
from formats.checkpoint import payload_hash
from metrics import read_metrics_csv
from trainer import History, resolve_checkpoint

DESK = """\
run.seed=1
autoencoder.disc_start=250
"""

MODES = ("full", "continuous-only", "discrete-only", "mse-only")
AE_STEPS = 300
DISC_START = 250
TEST_COUNT = 8


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _only(directory, pattern):
    found = sorted(directory.glob(pattern))
    assert len(found) == 1, found
    return found[0]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    config = root / "desk.cfg"
    config.write_text(DESK + f"paths.data={root / 'data'}\npaths.cache={root / 'cache'}\n")
    assert _run("gen-phantoms", "--config", config) == 0
    assert _run("train-ae", "--config", config, "--out", root / "ae") == 0
    ae_run = _only(root / "ae", "*_train-ae")

    denoisers = {}
    for mode in MODES:
        out = root / "dn" / mode
        assert _run("train-denoiser", "--config", config, "--autoencoder", ae_run,
                    "--mode", mode, "--out", out) == 0
        denoisers[mode] = _only(out, "*_train-denoiser")

    labeled = [f"--denoiser={mode}={path}" for mode, path in denoisers.items()]
    assert _run("eval", "--config", config, "--passthrough", *labeled, "--out", root / "eval") == 0
    eval_run = _only(root / "eval", "*_eval")
    psnr = {label: read_metrics_csv(eval_run / f"metrics_{label}.csv")["psnr"].mean
            for label in ("passthrough", *MODES)}
    return {"root": root, "config": config, "ae": ae_run, "denoisers": denoisers,
            "eval": eval_run, "psnr": psnr}


@pytest.mark.integration
class TestDeskPipeline:
    def test_autoencoder_history(self, desk):
        frame = pd.read_csv(desk["ae"] / "history.csv")
        assert len(frame) == AE_STEPS
        assert frame["omega"].gt(0).all()
        assert (frame.loc[frame["step"] <= DISC_START, "disc"] == 0).all()
        assert frame.loc[frame["step"] > DISC_START, "disc"].ne(0).any()

    def test_reconstruction_halves(self, desk):
        frame = pd.read_csv(desk["ae"] / "history.csv")
        history = History(list(AE_COLUMNS), frame.to_dict("records"))
        assert history.moving_average("recon", AE_STEPS) <= 0.5 * history.moving_average("recon", 10)

    def test_mse_decreases(self, desk):
        frame = pd.read_csv(desk["denoisers"]["mse-only"] / "history.csv")
        assert frame["mse"].tail(20).mean() < frame["mse"].head(20).mean()

    @pytest.mark.parametrize("mode", ["full", "discrete-only"])
    def test_discrete_term_fires(self, desk, mode):
        frame = pd.read_csv(desk["denoisers"][mode] / "history.csv")
        assert frame["discrete"].gt(0).any()

    def test_ablation_modes_differ(self, desk):
        hashes = {payload_hash(resolve_checkpoint(path)) for path in desk["denoisers"].values()}
        assert len(hashes) == len(MODES)

    def test_every_mode_beats_noisy_input(self, desk):
        for mode in MODES:
            assert desk["psnr"][mode] > desk["psnr"]["passthrough"], mode

    def test_full_mode_margin(self, desk):
        assert desk["psnr"]["full"] >= desk["psnr"]["passthrough"] + 2.0

    def test_every_method_evaluated(self, desk):
        summary = (desk["eval"] / "summary.txt").read_text(encoding="utf-8")
        labels = [line.split()[0] for line in summary.splitlines()[2:] if not line.startswith("#")]
        assert labels == ["passthrough", *MODES]
        for label in labels:
            reports = read_metrics_csv(desk["eval"] / f"metrics_{label}.csv")
            assert reports["psnr"].count == TEST_COUNT
            assert math.isfinite(reports["psnr"].mean)
            assert 0.0 < reports["ssim"].mean <= 1.0
            assert 0.0 < reports["fsim"].mean <= 1.0

    def test_explain_defaults_to_two_layers(self, desk):
        out = desk["root"] / "explain"
        assert _run("explain", "--config", desk["config"], "--autoencoder", desk["ae"], "--out", out) == 0
        reports = sorted((_only(out, "*_explain") / "tokens").glob("*.tokens.txt"))
        assert len(reports) == TEST_COUNT
        text = reports[0].read_text(encoding="utf-8")
        assert "(layers 1,2 of 2)" in text
        assert "[layer 2] 4x4" in text
