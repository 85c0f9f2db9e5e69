import json
import math
from pathlib import Path

import numpy as np
import pytest

import pytoast

ROOT = Path(__file__).resolve().parents[2]
MNIST = ROOT / "data" / "mnist-subset"


def tiny_config(out):
    cfg = pytoast.load_config(ROOT / "configs" / "desk.json")
    cfg["name"] = "tiny"
    cfg["output_dir"] = str(out)
    cfg["dataset"].update(root=str(MNIST), train_limit=400, test_limit=200, val_limit=100)
    cfg["codec"].update(dims=[16, 32], depths=[1, 1], heads=[2, 4], latent=[6, 6, 8])
    cfg["denoiser"].update(width=16, blocks=1, time_dim=16)
    cfg["denoiser"]["train"]["steps"] = 2
    cfg["denoiser"]["eval"]["steps"] = 2
    cfg["classifier"]["hidden"] = [32]
    cfg["optimizer"].update(epochs=1, batch_size=50)
    cfg["eval"].update(snrs=[0, 20], batch_size=100)
    for spec in cfg["adapt"]["ranks"].values():
        spec.update(rank=4, scale_hat=4.0)
    return cfg


def test_channel_snr_and_determinism():
    rng = np.random.default_rng(0)
    z = pytoast.normalize_power(rng.standard_normal((4, 20000)).astype(np.float32))
    assert np.allclose((z.astype(np.float64) ** 2).mean(axis=1), 1.0, atol=1e-5)
    for kind in pytoast.channel_kinds():
        y, info = pytoast.apply_channel(z, kind, snr_db=10.0, seed=3)
        noise = info["noise"].astype(np.float64)
        measured = 10 * math.log10(1.0 / (noise ** 2).mean())
        assert abs(measured - 10.0) < 0.5, kind
        y2, _ = pytoast.apply_channel(z, kind, snr_db=10.0, seed=3)
        assert np.array_equal(y, y2)
    _, info = pytoast.apply_channel(z, "impulse", seed=1)
    assert abs(info["impulse_rate"] - 0.01) < 0.003
    assert pytoast.snr_to_sigma(20.0) == pytest.approx(0.1)


def test_hand_examples():
    r = pytoast.compute_reward(1.0, 0.94, 0.50, 0.52, [0.3] * 20)
    assert r["total"] == pytest.approx(0.58, abs=1e-12)
    assert pytoast.lambda_entropy([0.05 + 0.1 * i for i in range(10)]) == pytest.approx(math.log(10))
    assert pytoast.epsilon_at(0) == 1.0
    assert pytoast.epsilon_at(50000) == pytest.approx(0.05)
    rep = pytoast.param_report([("Encoder", 12.54e6, 460.80e3)], 35.99e6, 798.72e3)
    assert f"{rep['reduction']:.2f}" == "45.06"
    assert f"{rep['percent']:.2f}" == "2.22"
    assert pytoast.cosine_lr(1e-4, 1e-6, 50, 0) == pytest.approx(1e-4)
    assert pytoast.cosine_lr(1e-4, 1e-6, 50, 49) == pytest.approx(1e-6)
    grid = pytoast.sigma_grid(1.5, 18)
    assert len(grid) == 19 and grid[0] == 1.5 and grid[-1] == 0.0
    assert pytoast.precondition(0.0)["c_in"] == pytest.approx(2.0)


def test_metrics():
    rng = np.random.default_rng(1)
    x = rng.random((2, 1, 16, 16), dtype=np.float32)
    assert pytoast.ssim(x, x) == pytest.approx(1.0)
    noisy = np.clip(x + 0.1, 0, 1).astype(np.float32)
    mse = ((x.astype(np.float64) - noisy) ** 2).mean()
    assert pytoast.psnr(x, noisy) == pytest.approx(10 * math.log10(1 / mse), rel=1e-5)
    assert pytoast.accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == pytest.approx(0.75)
    assert pytoast.f1_macro([0, 0, 1], [0, 0, 1]) == 1.0


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {"epochs": "many"}}))
    with pytest.raises(pytoast.ConfigError):
        pytoast.load_config(bad)
    cfg = pytoast.load_config(ROOT / "configs" / "full.json")
    cfg["optimizer"]["lr_end"] = 1.0
    with pytest.raises(pytoast.ConfigError):
        pytoast.validate_config(cfg)
    with pytest.raises(pytoast.Error):
        pytoast.Model(tmp_path / "missing.ckpt")


def test_train_eval_adapt_report(tmp_path):
    out = tmp_path / "run"
    summaries = pytoast.train(tiny_config(out))
    assert len(summaries) == 1
    assert summaries[0]["max_grad_norm_clipped"] <= 1.0 + 1e-6
    assert (out / "metrics.csv").exists() and (out / "train_log.csv").exists()

    model = pytoast.Model(out / "checkpoint.ckpt")
    assert model.epoch == 1
    rows = model.evaluate(channels=["awgn", "rayleigh"], snrs=[0, 20])
    assert [(r["channel"], r["snr_db"]) for r in rows] == [
        ("awgn", 0), ("awgn", 20), ("rayleigh", 0), ("rayleigh", 20)]
    assert rows == model.evaluate(channels=["awgn", "rayleigh"], snrs=[0, 20])

    images = np.zeros((3, 1, 28, 28), dtype=np.float32)
    x_hat, logits = model.transmit(images, "awgn", 10.0, seed=5)
    assert x_hat.shape == (3, 1, 28, 28) and logits.shape == (3, 10)
    assert x_hat.min() >= 0 and x_hat.max() <= 1

    fp = model.fingerprint
    res = pytoast.adapt(out / "checkpoint.ckpt", "rayleigh", fraction=0.05, max_epochs=1, library=tmp_path / "lib")
    assert res["base_unchanged"]
    assert 0 < res["trainable_fraction"] <= 0.05
    assert Path(res["saved_to"]).exists()
    assert pytoast.Model(out / "checkpoint.ckpt").fingerprint == fp

    rep = pytoast.report([out / "metrics.csv"], tmp_path / "report", [out / "train_log.csv"])
    assert rep["rows"] == 1
    assert any(f.endswith("weight_trajectory.svg") for f in rep["files"])
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(pytoast.DataError, match="no data"):
        pytoast.report([empty], tmp_path / "r2")
