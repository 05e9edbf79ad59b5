import json
import os

import pandas as pd
import pytest

from satem_denoise.cli import file_sha256, main, manifest_path
from satem_denoise.data import dataset_read
from satem_denoise.model import load_training_state

TOY_CONFIG = """\
data.n_gates = 16
train.n_blocks = 1
train.channels = 4
train.cover_length = 2
train.hidden_mult = 1
train.club_hidden = 4
train.batch_size = 4
train.epochs = 2
train.checkpoint_every = 1
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY_CONFIG)
    return str(path)


def run(config, *args):
    return main(["--config", config, "--log-level", "WARNING", *args])


@pytest.fixture
def dataset(tmp_path, config):
    out = str(tmp_path / "train.ds")
    assert run(config, "gen-data", "--out", out, "--count", "8", "--seed", "5") == 0
    return out


@pytest.fixture
def checkpoint(tmp_path, config, dataset):
    out = str(tmp_path / "model.ckpt")
    assert run(config, "train", "--dataset", dataset, "--out", out) == 0
    return out


def read_manifest(out):
    with open(manifest_path(out)) as f:
        return json.load(f)


def test_gen_data(dataset):
    loaded = dataset_read(dataset)
    assert len(loaded) == 8
    assert loaded.n_gates == 16
    assert loaded.seed == 5
    manifest = read_manifest(dataset)
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 5
    assert manifest["hashes"][dataset] == file_sha256(dataset)
    assert manifest["config"]["data"]["n_gates"] == 16


def test_gen_data_is_reproducible(tmp_path, config, dataset):
    again = str(tmp_path / "again.ds")
    assert run(config, "gen-data", "--out", again, "--count", "8", "--seed", "5") == 0
    with open(dataset, "rb") as a, open(again, "rb") as b:
        assert a.read() == b.read()


def test_gen_data_from_forward_csv(tmp_path, config):
    forward = tmp_path / "forward.csv"
    forward.write_text("time_s,value\n1e-4,5\n2e-4,2\n4e-4,1\n\n1e-4,8\n2e-4,3\n4e-4,1\n")
    out = str(tmp_path / "forward.ds")
    assert run(config, "gen-data", "--out", out, "--forward-csv", str(forward)) == 0
    loaded = dataset_read(out)
    assert len(loaded) == 2
    assert list(loaded.clean[1]) == [8.0, 3.0, 1.0]
    assert str(forward) in read_manifest(out)["inputs"]


def test_train(tmp_path, checkpoint):
    model, extra, meta = load_training_state(checkpoint)
    assert model.config.channels == 4
    assert meta["epoch"] == 2
    assert meta["step"] == 4
    assert meta["data"] == {"eps": 0.01, "scale": 1.0, "n_gates": 16}
    assert any(k.startswith("adam.m.") for k in extra)
    losses = pd.read_csv(f"{checkpoint}.losses.csv")
    assert list(losses.columns) == ["step", "L_clean", "L_noise", "L_kl", "L_club", "total"]
    assert list(losses["step"]) == [1, 2, 3, 4]
    assert read_manifest(checkpoint)["command"] == "train"


def test_training_is_reproducible(tmp_path, config, dataset, checkpoint):
    again = str(tmp_path / "again.ckpt")
    assert run(config, "train", "--dataset", dataset, "--out", again) == 0
    first = pd.read_csv(f"{checkpoint}.losses.csv")
    second = pd.read_csv(f"{again}.losses.csv")
    pd.testing.assert_frame_equal(first, second)


def test_train_resume(tmp_path, config, dataset):
    out = str(tmp_path / "short.ckpt")
    assert run(config, "--set", "train.epochs=1", "train", "--dataset", dataset, "--out", out) == 0
    assert load_training_state(out)[2]["epoch"] == 1

    resumed = str(tmp_path / "resumed.ckpt")
    args = ["train", "--dataset", dataset, "--out", resumed, "--resume", out]
    assert run(config, *args, "--loss-csv", f"{out}.losses.csv") == 0
    _, _, meta = load_training_state(resumed)
    assert meta["epoch"] == 2
    assert meta["step"] == 4
    assert list(pd.read_csv(f"{out}.losses.csv")["step"]) == [1, 2, 3, 4]


def test_denoise_eval_swap(tmp_path, config, dataset, checkpoint):
    pytest.importorskip("uncertainties")
    denoised = str(tmp_path / "denoised")
    args = ["denoise", "--checkpoint", checkpoint, "--dataset", dataset, "--out", denoised]
    assert run(config, *args) == 0
    files = sorted(os.listdir(denoised))
    assert files[:8] == [f"record_{i:05d}.csv" for i in range(8)]
    frame = pd.read_csv(os.path.join(denoised, "record_00003.csv"))
    assert list(frame.columns) == ["time_s", "noisy", "denoised", "clean"]
    assert len(frame) == 16
    assert os.path.exists(os.path.join(denoised, "run.manifest.json"))

    report = str(tmp_path / "report")
    assert run(config, "eval", "--denoised", denoised, "--out", report, "--bins", "4") == 0
    records = pd.read_csv(os.path.join(report, "report.csv"))
    assert list(records.columns) == ["record_id", "mse", "snr_db", "ssim"]
    assert len(records) == 8
    summary = pd.read_csv(os.path.join(report, "summary.csv"))
    assert list(summary["metric"]) == ["mse", "snr_db", "ssim"]
    gain = pd.read_csv(os.path.join(report, "snr_gain.csv"))
    assert list(gain.columns) == ["record_id", "snr_noisy_db", "snr_denoised_db", "snr_gain_db"]

    against_dataset = str(tmp_path / "report2")
    args = ["eval", "--denoised", denoised, "--dataset", dataset, "--out", against_dataset]
    assert run(config, *args) == 0
    again = pd.read_csv(os.path.join(against_dataset, "report.csv"))
    assert again["mse"].tolist() == pytest.approx(records["mse"].tolist())

    swap = str(tmp_path / "swap")
    args = ["swap-test", "--checkpoint", checkpoint, "--dataset", dataset, "--out", swap]
    assert run(config, *args) == 0
    table = pd.read_csv(os.path.join(swap, "swap_report.csv"))
    assert len(table) == 8
    assert len([c for c in table.columns if c.startswith("mse_")]) == 8
    assert "mse_gn_s2n1_noisy" in table.columns
    assert os.path.exists(os.path.join(swap, "swap_hist_gn_s2n1_noisy.csv"))


def test_bench_kernel(tmp_path, config):
    out = str(tmp_path / "bench.csv")
    args = ["bench-kernel", "--lengths", "8,16", "--channels", "2", "--repeats", "1"]
    assert run(config, *args, "--out", out) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["T", "impl", "seconds"]
    assert sorted(frame["impl"].unique()) == ["naive", "scan"]
    assert len(frame) == 4


def test_missing_dataset_fails(tmp_path, config):
    out = str(tmp_path / "model.ckpt")
    assert run(config, "train", "--dataset", str(tmp_path / "nope.ds"), "--out", out) == 1
    assert not os.path.exists(out)


def test_gate_count_mismatch_fails(tmp_path, config, dataset):
    out = str(tmp_path / "model.ckpt")
    assert run(config, "--set", "data.n_gates=20", "train", "--dataset", dataset, "--out", out) == 1


def test_unknown_config_key_fails(tmp_path, config):
    out = str(tmp_path / "x.ds")
    assert run(config, "--set", "train.width=3", "gen-data", "--out", out, "--count", "1") == 1


def test_corrupt_checkpoint_fails(tmp_path, config, dataset):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    out = str(tmp_path / "denoised")
    assert run(config, "denoise", "--checkpoint", str(bad), "--dataset", dataset, "--out", out) == 1


def test_normalization_mismatch_fails(tmp_path, config, checkpoint):
    other = str(tmp_path / "other.ds")
    assert run(config, "--set", "data.eps=0.1", "gen-data", "--out", other, "--count", "2") == 0
    out = str(tmp_path / "denoised")
    assert run(config, "denoise", "--checkpoint", checkpoint, "--dataset", other, "--out", out) == 1


def test_eval_without_truth_fails(tmp_path, config):
    denoised = tmp_path / "denoised"
    denoised.mkdir()
    pd.DataFrame({"time_s": [1e-4, 2e-4], "denoised": [1.0, 0.5]}).to_csv(
        denoised / "record_00000.csv", index=False
    )
    assert run(config, "eval", "--denoised", str(denoised), "--out", str(tmp_path / "r")) == 1


def test_bad_lengths_rejected(tmp_path, config):
    with pytest.raises(SystemExit):
        run(config, "bench-kernel", "--lengths", "8,x", "--out", str(tmp_path / "b.csv"))


def test_subcommand_required():
    with pytest.raises(SystemExit):
        main([])
