import csv
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from avsep.ame import build_ame, save_ame_checkpoint
from avsep.audio import mix, read_wav, write_wav
from avsep.cli import main
from avsep.config import DESK
from avsep.scenes import read_dataset
from avsep.training import TrainConfig, build_amnet, save_amnet_checkpoint, write_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--scenes", "6", "--out", str(root / "ds"),
                 "--seed", "11"]) == 0

    torch.manual_seed(0)
    ame = build_ame(DESK, 0.125)
    save_ame_checkpoint(root / "ame.pt", ame, [], {})

    torch.manual_seed(0)
    amnet = build_amnet(DESK, 0.125, motion=ame.motion)
    save_amnet_checkpoint(root / "amnet.pt", amnet, [], {})

    records = read_dataset(root / "ds")
    mixture = mix([records[0].load_audio(), records[1].load_audio()])
    write_wav(root / "mix.wav", mixture, fmt="float32")
    return root


class TestUsageErrors:
    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_unknown_flag(self, capsys):
        assert main(["generate", "--scenes", "3", "--out", "/tmp/x", "--frob"]) == 1

    def test_missing_required_flag(self, capsys):
        assert main(["train-ame", "--out", "x.pt"]) == 1

    def test_no_command(self, capsys):
        assert main([]) == 1


class TestGenerate:
    def test_writes_scene_directories(self, workspace):
        scene_dirs = sorted(p.name for p in (workspace / "ds").iterdir() if p.is_dir())
        assert scene_dirs == [f"scene_{i:04d}" for i in range(6)]
        for p in (workspace / "ds").iterdir():
            if p.is_dir():
                assert (p / "manifest.json").exists()
                assert (p / "audio.wav").exists()
                assert (p / "gt_boxes.csv").exists()
                assert (p / "frames" / "00000.png").exists()

    def test_fixed_seed_is_idempotent(self, tmp_path):
        assert main(["generate", "--scenes", "3", "--out", str(tmp_path / "a"),
                     "--seed", "7"]) == 0
        assert main(["generate", "--scenes", "3", "--out", str(tmp_path / "b"),
                     "--seed", "7"]) == 0
        for i in range(3):
            ma = (tmp_path / "a" / f"scene_{i:04d}" / "manifest.json").read_bytes()
            mb = (tmp_path / "b" / f"scene_{i:04d}" / "manifest.json").read_bytes()
            assert ma == mb
            wa = (tmp_path / "a" / f"scene_{i:04d}" / "audio.wav").read_bytes()
            wb = (tmp_path / "b" / f"scene_{i:04d}" / "audio.wav").read_bytes()
            assert wa == wb

    def test_refuses_existing_dir_without_force(self, tmp_path):
        assert main(["generate", "--scenes", "2", "--out", str(tmp_path / "d"),
                     "--seed", "0"]) == 0
        assert main(["generate", "--scenes", "2", "--out", str(tmp_path / "d"),
                     "--seed", "0"]) == 2
        assert main(["generate", "--scenes", "2", "--out", str(tmp_path / "d"),
                     "--seed", "0", "--force"]) == 0

    def test_same_class_pairs_writes_pairing_file(self, tmp_path):
        assert main(["generate", "--scenes", "8", "--out", str(tmp_path / "p"),
                     "--seed", "3", "--same-class-pairs", "true"]) == 0
        pairs_path = tmp_path / "p" / "pairs.csv"
        assert pairs_path.exists()
        with open(pairs_path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        records = {r.manifest.scene_id: r for r in read_dataset(tmp_path / "p")}
        for row in rows:
            assert (records[row["scene_a"]].timbre_class
                    == records[row["scene_b"]].timbre_class)


class TestTrainCommands:
    def test_missing_config_file_is_runtime_error(self, tmp_path):
        assert main(["train-ame", "--config", str(tmp_path / "nope.cfg"),
                     "--out", str(tmp_path / "m.pt")]) == 2

    def test_train_ame_smoke(self, workspace, tmp_path):
        config = TrainConfig(epochs=1, batch_size=3, seed=0, scale=0.125,
                             dataset=str(workspace / "ds"))
        write_config(tmp_path / "ame.cfg", config)
        assert main(["train-ame", "--config", str(tmp_path / "ame.cfg"),
                     "--out", str(tmp_path / "ame.pt")]) == 0
        assert (tmp_path / "ame.pt").exists()

    def test_train_amnet_smoke(self, workspace, tmp_path):
        config = TrainConfig(epochs=1, batch_size=3, seed=0, scale=0.125,
                             dataset=str(workspace / "ds"),
                             ame_checkpoint=str(workspace / "ame.pt"))
        write_config(tmp_path / "amnet.cfg", config)
        assert main(["train-amnet", "--config", str(tmp_path / "amnet.cfg"),
                     "--out", str(tmp_path / "amnet.pt")]) == 0
        assert (tmp_path / "amnet.pt").exists()
        assert (tmp_path / "amnet_log.csv").exists()
        with open(tmp_path / "amnet_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0].keys()) == ["epoch", "loss_appearance", "loss_motion",
                                        "val_SDR"]

    def test_divergence_aborts_with_exit_2(self, workspace, tmp_path, capsys):
        config = TrainConfig(epochs=2, batch_size=3, seed=0, scale=0.125, lr=1e12,
                             dataset=str(workspace / "ds"),
                             ame_checkpoint=str(workspace / "ame.pt"))
        write_config(tmp_path / "diverge.cfg", config)
        code = main(["train-amnet", "--config", str(tmp_path / "diverge.cfg"),
                     "--out", str(tmp_path / "d.pt")])
        captured = capsys.readouterr()
        assert code == 2
        assert "diverged" in captured.err


class TestSeparateAndLocalize:
    def test_separate_writes_sources_and_panels(self, workspace, tmp_path):
        out = tmp_path / "sep"
        assert main(["separate", "--ckpt", str(workspace / "amnet.pt"),
                     "--mixture", str(workspace / "mix.wav"),
                     "--videos", f"{workspace}/ds/scene_0000,{workspace}/ds/scene_0001",
                     "--out", str(out)]) == 0
        assert (out / "source_0.wav").exists()
        assert (out / "source_1.wav").exists()
        assert (out / "panels.png").exists()
        assert np.load(out / "mask_0.npy").shape == (128, 128)

    def test_separated_magnitudes_within_mixture_support(self, workspace, tmp_path):
        out = tmp_path / "sep2"
        assert main(["separate", "--ckpt", str(workspace / "amnet.pt"),
                     "--mixture", str(workspace / "mix.wav"),
                     "--videos", f"{workspace}/ds/scene_0000,{workspace}/ds/scene_0001",
                     "--out", str(out), "--stage", "appearance"]) == 0
        from avsep.audio import stft, warp_magnitude

        mixture = read_wav(workspace / "mix.wav")
        grid = warp_magnitude(stft(mixture, 510, 173), bins=128, frames=128)
        for n in range(2):
            mask = np.load(out / f"mask_{n}.npy")
            masked = mask * grid.values
            assert np.all((masked == 0) | np.isin(masked, grid.values))

    def test_localize_outputs(self, workspace, tmp_path):
        out = tmp_path / "loc"
        assert main(["localize", "--ckpt", str(workspace / "ame.pt"),
                     "--video", f"{workspace}/ds/scene_0002",
                     "--out", str(out)]) == 0
        hm = np.load(out / "heatmap.npy")
        assert hm.shape == (16, 64, 64)
        assert (out / "overlay_00000.png").exists()
        assert (out / "overlay_00015.png").exists()

    def test_separate_rejects_ame_checkpoint(self, workspace, tmp_path):
        assert main(["separate", "--ckpt", str(workspace / "ame.pt"),
                     "--mixture", str(workspace / "mix.wav"),
                     "--videos", f"{workspace}/ds/scene_0000,{workspace}/ds/scene_0001",
                     "--out", str(tmp_path / "x")]) == 2


class TestEvaluateAndPlot:
    def test_sep2_csv_schema(self, workspace, tmp_path):
        out = tmp_path / "sep2.csv"
        assert main(["evaluate", "--ckpt", str(workspace / "amnet.pt"),
                     "--dataset", str(workspace / "ds"), "--mode", "sep2",
                     "--mixtures", "2", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert {"scene_id", "source_id", "sdr", "sir", "sar"} <= set(rows[0].keys())
        systems = {r["system"] for r in rows}
        assert {"amnet", "appearance", "copy_paste", "oracle_ibm"} <= systems

    def test_sep3_runs(self, workspace, tmp_path):
        out = tmp_path / "sep3.csv"
        assert main(["evaluate", "--ckpt", str(workspace / "amnet.pt"),
                     "--dataset", str(workspace / "ds"), "--mode", "sep3",
                     "--mixtures", "1", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = [r for r in csv.DictReader(fh) if r["system"] == "amnet"
                    and r["scene_id"] not in ("mean_pooled", "mean_by_mixture")]
        assert len(rows) == 3  # one row per source of the 3-mix

    def test_loc_mode(self, workspace, tmp_path):
        out = tmp_path / "loc.csv"
        assert main(["evaluate", "--ckpt", str(workspace / "ame.pt"),
                     "--dataset", str(workspace / "ds"), "--mode", "loc",
                     "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert {"ciou_at_half", "auc"} <= set(rows[0].keys())
        assert any(r["system"] == "uniform_baseline" for r in rows)

    def test_plot_separation_and_golden_bytes(self, workspace, tmp_path):
        csv_path = tmp_path / "r.csv"
        assert main(["evaluate", "--ckpt", str(workspace / "amnet.pt"),
                     "--dataset", str(workspace / "ds"), "--mode", "sep2",
                     "--mixtures", "2", "--out", str(csv_path)]) == 0
        assert main(["plot", "--csv", str(csv_path), "--out", str(tmp_path / "f1")]) == 0
        assert main(["plot", "--csv", str(csv_path), "--out", str(tmp_path / "f2")]) == 0
        names = sorted(p.name for p in (tmp_path / "f1").iterdir())
        assert names == ["separation_sar.png", "separation_sdr.png", "separation_sir.png"]
        for name in names:
            assert ((tmp_path / "f1" / name).read_bytes()
                    == (tmp_path / "f2" / name).read_bytes())

    def test_plot_rejects_empty_csv(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        assert main(["plot", "--csv", str(empty), "--out", str(tmp_path / "x")]) == 2

    def test_plot_reports_bad_row(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("scene_id,source_id,sdr,sir,sar,system\n"
                       "m0,0,1.0,2.0,3.0,amnet\n"
                       "m1,0,oops,2.0,3.0,amnet\n")
        assert main(["plot", "--csv", str(bad), "--out", str(tmp_path / "x")]) == 2
        assert "row 3" in capsys.readouterr().err
