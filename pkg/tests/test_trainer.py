import math

import numpy as np
import pytest
import torch

from avsep.ame import build_ame, save_ame_checkpoint
from avsep.audio import MagGrid, make_freq_warp
from avsep.config import DESK
from avsep.scenes import sample_manifest, write_dataset
from avsep.training import (
    AmnetModel,
    TrainConfig,
    amnet_loss,
    build_amnet,
    copy_paste_baseline,
    ground_truth_masks,
    load_amnet_checkpoint,
    parse_config,
    sample_pairs,
    save_amnet_checkpoint,
    train_amnet,
    write_config,
)


class TestTrainConfig:
    def test_round_trip(self, tmp_path):
        config = TrainConfig(epochs=3, lr=5e-3, dataset="/data", seed=9,
                             pair_sampler="same-class", log_magnitude=True)
        path = tmp_path / "c.cfg"
        write_config(path, config)
        assert parse_config(path) == config

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs = 3\nwarp_speed = 9\n")
        with pytest.raises(ValueError, match="unknown config key 'warp_speed'"):
            parse_config(path)

    def test_bad_value_reports_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs = 3\nlr = fast\n")
        with pytest.raises(ValueError, match="c.cfg:2"):
            parse_config(path)

    def test_comments_and_blanks_ok(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# experiment\n\nepochs = 2  # short\nseed = 4\n")
        config = parse_config(path)
        assert config.epochs == 2 and config.seed == 4

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError, match="not both zero"):
            TrainConfig(r1=0.0, r2=0.0)
        with pytest.raises(ValueError):
            TrainConfig(r1=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(n_sources=1)
        with pytest.raises(ValueError):
            TrainConfig(pair_sampler="clockwise")


class TestGroundTruthMasks:
    def test_delegates_to_dominance_rule(self):
        warp = make_freq_warp(64, 8)
        a = MagGrid(np.full((8, 8), 0.7), warp)
        b = MagGrid(np.full((8, 8), 0.3), warp)
        masks = ground_truth_masks([a, b])
        assert np.all(masks[0].values == 1.0)
        assert np.all(masks[1].values == 0.0)


class TestAmnetLoss:
    def test_perfect_predictions_near_zero(self):
        targets = torch.randint(0, 2, (2, 2, 1, 8, 8)).float()
        loss = amnet_loss(targets.clone(), targets.clone(), targets, 1.0, 1.0)
        assert 0.0 <= float(loss) < 1e-5

    def test_uniform_half_closed_form(self):
        # p = 0.5 everywhere: each stage contributes N*ln2
        n = 3
        targets = torch.randint(0, 2, (2, n, 1, 8, 8)).float()
        half = torch.full_like(targets, 0.5)
        for r1, r2 in ((1.0, 1.0), (0.5, 2.0), (1.0, 0.0)):
            loss = amnet_loss(half, half, targets, r1, r2)
            assert float(loss) == pytest.approx((r1 + r2) * n * math.log(2), rel=1e-6)

    def test_zero_r2_blocks_motion_gradient(self):
        targets = torch.randint(0, 2, (1, 2, 1, 4, 4)).float()
        app = torch.rand(1, 2, 1, 4, 4, requires_grad=True)
        mot = torch.rand(1, 2, 1, 4, 4, requires_grad=True)
        loss = amnet_loss(app * 0.98 + 0.01, mot * 0.98 + 0.01, targets, 1.0, 0.0)
        loss.backward()
        assert mot.grad is None or torch.all(mot.grad == 0)
        assert app.grad is not None and torch.any(app.grad != 0)

    def test_shape_mismatch_rejected(self):
        t = torch.rand(1, 2, 1, 4, 4)
        with pytest.raises(ValueError):
            amnet_loss(t, torch.rand(1, 2, 1, 4, 5), t, 1.0, 1.0)


class TestCopyPaste:
    def test_outputs_equal_mixture(self):
        warp = make_freq_warp(64, 8)
        x = MagGrid(np.random.default_rng(0).random((8, 8)), warp)
        outs = copy_paste_baseline(x, n_sources=3)
        assert len(outs) == 3
        for o in outs:
            assert np.array_equal(o.values, x.values)


class TestSamplePairs:
    def test_uniform_pairs_distinct_indices(self):
        rng = np.random.default_rng(1)
        pairs = sample_pairs(10, 50, rng, 2)
        assert len(pairs) == 50
        assert all(len(set(p)) == 2 for p in pairs)

    def test_same_class_restriction(self):
        rng = np.random.default_rng(2)
        classes = ["a", "a", "b", "b", "b", "c"]
        pairs = sample_pairs(6, 30, rng, 2, classes=classes, same_class=True)
        for i, j in pairs:
            assert classes[i] == classes[j]

    def test_same_class_impossible_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError, match="enough scenes"):
            sample_pairs(3, 5, rng, 2, classes=["a", "b", "c"], same_class=True)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("amnetds")
    rng = np.random.default_rng(20)
    manifests = [sample_manifest(f"scene_{i:04d}", rng) for i in range(20)]
    write_dataset(manifests, root / "ds")
    return root / "ds"


@pytest.fixture(scope="module")
def tiny_ame_ckpt(tmp_path_factory):
    torch.manual_seed(0)
    model = build_ame(DESK, 0.125)
    path = tmp_path_factory.mktemp("ame") / "ame.pt"
    save_ame_checkpoint(path, model, [], {})
    return path


class TestTrainAmnet:
    def test_smoke_epoch_and_checkpoint_probe(self, small_dataset, tiny_ame_ckpt, tmp_path):
        config = TrainConfig(epochs=1, batch_size=4, seed=0, scale=0.125,
                             dataset=str(small_dataset),
                             ame_checkpoint=str(tiny_ame_ckpt))
        out = tmp_path / "amnet.pt"
        model, history = train_amnet(config, out_path=out, log=lambda *a: None)
        assert len(history) == 1
        assert np.isfinite(history[0]["loss_appearance"])
        assert np.isfinite(history[0]["val_SDR"])
        assert out.exists()
        assert (tmp_path / "amnet_log.csv").exists()

        loaded, payload = load_amnet_checkpoint(out)
        assert payload["kind"] == "amnet"
        # bit-for-bit forward reproducibility on a probe batch
        rng = np.random.default_rng(5)
        keyframes = torch.from_numpy(rng.random((1, 2, 3, 64, 64)).astype(np.float32))
        grids = torch.from_numpy(rng.random((1, 1, 128, 128)).astype(np.float32))
        tokens = torch.from_numpy(
            rng.random((1, 2, 4, loaded.ssr_encoder.out_channels)).astype(np.float32))
        model.eval()
        with torch.no_grad():
            a = model.forward_pair(keyframes, grids, tokens)
            b = loaded.forward_pair(keyframes, grids, tokens)
        assert torch.equal(a["motion_logits"], b["motion_logits"])
        assert torch.equal(a["appearance_logits"], b["appearance_logits"])

    def test_motion_encoder_frozen_by_default(self, small_dataset, tiny_ame_ckpt):
        config = TrainConfig(epochs=1, batch_size=4, seed=1, scale=0.125,
                             dataset=str(small_dataset),
                             ame_checkpoint=str(tiny_ame_ckpt))
        model, _ = train_amnet(config, log=lambda *a: None)
        from avsep.ame import load_ame_checkpoint

        reference, _ = load_ame_checkpoint(tiny_ame_ckpt)
        for p, q in zip(model.motion.parameters(), reference.motion.parameters()):
            assert torch.equal(p, q)

    def test_zero_lr_keeps_parameters(self, small_dataset, tiny_ame_ckpt):
        # lr must be positive by config contract; emulate "no learning" with
        # a tiny epsilon step being different from zero is not the contract,
        # so drive SGD directly instead
        config = TrainConfig(epochs=1, batch_size=4, seed=2, scale=0.125,
                             dataset=str(small_dataset),
                             ame_checkpoint=str(tiny_ame_ckpt))
        torch.manual_seed(config.seed)
        model = build_amnet(DESK, 0.125)
        before = [p.clone() for p in model.appearance.parameters()]
        optimizer = torch.optim.SGD(model.appearance.parameters(), lr=0.0,
                                    momentum=0.9, weight_decay=0.0)
        out = model.appearance(torch.rand(2, 3, 64, 64))
        out.sum().backward()
        optimizer.step()
        for p, q in zip(model.appearance.parameters(), before):
            assert torch.equal(p, q)

    def test_scale_mismatch_with_ame_rejected(self, small_dataset, tiny_ame_ckpt):
        config = TrainConfig(epochs=1, batch_size=4, scale=0.25,
                             dataset=str(small_dataset),
                             ame_checkpoint=str(tiny_ame_ckpt))
        with pytest.raises(ValueError, match="width scale"):
            train_amnet(config, log=lambda *a: None)

    def test_determinism_same_seed(self, small_dataset, tiny_ame_ckpt):
        config = TrainConfig(epochs=1, batch_size=4, seed=3, scale=0.125,
                             dataset=str(small_dataset),
                             ame_checkpoint=str(tiny_ame_ckpt))
        m1, h1 = train_amnet(config, log=lambda *a: None)
        m2, h2 = train_amnet(config, log=lambda *a: None)
        assert h1 == h2
        for p, q in zip(m1.amt.parameters(), m2.amt.parameters()):
            assert torch.equal(p, q)
