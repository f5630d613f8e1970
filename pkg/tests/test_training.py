import os

import numpy as np
import pytest
import torch

from nde import data, training
from nde.errors import CheckpointError, ConfigurationError, TrainingDivergedError
from nde.utils import state_dict_digest

from .test_dataset import make_corpus


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinycorpus")
    make_corpus(str(root), n_scenes=3, size=(40, 48))
    return data.split_scenes(data.build_manifest(str(root)), seed=0)


def tiny_cfg(**overrides):
    base = dict(crop=32, max_steps=3, feature_base_channels=8, eval_pairs=2, seed=0)
    base.update(overrides)
    return training.TrainConfig(**base)


@pytest.fixture(scope="module")
def stage1_result(tiny_manifest):
    return training.train_stage1(tiny_manifest, tiny_cfg())


@pytest.fixture(scope="module")
def full_ckpt(tiny_manifest, stage1_result):
    return training.train_stage2(tiny_manifest, stage1_result.checkpoint, tiny_cfg()).checkpoint


class TestConfig:
    def test_defaults_match_training_protocol(self):
        cfg = training.TrainConfig()
        assert cfg.learning_rate == 2.5e-4
        assert cfg.batch_size == 2
        assert cfg.crop == 256
        assert cfg.epochs_stage1 == 55
        assert cfg.epochs_stage2 == 25
        assert cfg.base_channels == 32
        assert cfg.enhance_layers == 11
        assert (cfg.lambda_dd, cfg.lambda_nn, cfg.lambda_nd, cfg.lambda_dn) == (1.0, 1.0, 0.01, 0.001)
        assert (cfg.lambda_image, cfg.lambda_illum, cfg.lambda_refl) == (1.0, 0.01, 0.05)
        assert cfg.lambda_feat == 1.0
        assert cfg.layer_weights == (8.0, 4.0, 2.0, 1.0)

    def test_desk_preset(self):
        cfg = training.TrainConfig.desk()
        assert cfg.crop == 96
        assert cfg.max_steps == 50
        assert cfg.learning_rate == 2.5e-4

    def test_from_mapping_overrides_and_coercion(self):
        cfg = training.TrainConfig.from_mapping(
            {"learning_rate": "1e-3", "batch_size": "4", "augment": "false", "layer_weights": "1,2,3,4"}
        )
        assert cfg.learning_rate == 1e-3
        assert cfg.batch_size == 4
        assert cfg.augment is False
        assert cfg.layer_weights == (1.0, 2.0, 3.0, 4.0)

    def test_unknown_key_rejected_with_valid_keys(self):
        with pytest.raises(ConfigurationError, match="learning_rate"):
            training.TrainConfig.from_mapping({"learning_rat": "0.1"})

    def test_config_hash_stable(self):
        assert training.config_hash(training.TrainConfig()) == training.config_hash(training.TrainConfig())
        assert training.config_hash(training.TrainConfig()) != training.config_hash(training.TrainConfig(seed=1))


class TestStage1:
    def test_zero_learning_rate_leaves_weights_unchanged(self, tiny_manifest):
        cfg = tiny_cfg(learning_rate=0.0)
        torch.manual_seed(cfg.seed)
        reference, _, _ = training.build_models(cfg)
        before = state_dict_digest(reference.state_dict())
        result = training.train_stage1(tiny_manifest, cfg)
        assert state_dict_digest(result.checkpoint["models"]["decomposition"]) == before

    def test_same_seed_identical_loss_curves(self, tiny_manifest):
        cfg = tiny_cfg()
        a = training.train_stage1(tiny_manifest, cfg)
        b = training.train_stage1(tiny_manifest, cfg)
        assert [(r.loss_name, r.value) for r in a.history] == [(r.loss_name, r.value) for r in b.history]
        assert state_dict_digest(a.checkpoint["models"]["decomposition"]) == state_dict_digest(
            b.checkpoint["models"]["decomposition"]
        )

    def test_writes_checkpoint_and_loss_log(self, tiny_manifest, tmp_path):
        result = training.train_stage1(tiny_manifest, tiny_cfg(), out_dir=str(tmp_path))
        assert os.path.exists(result.path)
        log = (tmp_path / "stage1_losses.csv").read_text().splitlines()
        assert log[0] == "stage,epoch,step,loss_name,value"
        assert any(",decom," in line for line in log[1:])

    def test_checkpoint_resume_matches_uninterrupted_run(self, tiny_manifest, tmp_path):
        straight = training.train_stage1(tiny_manifest, tiny_cfg(max_steps=4))
        first = training.train_stage1(tiny_manifest, tiny_cfg(max_steps=2), out_dir=str(tmp_path))
        resumed = training.train_stage1(tiny_manifest, tiny_cfg(max_steps=4), resume=first.path)
        assert state_dict_digest(resumed.checkpoint["models"]["decomposition"]) == state_dict_digest(
            straight.checkpoint["models"]["decomposition"]
        )

    def test_divergence_guard_dumps_and_raises(self, tmp_path):
        with pytest.raises(TrainingDivergedError):
            training._check_finite(
                torch.tensor(float("nan")), {"stage": "stage1", "step": 7}, str(tmp_path)
            )
        assert (tmp_path / "diverged_stage1_7.json").exists()


class TestStage2:
    def test_freeze_is_bitwise(self, tiny_manifest, stage1_result):
        before = state_dict_digest(stage1_result.checkpoint["models"]["decomposition"])
        result = training.train_stage2(tiny_manifest, stage1_result.checkpoint, tiny_cfg())
        assert state_dict_digest(result.checkpoint["models"]["decomposition"]) == before

    def test_decomposition_receives_no_gradients(self, stage1_result):
        # replicate one stage-2 step by hand: the frozen net must not even
        # allocate gradient buffers while enhancement/dehazing do
        cfg = tiny_cfg()
        decom, enhancer, dehazer = training.build_models(cfg)
        decom.load_state_dict(stage1_result.checkpoint["models"]["decomposition"])
        decom.requires_grad_(False)
        decom.eval()
        s_n = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            r_n, i_n = decom(s_n)
        i_y = enhancer(i_n, r_n)
        r_y = dehazer(r_n)
        (i_y * r_y).mean().backward()
        assert all(p.grad is None for p in decom.parameters())
        assert any(p.grad is not None for p in enhancer.parameters())
        assert any(p.grad is not None for p in dehazer.parameters())

    def test_rejects_checkpoint_without_decomposition(self, tiny_manifest):
        bad = {"version": training.CHECKPOINT_VERSION, "stage": "stage1", "models": {}}
        with pytest.raises(CheckpointError):
            training.train_stage2(tiny_manifest, bad, tiny_cfg())

    def test_history_includes_validation_ssim(self, tiny_manifest, stage1_result):
        result = training.train_stage2(tiny_manifest, stage1_result.checkpoint, tiny_cfg())
        assert any(r.loss_name == "val_ssim" for r in result.history)


class TestInfer:
    def test_pipeline_identity(self, full_ckpt):
        img = np.random.default_rng(0).random((40, 48, 3))
        outs = training.infer(img, full_ckpt)
        assert np.max(np.abs(outs["S_Y"] - np.clip(outs["I_Y"] * outs["R_Y"], 0, 1))) < 1e-6

    def test_output_dims_match_input(self, full_ckpt):
        img = np.random.default_rng(1).random((40, 48, 3))
        outs = training.infer(img, full_ckpt)
        for key in ("S_Y", "R_N", "R_Y"):
            assert outs[key].shape == (40, 48, 3)
        for key in ("I_N", "I_Y"):
            assert outs[key].shape == (40, 48, 1)

    def test_deterministic(self, full_ckpt):
        img = np.random.default_rng(2).random((40, 48, 3))
        a = training.infer(img, full_ckpt)
        b = training.infer(img, full_ckpt)
        assert np.array_equal(a["S_Y"], b["S_Y"])

    def test_stage1_checkpoint_rejected(self, tiny_manifest):
        r1 = training.train_stage1(tiny_manifest, tiny_cfg())
        with pytest.raises(CheckpointError, match="enhancement"):
            training.infer(np.random.default_rng(3).random((40, 48, 3)), r1.checkpoint)

    def test_checkpoint_file_round_trip(self, tiny_manifest, tmp_path, full_ckpt):
        path = tmp_path / "full.ckpt"
        torch.save(full_ckpt, str(path))
        img = np.random.default_rng(4).random((40, 48, 3))
        a = training.infer(img, full_ckpt)
        b = training.infer(img, str(path))
        assert np.array_equal(a["S_Y"], b["S_Y"])
