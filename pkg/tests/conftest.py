import os
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from nde import data, fixtures, metrics, training
from nde.data import AugmentConfig, _paired_transform
from nde.decomposition import DecompNetConfig, DecompositionUNet, decompose, recompose, stage1_loss
from nde.utils import stack_images, state_dict_digest


def _held_out_decom_loss(state_dict, manifest, cfg):
    net = DecompositionUNet(DecompNetConfig(base_channels=cfg.base_channels, depth=cfg.unet_depth))
    net.load_state_dict(state_dict)
    net.eval()
    aug = AugmentConfig(enabled=False, crop=cfg.crop)
    pairs = [
        _paired_transform(data.load_pair(manifest, r, v), aug, None)
        for r, v in data.iter_pairs(manifest, "test")
    ]
    s_n = stack_images([p.night_hazy for p in pairs])
    s_d = stack_images([p.clear for p in pairs])
    with torch.no_grad():
        r_n, i_n = net(s_n)
        r_d, i_d = net(s_d)
        _, parts = stage1_loss(r_n, i_n, r_d, i_d, s_n, s_d, cfg.decomp_weights())
    return float(parts["decom"])


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One desk-scale end-to-end run shared by the acceptance criteria:
    8 fixture scenes, 96x96 crops, 50 steps per stage, batch 2, lr 2.5e-4."""
    root = tmp_path_factory.mktemp("desk")
    src = os.path.join(root, "src")
    corpus = os.path.join(root, "corpus")
    fixtures.generate_fixture_corpus(src, num_scenes=8, seed=0)
    manifest = data.split_scenes(data.synthesize_corpus(src, corpus), seed=0)
    cfg = training.TrainConfig.desk()

    # held-out loss of the network exactly as the trainer initializes it
    torch.manual_seed(cfg.seed)
    init_net, _, _ = training.build_models(cfg)
    heldout_decom_initial = _held_out_decom_loss(init_net.state_dict(), manifest, cfg)

    t0 = time.perf_counter()
    stage1 = training.train_stage1(manifest, cfg, out_dir=os.path.join(root, "run"))
    stage1_seconds = time.perf_counter() - t0
    heldout_decom_final = _held_out_decom_loss(stage1.checkpoint["models"]["decomposition"], manifest, cfg)

    decom_digest_before = state_dict_digest(stage1.checkpoint["models"]["decomposition"])
    net = DecompositionUNet(DecompNetConfig(base_channels=cfg.base_channels, depth=cfg.unet_depth))
    net.load_state_dict(stage1.checkpoint["models"]["decomposition"])

    # held-out recomposition error over both members of every test pair
    recompose_errors = []
    for rec, var in data.iter_pairs(manifest, "test"):
        pair = data.load_pair(manifest, rec, var)
        for img in (pair.night_hazy, pair.clear):
            p = decompose(img, net)
            recompose_errors.append(float(np.mean(np.abs(recompose(p) - img))))

    t1 = time.perf_counter()
    stage2 = training.train_stage2(manifest, stage1.checkpoint, cfg, out_dir=os.path.join(root, "run"))
    stage2_seconds = time.perf_counter() - t1
    decom_digest_after = state_dict_digest(stage2.checkpoint["models"]["decomposition"])

    pipeline = training.RestorationPipeline(stage2.checkpoint)
    baseline_ssim, model_ssim, illum_in, illum_out = [], [], [], []
    for rec, var in data.iter_pairs(manifest, "test"):
        pair = data.load_pair(manifest, rec, var)
        outs = pipeline.run(pair.night_hazy)
        baseline_ssim.append(metrics.ssim(pair.night_hazy, pair.clear))
        model_ssim.append(metrics.ssim(outs["S_Y"], pair.clear))
        illum_in.append(float(outs["I_N"].mean()))
        illum_out.append(float(outs["I_Y"].mean()))

    return SimpleNamespace(
        manifest=manifest,
        config=cfg,
        stage1=stage1,
        stage2=stage2,
        heldout_decom_initial=heldout_decom_initial,
        heldout_decom_final=heldout_decom_final,
        stage1_seconds=stage1_seconds,
        stage2_seconds=stage2_seconds,
        decomposition_net=net,
        recompose_errors=recompose_errors,
        decom_digest_before=decom_digest_before,
        decom_digest_after=decom_digest_after,
        baseline_ssim=baseline_ssim,
        model_ssim=model_ssim,
        illum_in=illum_in,
        illum_out=illum_out,
        root=str(root),
    )
