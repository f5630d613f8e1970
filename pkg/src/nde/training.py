"""Two-stage training: decomposition alone first, then enhancement + dehazing
with the decomposition frozen.

Stage 1 feeds nighttime-hazed and clear images through one shared-weight
decomposition net and minimizes cross-reconstruction + reflectance similarity
+ structure-aware smoothness. Stage 2 freezes those weights, feeds only the
nighttime image through the decomposition, and trains the enhancement and
dehazing nets against the reconstruction objective (feature loss + weighted
MSE with frozen-decomposition self-supervision targets).

Checkpoints are versioned archives of named arrays (plus optimizer and RNG
state) so an interrupted run resumes bit-reproducibly on the same platform.
"""

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import metrics
from .data import AugmentConfig, iter_pairs, load_pair, sample_batch
from .decomposition import (
    DecompLossWeights,
    DecompNetConfig,
    DecompositionUNet,
    RetinexPair,
    decompose,
    recompose,
    recompose_t,
    stage1_loss,
)
from .dehazing import DehazeNetConfig, ReflectanceDehazer, dehaze_reflectance
from .enhancement import EnhanceNetConfig, IlluminationEnhancer, enhance_illumination
from .errors import CheckpointError, ConfigurationError, TrainingDivergedError
from .imaging import validate_image
from .reconstruction import FeatureExtractor, ReconLossWeights, loss_mse, loss_vgg
from .utils import stack_images, tensor_to_image

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.5e-4
    batch_size: int = 2
    crop: int = 256
    epochs_stage1: int = 55
    epochs_stage2: int = 25
    steps_per_epoch: int | None = None  # default: one pass over the train pairs
    max_steps: int | None = None  # hard cap on optimizer steps per stage
    seed: int = 0
    augment: bool = True
    scale_min: float = 0.8
    scale_max: float = 1.2
    base_channels: int = 32
    unet_depth: int = 4
    enhance_layers: int = 11
    enhance_channels: int = 32
    feature_base_channels: int = 64
    feature_seed: int = 77
    dropout_rate: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_pairs: int = 16  # cap on the deterministic eval batch
    lambda_dd: float = 1.0
    lambda_nn: float = 1.0
    lambda_nd: float = 0.01
    lambda_dn: float = 0.001
    lambda_s: float = 10.0
    lambda_image: float = 1.0
    lambda_illum: float = 0.01
    lambda_refl: float = 0.05
    lambda_feat: float = 1.0
    layer_weights: tuple = (8.0, 4.0, 2.0, 1.0)

    @classmethod
    def desk(cls, **overrides):
        """Desk-scale preset: fixture corpus, 96x96 crops, 50 steps per stage."""
        base = dict(crop=96, max_steps=50, feature_base_channels=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def valid_keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping, base=None):
        """Build a config from flat string key/values; unknown keys are rejected."""
        values = dataclasses.asdict(base) if base is not None else {}
        valid = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            if key not in valid:
                raise ConfigurationError(
                    f"unknown config key {key!r}; valid keys: {', '.join(sorted(valid))}"
                )
            values[key] = _coerce(raw, cls._example(key))
        return cls(**values)

    @classmethod
    def _example(cls, key):
        defaults = cls()
        return getattr(defaults, key)

    def decomp_weights(self):
        return DecompLossWeights(
            lambda_dd=self.lambda_dd,
            lambda_nn=self.lambda_nn,
            lambda_nd=self.lambda_nd,
            lambda_dn=self.lambda_dn,
            lambda_s=self.lambda_s,
        )

    def recon_weights(self):
        return ReconLossWeights(
            lambda_image=self.lambda_image,
            lambda_illum=self.lambda_illum,
            lambda_refl=self.lambda_refl,
            lambda_feat=self.lambda_feat,
            layer_weights=tuple(self.layer_weights),
        )

    def augment_config(self):
        return AugmentConfig(
            enabled=self.augment, scale_range=(self.scale_min, self.scale_max), crop=self.crop
        )


def _coerce(raw, example):
    if not isinstance(raw, str):
        return raw
    if example is None or isinstance(example, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        if example is None:
            return int(raw) if raw.lower() != "none" else None
        raise ConfigurationError(f"cannot parse boolean from {raw!r}")
    if isinstance(example, tuple):
        return tuple(float(v) for v in raw.split(","))
    if isinstance(example, int):
        return int(raw)
    if isinstance(example, float):
        return float(raw)
    return raw


def config_hash(cfg: TrainConfig):
    import hashlib

    doc = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass
class LossLogRow:
    stage: str
    epoch: int
    step: int
    loss_name: str
    value: float


def write_loss_log(history, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch", "step", "loss_name", "value"])
        for row in history:
            writer.writerow([row.stage, row.epoch, row.step, row.loss_name, f"{row.value:.8f}"])


@dataclass
class TrainResult:
    checkpoint: dict
    path: str | None
    history: list
    initial_eval: dict
    final_eval: dict


def build_models(cfg: TrainConfig):
    decom = DecompositionUNet(DecompNetConfig(base_channels=cfg.base_channels, depth=cfg.unet_depth, crop=cfg.crop))
    enhancer = IlluminationEnhancer(
        EnhanceNetConfig(num_layers=cfg.enhance_layers, hidden_channels=cfg.enhance_channels)
    )
    dehazer = ReflectanceDehazer(DehazeNetConfig(dropout_rate=cfg.dropout_rate))
    return decom, enhancer, dehazer


def _rng_payload(rng):
    return json.dumps(rng.bit_generator.state)


def _restore_rng(payload):
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(payload)
    return rng


def _checkpoint_doc(stage, cfg, models, optimizer, spe, total_steps, data_rng):
    return {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "config": dataclasses.asdict(cfg),
        "models": {name: net.state_dict() for name, net in models.items()},
        "optimizer": optimizer.state_dict(),
        "epoch": (total_steps - 1) // spe if total_steps else 0,
        "step": total_steps,
        "torch_rng": torch.get_rng_state(),
        "data_rng": _rng_payload(data_rng),
    }


def load_checkpoint(source):
    if isinstance(source, dict):
        doc = source
    else:
        try:
            doc = torch.load(source, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {source}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    return doc


def checkpoint_config(doc):
    cfg_dict = dict(doc["config"])
    if isinstance(cfg_dict.get("layer_weights"), list):
        cfg_dict["layer_weights"] = tuple(cfg_dict["layer_weights"])
    return TrainConfig(**cfg_dict)


def _eval_pairs(manifest, partition, cfg):
    from .data import _paired_transform

    aug = AugmentConfig(enabled=False, crop=cfg.crop)
    pairs = []
    for rec, var in iter_pairs(manifest, partition):
        pairs.append(_paired_transform(load_pair(manifest, rec, var), aug, rng=None))
        if len(pairs) >= cfg.eval_pairs:
            break
    if not pairs:
        raise ConfigurationError(f"partition {partition!r} is empty")
    s_n = stack_images([p.night_hazy for p in pairs])
    s_d = stack_images([p.clear for p in pairs])
    return s_n, s_d


def _check_finite(value, context, out_dir):
    if torch.isfinite(value).all():
        return
    dump = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        dump = os.path.join(out_dir, f"diverged_{context.get('stage')}_{context.get('step')}.json")
        with open(dump, "w") as fh:
            json.dump(context, fh, indent=1, default=str)
    raise TrainingDivergedError(
        f"non-finite loss at {context.get('stage')} step {context.get('step')}"
        + (f"; diagnostics in {dump}" if dump else "")
    )


def _total_steps(n_pairs, cfg, epochs):
    spe = cfg.steps_per_epoch or max(1, -(-n_pairs // cfg.batch_size))
    total = epochs * spe
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    return total, spe


def train_stage1(manifest, cfg: TrainConfig = TrainConfig(), out_dir=None, resume=None):
    """Train the decomposition net alone; returns result with eval losses and history."""
    torch.manual_seed(cfg.seed)
    data_rng = np.random.default_rng(cfg.seed)
    decom, _, _ = build_models(cfg)
    optimizer = torch.optim.Adam(
        decom.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps
    )
    start_step = 0
    if resume is not None:
        doc = load_checkpoint(resume)
        decom.load_state_dict(doc["models"]["decomposition"])
        optimizer.load_state_dict(doc["optimizer"])
        torch.set_rng_state(doc["torch_rng"])
        data_rng = _restore_rng(doc["data_rng"])
        start_step = doc["step"]

    weights = cfg.decomp_weights()
    eval_n, eval_d = _eval_pairs(manifest, "train", cfg)
    n_pairs = sum(1 for _ in iter_pairs(manifest, "train"))
    total_steps, spe = _total_steps(n_pairs, cfg, cfg.epochs_stage1)
    aug = cfg.augment_config()
    history = []

    def evaluate_losses():
        decom.eval()
        with torch.no_grad():
            r_n, i_n = decom(eval_n)
            r_d, i_d = decom(eval_d)
            total, parts = stage1_loss(r_n, i_n, r_d, i_d, eval_n, eval_d, weights)
        return {"total": float(total), **{k: float(v) for k, v in parts.items()}}

    initial_eval = evaluate_losses()
    logger.info("stage1 initial eval: %s", initial_eval)

    for step in range(start_step, total_steps):
        epoch = step // spe
        batch = sample_batch(manifest, "train", cfg.batch_size, aug, data_rng)
        s_n = stack_images([p.night_hazy for p in batch])
        s_d = stack_images([p.clear for p in batch])
        decom.train()
        # shared weights over both branches: one net, one batched forward
        r_all, i_all = decom(torch.cat([s_n, s_d], dim=0))
        b = s_n.shape[0]
        total, parts = stage1_loss(r_all[:b], i_all[:b], r_all[b:], i_all[b:], s_n, s_d, weights)
        _check_finite(
            total,
            {"stage": "stage1", "step": step, "scenes": [p.scene_id for p in batch],
             "losses": {k: float(v.detach()) for k, v in parts.items()}},
            out_dir,
        )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        history.append(LossLogRow("stage1", epoch, step, "total", float(total.detach())))
        for name, value in parts.items():
            history.append(LossLogRow("stage1", epoch, step, name, float(value.detach())))

    final_eval = evaluate_losses()
    logger.info("stage1 final eval: %s", final_eval)

    path = None
    ckpt = _checkpoint_doc("stage1", cfg, {"decomposition": decom}, optimizer, spe, total_steps, data_rng)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "stage1.ckpt")
        torch.save(ckpt, path)
        write_loss_log(history, os.path.join(out_dir, "stage1_losses.csv"))
    return TrainResult(ckpt, path, history, initial_eval, final_eval)


def train_stage2(manifest, stage1_ckpt, cfg: TrainConfig = TrainConfig(), out_dir=None, resume=None):
    """Freeze the stage-1 decomposition; train enhancement + dehazing on L_recon."""
    torch.manual_seed(cfg.seed + 1)
    data_rng = np.random.default_rng(cfg.seed + 1)
    stage1_doc = load_checkpoint(stage1_ckpt)
    if "decomposition" not in stage1_doc["models"]:
        raise CheckpointError("stage-1 checkpoint lacks decomposition weights")

    decom, enhancer, dehazer = build_models(cfg)
    decom.load_state_dict(stage1_doc["models"]["decomposition"])
    decom.requires_grad_(False)
    decom.eval()
    extractor = FeatureExtractor(base_channels=cfg.feature_base_channels, seed=cfg.feature_seed)
    recon_w = cfg.recon_weights()
    optimizer = torch.optim.Adam(
        list(enhancer.parameters()) + list(dehazer.parameters()),
        lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
    )
    start_step = 0
    if resume is not None:
        doc = load_checkpoint(resume)
        enhancer.load_state_dict(doc["models"]["enhancement"])
        dehazer.load_state_dict(doc["models"]["dehazing"])
        optimizer.load_state_dict(doc["optimizer"])
        torch.set_rng_state(doc["torch_rng"])
        data_rng = _restore_rng(doc["data_rng"])
        start_step = doc["step"]

    eval_n, eval_d = _eval_pairs(manifest, "train", cfg)
    try:
        val_n, val_d = _eval_pairs(manifest, "test", cfg)
    except ConfigurationError:
        val_n = val_d = None
    n_pairs = sum(1 for _ in iter_pairs(manifest, "train"))
    total_steps, spe = _total_steps(n_pairs, cfg, cfg.epochs_stage2)
    aug = cfg.augment_config()
    history = []

    def forward(s_n):
        r_n, i_n = decom(s_n)
        i_y = enhancer(i_n, r_n)
        r_y = dehazer(r_n)
        return recompose_t(i_y, r_y), i_y, r_y

    def evaluate_losses(n_imgs, d_imgs):
        enhancer.eval()
        dehazer.eval()
        with torch.no_grad():
            s_y, i_y, r_y = forward(n_imgs)
            r_d, i_d = decom(d_imgs)
            l_mse = loss_mse(s_y, d_imgs, i_y, i_d, r_y, r_d, recon_w)
            l_feat = loss_vgg(s_y, d_imgs, extractor, recon_w)
        return {"total": float(l_mse + l_feat), "mse": float(l_mse), "vgg": float(l_feat)}

    def validation_ssim():
        if val_n is None:
            return None
        enhancer.eval()
        dehazer.eval()
        with torch.no_grad():
            s_y, _, _ = forward(val_n)
        vals = [
            metrics.ssim(tensor_to_image(s_y[k : k + 1]), tensor_to_image(val_d[k : k + 1]))
            for k in range(s_y.shape[0])
        ]
        return float(np.mean(vals))

    initial_eval = evaluate_losses(eval_n, eval_d)
    logger.info("stage2 initial eval: %s", initial_eval)

    for step in range(start_step, total_steps):
        epoch = step // spe
        batch = sample_batch(manifest, "train", cfg.batch_size, aug, data_rng)
        s_n = stack_images([p.night_hazy for p in batch])
        s_d = stack_images([p.clear for p in batch])
        enhancer.train()
        dehazer.train()
        with torch.no_grad():  # frozen decomposition: inputs and self-supervision targets
            r_n, i_n = decom(s_n)
            r_d, i_d = decom(s_d)
        i_y = enhancer(i_n, r_n)
        r_y = dehazer(r_n)
        s_y = recompose_t(i_y, r_y)
        l_mse = loss_mse(s_y, s_d, i_y, i_d, r_y, r_d, recon_w)
        l_feat = loss_vgg(s_y, s_d, extractor, recon_w)
        total = l_mse + l_feat
        _check_finite(
            total,
            {"stage": "stage2", "step": step, "scenes": [p.scene_id for p in batch],
             "losses": {"mse": float(l_mse.detach()), "vgg": float(l_feat.detach())}},
            out_dir,
        )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        history.append(LossLogRow("stage2", epoch, step, "total", float(total.detach())))
        history.append(LossLogRow("stage2", epoch, step, "mse", float(l_mse.detach())))
        history.append(LossLogRow("stage2", epoch, step, "vgg", float(l_feat.detach())))
        if (step + 1) % spe == 0 or step + 1 == total_steps:
            v = validation_ssim()
            if v is not None:
                history.append(LossLogRow("stage2", epoch, step, "val_ssim", v))

    final_eval = evaluate_losses(eval_n, eval_d)
    logger.info("stage2 final eval: %s", final_eval)

    ckpt = _checkpoint_doc(
        "full", cfg,
        {"decomposition": decom, "enhancement": enhancer, "dehazing": dehazer},
        optimizer, spe, total_steps, data_rng,
    )
    path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "full.ckpt")
        torch.save(ckpt, path)
        write_loss_log(history, os.path.join(out_dir, "stage2_losses.csv"))
    return TrainResult(ckpt, path, history, initial_eval, final_eval)


def load_models(source):
    """Rebuild all modules present in a checkpoint; returns (models dict, config)."""
    doc = load_checkpoint(source)
    cfg = checkpoint_config(doc)
    decom, enhancer, dehazer = build_models(cfg)
    models = {}
    for name, net in (("decomposition", decom), ("enhancement", enhancer), ("dehazing", dehazer)):
        if name in doc["models"]:
            net.load_state_dict(doc["models"][name])
            net.eval()
            models[name] = net
    return models, cfg, doc


class RestorationPipeline:
    """All three modules loaded from one checkpoint; callable image -> restored image."""

    def __init__(self, checkpoint):
        models, cfg, doc = load_models(checkpoint)
        for required in ("decomposition", "enhancement", "dehazing"):
            if required not in models:
                raise CheckpointError(f"checkpoint (stage {doc.get('stage')!r}) lacks {required} weights")
        self.models = models
        self.config = cfg

    def run(self, night_hazy):
        """Returns the restored image together with all intermediates."""
        validate_image(night_hazy, channels=3)
        pair_n = decompose(night_hazy, self.models["decomposition"])
        i_y = enhance_illumination(pair_n.illumination, pair_n.reflectance, self.models["enhancement"])
        r_y = dehaze_reflectance(pair_n.reflectance, self.models["dehazing"])
        s_y = recompose(RetinexPair(illumination=i_y, reflectance=r_y))
        return {
            "S_Y": s_y,
            "I_N": pair_n.illumination,
            "R_N": pair_n.reflectance,
            "I_Y": i_y,
            "R_Y": r_y,
        }

    def __call__(self, night_hazy):
        return self.run(night_hazy)["S_Y"]


def infer(night_hazy, checkpoint):
    """Full pipeline on one image: decompose, enhance, dehaze, recompose."""
    return RestorationPipeline(checkpoint).run(night_hazy)
