"""Decoder training on normal-only data, checkpointing and evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from . import metrics
from .decoder import Decoder, DecoderSpec, build_decoder
from .encoder import BackboneSpec, Encoder
from .errors import ConfigError, DataError, HFRError, NumericError, TrainingDivergedError
from .residual import EPS, aggregate_anomaly_map, anomaly_score, hierarchical_loss, residual_maps

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hfrae-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    lr_schedule: str = "constant"
    grad_clip: Optional[float] = None
    normalization: str = "location"
    eps: float = EPS
    cache_features: bool = True
    holdout_fraction: float = 0.0
    device: str = "cpu"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")


@dataclass
class InferenceConfig:
    sigma: float = 4.0
    level_scaling: str = "spatial"
    fpr_cap: float = 0.3
    pixel_bins: int = metrics.DEFAULT_BINS
    per_image_pixel_auroc: bool = False
    batch_size: int = 16

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.fpr_cap <= 1:
            raise ConfigError(f"fpr_cap must lie in (0, 1], got {self.fpr_cap}")


@dataclass
class Checkpoint:
    decoder_state: Dict[str, Tensor]
    decoder_spec: DecoderSpec
    encoder_shapes: List[Tuple[int, int, int]]
    backbone: BackboneSpec
    encoder_hash: str
    config: dict
    epoch: int
    final_loss: float
    loss_history: List[dict] = field(default_factory=list)

    def restore_decoder(self) -> Decoder:
        decoder = build_decoder(self.decoder_spec, self.encoder_shapes)
        decoder.load_state_dict(self.decoder_state)
        return decoder.eval()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "decoder_state": ckpt.decoder_state,
        "decoder_spec": asdict(ckpt.decoder_spec),
        "encoder_shapes": [list(s) for s in ckpt.encoder_shapes],
        "backbone": asdict(ckpt.backbone),
        "encoder_hash": ckpt.encoder_hash,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "final_loss": ckpt.final_loss,
        "loss_history": ckpt.loss_history,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    spec = payload["decoder_spec"]
    return Checkpoint(
        decoder_state=payload["decoder_state"],
        decoder_spec=DecoderSpec(**spec),
        encoder_shapes=[tuple(s) for s in payload["encoder_shapes"]],
        backbone=BackboneSpec(**payload["backbone"]),
        encoder_hash=payload["encoder_hash"],
        config=payload["config"],
        epoch=payload["epoch"],
        final_loss=payload["final_loss"],
        loss_history=payload["loss_history"],
    )


def check_compatible(ckpt: Checkpoint, encoder: Encoder):
    """Refuse to pair a decoder with a backbone other than the one it was trained against."""
    if ckpt.backbone.architecture != encoder.spec.architecture:
        raise ConfigError(
            f"checkpoint was trained on {ckpt.backbone.architecture}, "
            f"config selects {encoder.spec.architecture}"
        )
    actual = encoder.weight_hash()
    if actual != ckpt.encoder_hash:
        raise ConfigError(
            "backbone weight hash mismatch: the checkpoint was trained against encoder "
            f"{ckpt.encoder_hash[:12]}..., the configured weights hash to {actual[:12]}...; "
            "residuals would compare against features the decoder never saw"
        )


def stack_images(records: Sequence) -> Tensor:
    return torch.from_numpy(np.stack([r.image for r in records]))


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def encode_all(encoder: Encoder, records: Sequence, batch_size: int, device="cpu") -> List[Tensor]:
    levels: List[List[Tensor]] = [[], [], []]
    for idx in _batches(len(records), batch_size):
        feats = encoder(stack_images([records[i] for i in idx]).to(device))
        for k, f in enumerate(feats):
            levels[k].append(f)
    return [torch.cat(l) for l in levels]


def dataset_fingerprint(records: Sequence) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.source_path.encode())
        h.update(np.ascontiguousarray(r.image).tobytes())
    return h.hexdigest()


def train(
    encoder: Encoder,
    decoder: Decoder,
    train_data: Sequence,
    config: TrainConfig,
    holdout_data: Sequence = (),
    run_config: Optional[dict] = None,
) -> Checkpoint:
    """Minimize the hierarchical reconstruction loss over the decoder only.

    With ``cache_features`` the frozen encoder runs once over the training set;
    every epoch then reuses those features, which is exact because the encoder
    is deterministic and no augmentation is applied.
    """
    if any(getattr(r, "is_anomalous", False) for r in train_data):
        raise DataError("training data must contain normal samples only")
    if len(train_data) == 0:
        raise DataError("empty training set")
    device = torch.device(config.device)
    encoder.to(device)
    decoder.to(device)
    hash_before = encoder.weight_hash()

    opt = torch.optim.SGD(
        decoder.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    sched = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
        if config.lr_schedule == "cosine"
        else None
    )
    gen = torch.Generator().manual_seed(config.seed)
    cached = encode_all(encoder, train_data, config.batch_size, device) if config.cache_features else None
    hold_feats = encode_all(encoder, holdout_data, config.batch_size, device) if len(holdout_data) else None

    history = []
    n = len(train_data)
    for epoch in range(1, config.epochs + 1):
        decoder.train()
        order = torch.randperm(n, generator=gen).numpy()
        total, level_totals = 0.0, np.zeros(3)
        for b, idx in enumerate(_batches(n, config.batch_size, order)):
            if cached is not None:
                enc = [f[torch.from_numpy(idx)] for f in cached]
            else:
                enc = encoder(stack_images([train_data[i] for i in idx]).to(device))
            dec = decoder(enc[-1])
            try:
                loss, levels = hierarchical_loss(enc, dec, config.eps, config.normalization)
            except NumericError:
                # decoder output itself went non-finite; report which levels
                bad = [float("nan") if not torch.isfinite(d).all() else 0.0 for d in dec]
                raise TrainingDivergedError(epoch, b, bad) from None
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, b, [float(l) for l in levels])
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(decoder.parameters(), config.grad_clip)
            opt.step()
            total += loss.item() * len(idx)
            level_totals += np.array([l.item() for l in levels]) * len(idx)
        row = {
            "epoch": epoch,
            "loss": total / n,
            "loss_level1": float(level_totals[0] / n),
            "loss_level2": float(level_totals[1] / n),
            "loss_level3": float(level_totals[2] / n),
            "lr": float(opt.param_groups[0]["lr"]),
        }
        if hold_feats is not None:
            row["holdout_loss"] = _feature_loss(decoder, hold_feats, config)
        history.append(row)
        decoder.epochs_trained += 1
        if sched is not None:
            sched.step()
        logger.info("epoch %d/%d loss %.6f", epoch, config.epochs, row["loss"])

    if encoder.weight_hash() != hash_before:
        raise HFRError("encoder weights changed during training")
    decoder.eval()
    return Checkpoint(
        decoder_state={k: v.detach().cpu().clone() for k, v in decoder.state_dict().items()},
        decoder_spec=decoder.spec,
        encoder_shapes=decoder.encoder_shapes,
        backbone=encoder.spec,
        encoder_hash=hash_before,
        config=run_config if run_config is not None else {"train": asdict(config)},
        epoch=int(decoder.epochs_trained),
        final_loss=history[-1]["loss"],
        loss_history=history,
    )


@torch.no_grad()
def _feature_loss(decoder: Decoder, feats: List[Tensor], config: TrainConfig) -> float:
    decoder.eval()
    loss, _ = hierarchical_loss(feats, decoder(feats[-1]), config.eps, config.normalization)
    return float(loss)


@torch.no_grad()
def predict(
    encoder: Encoder,
    decoder: Decoder,
    images: Tensor,
    config: InferenceConfig = InferenceConfig(),
    normalization: str = "location",
    eps: float = EPS,
) -> Tuple[np.ndarray, np.ndarray]:
    """Anomaly maps ``(B, H, W)`` and scores ``(B,)`` from one forward pass per image."""
    decoder.eval()
    device = next(decoder.parameters()).device
    enc = encoder(images.to(device))
    dec = decoder(enc[-1])
    phis = residual_maps(enc, dec, eps, normalization)
    maps = aggregate_anomaly_map(phis, tuple(images.shape[-2:]), config.sigma, config.level_scaling)
    return maps, anomaly_score(maps)


def evaluate(
    encoder: Encoder,
    decoder: Decoder,
    test_data: Sequence,
    config: InferenceConfig = InferenceConfig(),
    category: str = "",
    normalization: str = "location",
    return_outputs: bool = False,
):
    """Score every test record and compute the detection/localization metrics.

    Localization metrics are ``None`` unless every record carries a mask.
    """
    if len(test_data) == 0:
        raise DataError("empty test set")
    maps, scores = [], []
    for idx in _batches(len(test_data), config.batch_size):
        m, s = predict(encoder, decoder, stack_images([test_data[i] for i in idx]), config, normalization)
        maps.extend(m)
        scores.extend(np.atleast_1d(s).tolist())
    labels = [r.label for r in test_data]
    masks = [r.mask for r in test_data]

    image_auc = metrics.image_auroc(scores, labels)
    pixel_auc = pro = None
    if all(m is not None for m in masks) and any(m.any() for m in masks):
        pixel_auc = metrics.pixel_auroc(
            maps, masks, bins=config.pixel_bins, per_image=config.per_image_pixel_auroc
        )
        pro = metrics.aupro(maps, masks, fpr_cap=config.fpr_cap).aupro
    untrained = int(decoder.epochs_trained) == 0
    if untrained:
        logger.warning("evaluating an untrained decoder")
    report = metrics.EvalReport(
        category=category or (test_data[0].category if hasattr(test_data[0], "category") else ""),
        image_auroc=image_auc,
        pixel_auroc=pixel_auc,
        aupro=pro,
        n_images=len(test_data),
        untrained=untrained,
        metadata={"backbone": encoder.spec.architecture, "pretrained": encoder.spec.is_pretrained},
    )
    if return_outputs:
        return report, {"scores": np.asarray(scores), "maps": np.stack(maps), "labels": labels}
    return report


def write_loss_csv(history: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(history[0].keys()) if history else ["epoch", "loss"]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def write_metadata(path, **entries) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(entries, indent=2, sort_keys=True, default=str))
    return path


def loss_ratio(history: Sequence[dict]) -> float:
    """Final-epoch loss over first-epoch loss."""
    first, last = history[0]["loss"], history[-1]["loss"]
    return last / first if first > 0 else math.nan
